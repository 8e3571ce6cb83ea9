"""Loss terms for decomposed training with semantic augmentation.

All batched functions take ``(N, d)`` tensors and return per-example values of
shape ``(N,)``; 1-D inputs are treated as a single example and give scalars.

Gradient flow follows the parameter lists of the individual terms:

* the orthogonality term sees the backbone output ``z`` as a constant leaf, so
  it trains only the branch extractors and classifiers (second order, through
  the feature gradients);
* the augmentation direction is a constant (stop-gradient), so the concat loss
  trains the backbone, both extractors and the concat head, but not the
  context classifier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .model import ParameterSet, branch_classifier, forward_backbone, forward_branch, forward_concat

TAU_G = 1e-12
VARIANTS = ("gradient_orth", "feature_orth", "none")

# Instrumentation: number of augment_context_features calls since import.
AUGMENT_CALLS = 0


class NumericError(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in {term}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_orth: float = 0.01
    epsilon: float = 1.0
    concat_enabled: bool = True
    variant: str = "gradient_orth"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_orth", "epsilon"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class LossBreakdown:
    concat_loss: float
    cat_loss: float
    ctx_loss: float
    orth_loss: float
    total: float
    per_example: dict | None = field(default=None, repr=False)

    def recomposed(self, w: LossWeights) -> float:
        return self.concat_loss + w.lambda1 * self.cat_loss + w.lambda2 * self.ctx_loss + w.lambda_orth * self.orth_loss

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_example")
        return d


def _check_finite(t: torch.Tensor, term: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(term)


def cross_entropy(logits: torch.Tensor, label) -> torch.Tensor:
    """``-log softmax(logits)[label]`` per example, via log-sum-exp."""
    _check_finite(logits, "logits")
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.ndim == 1:
        return -F.log_softmax(logits, dim=-1)[label]
    return F.cross_entropy(logits, label, reduction="none")


def unit_normalize(v: torch.Tensor, tol: float = TAU_G) -> tuple[torch.Tensor, torch.Tensor]:
    """Rows of ``v`` scaled to unit norm, plus a mask of rows with norm >= tol.

    Degenerate rows come back as zeros. The denominator is never padded, so
    non-degenerate rows have norm exactly 1 up to rounding.
    """
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    ok = norm >= tol
    safe = torch.where(ok, norm, torch.ones_like(norm))
    unit = torch.where(ok, v / safe, torch.zeros_like(v))
    return unit, ok.squeeze(-1)


def orth_loss(g1: torch.Tensor, g2: torch.Tensor, tol: float = TAU_G) -> torch.Tensor:
    """Squared cosine between two gradients; 0 where either is degenerate."""
    u1, _ = unit_normalize(g1, tol)
    u2, _ = unit_normalize(g2, tol)
    return (u1 * u2).sum(dim=-1) ** 2


def degenerate_count(*vectors: torch.Tensor, tol: float = TAU_G) -> int:
    bad = None
    for v in vectors:
        m = torch.linalg.vector_norm(v.detach(), dim=-1) < tol
        bad = m if bad is None else bad | m
    return int(bad.sum())


def feature_orth_loss(z1: torch.Tensor, z2: torch.Tensor, tol: float = TAU_G) -> torch.Tensor:
    return orth_loss(z1, z2, tol)


def grad_wrt_features(
    params: ParameterSet, z: torch.Tensor, label, which: str, create_graph: bool = True
) -> torch.Tensor:
    """Gradient of the branch cross-entropy w.r.t. the backbone features.

    ``z`` is detached and used as a fresh leaf. With ``create_graph`` the result
    stays differentiable w.r.t. the branch parameters.
    """
    with torch.enable_grad():
        leaf = z.detach().requires_grad_(True)
        _, logits = forward_branch(params, leaf, which)
        loss = cross_entropy(logits, label).sum()
        (g,) = torch.autograd.grad(loss, leaf, create_graph=create_graph)
    return g


def context_feature_grad(params: ParameterSet, z2: torch.Tensor, c) -> torch.Tensor:
    """Gradient of the context loss w.r.t. the context features (constant)."""
    with torch.enable_grad():
        leaf = z2.detach().requires_grad_(True)
        loss = cross_entropy(branch_classifier(params, leaf, "context"), c).sum()
        (g,) = torch.autograd.grad(loss, leaf)
    return g.detach()


def augment_context_features(
    z2: torch.Tensor, g_aug: torch.Tensor, epsilon: float, alpha, tol: float = TAU_G
) -> torch.Tensor:
    """Move ``z2`` by ``alpha * epsilon`` along the unit context-loss gradient.

    Rows whose gradient norm is below ``tol`` are returned unchanged.
    """
    global AUGMENT_CALLS
    AUGMENT_CALLS += 1
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    alpha = torch.as_tensor(alpha, dtype=z2.dtype)
    if ((alpha < 0) | (alpha > 1)).any():
        raise ValueError("alpha must lie in [0, 1]")
    unit, _ = unit_normalize(g_aug, tol)
    if unit.ndim == 2 and alpha.ndim == 1:
        alpha = alpha[:, None]
    return z2 + alpha * epsilon * unit


@dataclass
class DecAugTerms:
    """Per-example tensors from one pass of the training pipeline."""

    concat: torch.Tensor
    cat: torch.Tensor
    ctx: torch.Tensor
    orth: torch.Tensor
    total: torch.Tensor
    logits: torch.Tensor
    degenerate_orth: int = 0
    degenerate_aug: int = 0

    def breakdown(self, keep_per_example: bool = False) -> LossBreakdown:
        per = None
        if keep_per_example:
            per = {k: getattr(self, k).detach().cpu().numpy() for k in ("concat", "cat", "ctx", "orth", "total")}
        return LossBreakdown(
            concat_loss=float(self.concat.detach().mean()),
            cat_loss=float(self.cat.detach().mean()),
            ctx_loss=float(self.ctx.detach().mean()),
            orth_loss=float(self.orth.detach().mean()),
            total=float(self.total.detach().mean()),
            per_example=per,
        )


def decaug_terms(
    params: ParameterSet,
    x: torch.Tensor,
    y: torch.Tensor,
    c: torch.Tensor,
    weights: LossWeights,
    alpha: torch.Tensor,
    differentiable: bool = True,
) -> DecAugTerms:
    """Per-example losses for a batch; ``alpha`` has one entry per example."""
    z = forward_backbone(params, x)
    z1, cat_logits = forward_branch(params, z, "category")
    z2, ctx_logits = forward_branch(params, z, "context")
    cat = cross_entropy(cat_logits, y)
    ctx = cross_entropy(ctx_logits, c)

    degenerate_orth = 0
    if weights.variant == "gradient_orth":
        g1 = grad_wrt_features(params, z, y, "category", create_graph=differentiable)
        g2 = grad_wrt_features(params, z, c, "context", create_graph=differentiable)
        orth = orth_loss(g1, g2)
        degenerate_orth = degenerate_count(g1, g2)
    elif weights.variant == "feature_orth":
        orth = feature_orth_loss(z1, z2)
        degenerate_orth = degenerate_count(z1, z2)
    else:
        orth = torch.zeros_like(cat)

    degenerate_aug = 0
    if weights.concat_enabled:
        if weights.epsilon > 0:
            g_aug = context_feature_grad(params, z2, c)
            degenerate_aug = degenerate_count(g_aug)
            z2_aug = augment_context_features(z2, g_aug, weights.epsilon, alpha)
        else:
            z2_aug = z2
        logits = forward_concat(params, z1, z2_aug)
        concat = cross_entropy(logits, y)
    else:
        logits = cat_logits
        concat = torch.zeros_like(cat)

    total = concat + weights.lambda1 * cat + weights.lambda2 * ctx + weights.lambda_orth * orth
    for name, t in (("concat_loss", concat), ("cat_loss", cat), ("ctx_loss", ctx), ("orth_loss", orth)):
        _check_finite(t.detach(), name)
    return DecAugTerms(concat, cat, ctx, orth, total, logits, degenerate_orth, degenerate_aug)


def combined_loss(params: ParameterSet, example, weights: LossWeights, alpha: float) -> LossBreakdown:
    """Full per-example loss for one :class:`~decaug.datagen.LabeledExample`."""
    dtype = params.dtype
    x = torch.as_tensor(example.input, dtype=dtype).reshape(1, -1)
    y = torch.tensor([int(example.y)])
    c = torch.tensor([int(example.c)])
    terms = decaug_terms(params, x, y, c, weights, torch.tensor([float(alpha)], dtype=dtype))
    return terms.breakdown()
