"""Training loop, evaluation and run records."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import objectives
from .baselines import irmv1_penalty_from_logits, vrex_penalty
from .datagen import DatasetBundle, EnvironmentData
from .model import DTYPES, ModelConfig, ParameterSet, forward_backbone, forward_branch, init_params, predict_logits
from .model import save_checkpoint
from .objectives import LossWeights, NumericError, cross_entropy, decaug_terms

log = logging.getLogger(__name__)

TRAIN_METHODS = ("decaug", "erm", "irmv1", "vrex")
PENALTIES = ("none", "irmv1", "vrex")


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, epoch: int):
        self.term, self.epoch = term, epoch
        super().__init__(f"non-finite {term} at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``batch_size=None`` means full batch (one step per epoch). ``method``
    selects the objective: ``decaug`` trains the dual-branch network, the
    others train the plain network. ``penalty`` adds an environment penalty
    on top of a DecAug objective; the baseline methods imply their own.
    """

    lr: float = 0.1
    epochs: int = 500
    batch_size: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    method: str = "decaug"
    penalty: str = "none"
    penalty_weight: float = 0.0
    penalty_anneal_epoch: int = 100
    rescale_penalty: bool = True
    optimizer: str = "sgd"
    momentum: float = 0.0
    l2: float = 0.0
    seed: int = 0
    eval_every: int = 50
    precision: str = "single"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None for full batch")
        if self.method not in TRAIN_METHODS:
            raise ValueError(f"method must be one of {TRAIN_METHODS}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {tuple(DTYPES)}")
        if self.penalty_weight < 0 or self.l2 < 0 or self.momentum < 0:
            raise ValueError("penalty_weight, l2 and momentum must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def active_penalty(self) -> str:
        return self.method if self.method in ("irmv1", "vrex") else self.penalty

    def penalty_weight_at(self, epoch: int) -> float:
        if self.active_penalty == "none":
            return 0.0
        return self.penalty_weight if epoch >= self.penalty_anneal_epoch else 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    train_accuracy: dict[str, float] = field(default_factory=dict)
    test_accuracy: float = float("nan")
    degenerate_orth: int = 0
    degenerate_aug: int = 0
    wall_clock: float = 0.0

    @property
    def pooled_train_accuracy(self) -> float:
        return float(self.epochs[-1]["train_acc_pooled"]) if self.epochs else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def evaluate(params: ParameterSet, env: EnvironmentData, predict_with: str = "concat", batch: int = 20000) -> float:
    """Top-1 accuracy on an environment, without feature augmentation.

    Ties in the logits go to the lowest class index.
    """
    if len(env) == 0:
        raise ValueError(f"environment {env.name!r} is empty")
    calls_before = objectives.AUGMENT_CALLS
    correct = 0
    with torch.no_grad():
        for start in range(0, len(env), batch):
            x = torch.as_tensor(env.inputs[start : start + batch], dtype=params.dtype)
            if predict_with == "category" and params.config.architecture == "decaug":
                _, logits = forward_branch(params, forward_backbone(params, x), "category")
            else:
                logits = predict_logits(params, x)
            pred = np.argmax(logits.cpu().numpy(), axis=1)
            correct += int((pred == env.y[start : start + batch]).sum())
    assert objectives.AUGMENT_CALLS == calls_before, "augmentation ran at test time"
    return correct / len(env)


def _make_optimizer(tensors, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=cfg.lr)
    return torch.optim.SGD(tensors, lr=cfg.lr, momentum=cfg.momentum)


def _env_penalty(kind: str, logits, y, env, env_ids) -> tuple[torch.Tensor, list[torch.Tensor]]:
    groups = [env == e for e in env_ids]
    risks = [cross_entropy(logits[m], y[m]).mean() for m in groups]
    if kind == "irmv1":
        return irmv1_penalty_from_logits([logits[m] for m in groups], [y[m] for m in groups]), risks
    return vrex_penalty(torch.stack(risks)), risks


def _weight_norm(params: ParameterSet) -> torch.Tensor:
    return sum((t**2).sum() for name, t in params.named_tensors() if name.endswith("weight"))


def train(
    bundle: DatasetBundle,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    init: ParameterSet | None = None,
) -> tuple[ParameterSet, RunRecord]:
    """Run the training procedure on the pooled training environments.

    Every step samples a mini-batch (or takes the whole pool), evaluates the
    per-example objective, averages it, adds any environment penalty, and
    updates all parameter groups together.
    """
    if model_cfg.num_categories != bundle.num_categories or model_cfg.num_contexts != bundle.num_contexts:
        raise ValueError("model K/C do not match the bundle")
    if model_cfg.input_dim != bundle.input_dim:
        raise ValueError(f"model input_dim {model_cfg.input_dim} != bundle input dim {bundle.input_dim}")
    if (cfg.method == "decaug") != (model_cfg.architecture == "decaug"):
        raise ValueError(f"method {cfg.method!r} needs the matching architecture, got {model_cfg.architecture!r}")

    dtype = DTYPES[cfg.precision]
    t0 = time.perf_counter()
    params = init.to(dtype) if init is not None else init_params(model_cfg, dtype)
    params.requires_grad_(True)
    opt = _make_optimizer(params.tensors(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    x_np, y_np, c_np, env_np = bundle.pooled_train()
    X = torch.as_tensor(x_np, dtype=dtype)
    Y = torch.as_tensor(y_np)
    Cx = torch.as_tensor(c_np)
    E = torch.as_tensor(env_np)
    n = len(Y)
    env_ids = list(range(len(bundle.train_envs)))
    predict_with = "concat" if cfg.weights.concat_enabled or cfg.method != "decaug" else "category"

    record = RunRecord(config={"model": model_cfg.to_dict(), "train": cfg.to_dict()}, seed=cfg.seed)
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            if cfg.batch_size is None or cfg.batch_size >= n:
                batches = [None]
            else:
                perm = torch.randperm(n, generator=gen)
                batches = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
            sums = {"concat_loss": 0.0, "cat_loss": 0.0, "ctx_loss": 0.0, "orth_loss": 0.0, "total": 0.0,
                    "penalty": 0.0, "objective": 0.0}
            pw = cfg.penalty_weight_at(epoch)
            for idx in batches:
                xb, yb, cb, eb = (X, Y, Cx, E) if idx is None else (X[idx], Y[idx], Cx[idx], E[idx])
                m = len(yb)
                if cfg.method == "decaug":
                    alpha = torch.rand(m, generator=gen, dtype=dtype)
                    try:
                        terms = decaug_terms(params, xb, yb, cb, cfg.weights, alpha)
                    except NumericError as exc:
                        raise TrainingDiverged(exc.term, epoch) from exc
                    loss = terms.total.mean()
                    logits = terms.logits
                    bd = terms.breakdown()
                    record.degenerate_orth += terms.degenerate_orth
                    record.degenerate_aug += terms.degenerate_aug
                    parts = bd.to_dict()
                else:
                    logits = predict_logits(params, xb)
                    if not torch.isfinite(logits).all():
                        raise TrainingDiverged("logits", epoch)
                    ce = cross_entropy(logits, yb)
                    parts = {"concat_loss": float(ce.detach().mean()), "cat_loss": 0.0, "ctx_loss": 0.0,
                             "orth_loss": 0.0, "total": float(ce.detach().mean())}
                    loss = ce.mean()
                penalty = torch.zeros((), dtype=dtype)
                if cfg.active_penalty != "none":
                    present = [e for e in env_ids if bool((eb == e).any())]
                    penalty, risks = _env_penalty(cfg.active_penalty, logits, yb, eb, present)
                    if cfg.method in ("irmv1", "vrex"):
                        # the baselines average environment risks rather than examples
                        loss = torch.stack(risks).mean()
                    if not torch.isfinite(penalty):
                        raise TrainingDiverged("penalty", epoch)
                    loss = loss + pw * penalty
                if cfg.l2 > 0:
                    loss = loss + cfg.l2 * _weight_norm(params)
                if cfg.rescale_penalty and pw > 1.0:
                    loss = loss / pw
                if not torch.isfinite(loss):
                    raise TrainingDiverged("total", epoch)
                opt.zero_grad(set_to_none=True)
                grads = torch.autograd.grad(loss, params.tensors(), allow_unused=True)
                for t, g in zip(params.tensors(), grads):
                    t.grad = torch.zeros_like(t) if g is None else g
                opt.step()
                parts["penalty"] = float(penalty.detach())
                parts["objective"] = float(loss.detach())
                for k in sums:
                    sums[k] += parts[k] * m
            row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}, "penalty_weight": pw}
            last = epoch == cfg.epochs - 1
            if last or (epoch + 1) % cfg.eval_every == 0:
                accs = [evaluate(params, env, predict_with) for env in bundle.train_envs]
                sizes = [len(env) for env in bundle.train_envs]
                row["train_acc"] = accs
                row["train_acc_pooled"] = float(np.dot(accs, sizes) / sum(sizes))
                row["test_acc"] = evaluate(params, bundle.test_env, predict_with)
                log.info("epoch %d loss %.4f train %.4f test %.4f", epoch, row["objective"],
                         row["train_acc_pooled"], row["test_acc"])
            record.epochs.append(row)
            if metrics_fh:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_fh.flush()
            if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(params, checkpoint_path, {"epoch": epoch})
    finally:
        if metrics_fh:
            metrics_fh.close()

    final = record.epochs[-1]
    record.train_accuracy = {env.name: acc for env, acc in zip(bundle.train_envs, final["train_acc"])}
    record.test_accuracy = final["test_acc"]
    record.wall_clock = time.perf_counter() - t0
    params.requires_grad_(False)
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path, {"epoch": cfg.epochs - 1})
    return params, record


def leave_one_domain_out(
    domains: Sequence[EnvironmentData],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    num_categories: int,
) -> dict[str, float]:
    """Train on all domains but one and test on the held-out one, for each domain.

    Context labels are re-indexed to the position of each training domain.
    """
    if len(domains) < 2:
        raise ValueError("need at least two domains")
    results = {}
    for held in range(len(domains)):
        train_envs = []
        for j, d in enumerate(d for i, d in enumerate(domains) if i != held):
            train_envs.append(replace(d, c=np.full(len(d), j, dtype=np.int64)))
        test = replace(domains[held], c=np.zeros(len(domains[held]), dtype=np.int64))
        bundle = DatasetBundle(
            kind="lodo",
            train_envs=train_envs,
            test_env=test,
            num_categories=num_categories,
            num_contexts=len(train_envs),
            input_shape=(domains[0].inputs.shape[1],),
            seed=cfg.seed,
        )
        mc = replace(model_cfg, num_contexts=len(train_envs), input_dim=bundle.input_dim)
        _, rec = train(bundle, mc, cfg)
        results[domains[held].name] = rec.test_accuracy
    return results
