"""ERM, IRMv1 and V-REx objectives on the plain (single-head) network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .model import ParameterSet, predict_logits
from .objectives import cross_entropy

METHODS = ("erm", "irmv1", "vrex")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "erm"
    penalty_weight: float = 0.0
    penalty_anneal_epoch: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.penalty_weight >= 0:
            raise ValueError("penalty_weight must be >= 0")

    def weight_at(self, epoch: int) -> float:
        """Penalty weight in effect at ``epoch``: 1 before the anneal epoch."""
        return self.penalty_weight if epoch >= self.penalty_anneal_epoch else 1.0


def erm_loss(params: ParameterSet, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if len(y) == 0:
        raise ValueError("empty batch")
    return cross_entropy(predict_logits(params, x), y).mean()


def dummy_scale_penalty(risk: Callable[[torch.Tensor], torch.Tensor], dtype=torch.float64) -> torch.Tensor:
    """Squared derivative of ``risk(w)`` at ``w = 1``, kept differentiable."""
    w = torch.ones((), dtype=dtype, requires_grad=True)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(risk(w), w, create_graph=True)
    return g.pow(2)


def irmv1_penalty_from_logits(logits: Sequence[torch.Tensor], labels: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over environments of the squared dummy-scale gradient of the mean risk."""
    if len(logits) == 0:
        raise ValueError("need at least one environment")
    total = 0
    for lg, lb in zip(logits, labels):
        total = total + dummy_scale_penalty(lambda w, lg=lg, lb=lb: cross_entropy(lg * w, lb).mean(), lg.dtype)
    return total


def irmv1_penalty(params: ParameterSet, env_batches: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    logits = [predict_logits(params, x) for x, _ in env_batches]
    return irmv1_penalty_from_logits(logits, [y for _, y in env_batches])


def vrex_penalty(env_risks) -> torch.Tensor:
    """Population variance of per-environment risks (0 for one environment)."""
    if torch.is_tensor(env_risks):
        risks = env_risks
    elif all(torch.is_tensor(r) for r in env_risks):
        risks = torch.stack(list(env_risks))
    else:
        risks = torch.tensor([float(r) for r in env_risks], dtype=torch.float64)
    if risks.numel() == 0:
        raise ValueError("need at least one risk")
    return ((risks - risks.mean()) ** 2).mean()
