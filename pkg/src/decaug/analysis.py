"""Saliency maps, orthogonality diagnostics and result aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import ParameterSet, forward_backbone, forward_branch
from .objectives import TAU_G, cross_entropy, grad_wrt_features, orth_loss


@dataclass
class SaliencyMap:
    values: np.ndarray
    branch: str

    def __post_init__(self):
        if self.branch not in ("category", "context"):
            raise ValueError(f"branch must be 'category' or 'context', got {self.branch!r}")


def branch_logits(params: ParameterSet, x: torch.Tensor, branch: str) -> torch.Tensor:
    return forward_branch(params, forward_backbone(params, x), branch)[1]


def saliency(params: ParameterSet, x, label, branch: str) -> SaliencyMap:
    """Absolute gradient of the branch cross-entropy w.r.t. the input.

    ``x`` may be one input or a batch; ``label`` matches it.
    """
    xt = torch.as_tensor(np.asarray(x), dtype=params.dtype)
    with torch.enable_grad():
        leaf = xt.detach().clone().requires_grad_(True)
        loss = cross_entropy(branch_logits(params, leaf, branch), label).sum()
        (g,) = torch.autograd.grad(loss, leaf)
    return SaliencyMap(g.abs().detach().cpu().numpy(), branch)


@dataclass
class OrthDiagnostic:
    mean: float
    n_used: int
    n_degenerate: int


def orth_diagnostic(params: ParameterSet, x, y, c, batch: int = 10000) -> OrthDiagnostic:
    """Mean squared cosine between the two branches' feature gradients.

    Examples where either gradient norm falls below the tolerance are counted
    and left out of the mean.
    """
    x = torch.as_tensor(np.asarray(x), dtype=params.dtype)
    y = torch.as_tensor(np.asarray(y))
    c = torch.as_tensor(np.asarray(c))
    if len(y) == 0:
        raise ValueError("empty batch")
    total, used, degenerate = 0.0, 0, 0
    for s in range(0, len(y), batch):
        with torch.no_grad():
            z = forward_backbone(params, x[s : s + batch])
        g1 = grad_wrt_features(params, z, y[s : s + batch], "category", create_graph=False)
        g2 = grad_wrt_features(params, z, c[s : s + batch], "context", create_graph=False)
        ok = (torch.linalg.vector_norm(g1, dim=1) >= TAU_G) & (torch.linalg.vector_norm(g2, dim=1) >= TAU_G)
        vals = orth_loss(g1, g2)[ok]
        total += float(vals.double().sum())
        used += int(ok.sum())
        degenerate += int((~ok).sum())
    return OrthDiagnostic(total / used if used else float("nan"), used, degenerate)


@dataclass
class AggregateResult:
    method: str
    values: list[float]
    mean: float
    std: float
    single: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.values)


def aggregate(records_or_values: Sequence, method: str = "") -> AggregateResult:
    """Mean and unbiased standard deviation of final test accuracies.

    A single record yields ``std = 0`` with ``single`` set.
    """
    values = [float(getattr(r, "test_accuracy", r)) for r in records_or_values]
    if not values:
        raise ValueError("need at least one record")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return AggregateResult(method, values, mean, 0.0, single=True)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return AggregateResult(method, values, mean, math.sqrt(var))


CSV_COLUMNS = ("method", "mean", "std", "n_seeds")


def write_summary_csv(results: Iterable[AggregateResult], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([r.method, f"{r.mean:.6f}", f"{r.std:.6f}", r.n])
    return path


def render_table(results: Iterable[AggregateResult], title: str = "Acc test env") -> str:
    """Aligned text table with accuracies in percent, ``mean ± std``."""
    rows = [(r.method, f"{100 * r.mean:.2f} ± {100 * r.std:.2f}" + (" (n=1)" if r.single else "")) for r in results]
    width = max([len("Model")] + [len(m) for m, _ in rows])
    lines = [f"{'Model'.ljust(width)}  {title}", f"{'-' * width}  {'-' * max(len(title), 14)}"]
    lines += [f"{m.ljust(width)}  {v}" for m, v in rows]
    return "\n".join(lines) + "\n"


def _to_unit_image(arr: np.ndarray) -> np.ndarray:
    peak = float(arr.max()) if arr.size else 0.0
    return arr / peak if peak > 0 else np.zeros_like(arr)


def _rgb_tiles(batch: np.ndarray, image_shape: tuple[int, ...]) -> list[np.ndarray]:
    tiles = []
    for row in batch:
        img = row.reshape(image_shape)
        if len(image_shape) == 3:
            # channel 0 -> red, channel 1 -> green
            rgb = np.zeros((*image_shape[1:], 3))
            for ch in range(min(image_shape[0], 3)):
                rgb[..., ch] = img[ch]
        else:
            side = int(round(math.sqrt(img.size)))
            flat = img.reshape(side, -1) if side * side == img.size else img.reshape(1, -1)
            rgb = np.repeat(flat[..., None], 3, axis=-1)
        tiles.append(rgb)
    return tiles


def _gray_tiles(maps: np.ndarray, image_shape: tuple[int, ...]) -> list[np.ndarray]:
    tiles = []
    for row in maps:
        m = row.reshape(image_shape)
        if len(image_shape) == 3:
            m = m.max(axis=0)
        else:
            side = int(round(math.sqrt(m.size)))
            m = m.reshape(side, -1) if side * side == m.size else m.reshape(1, -1)
        tiles.append(np.repeat(_to_unit_image(m)[..., None], 3, axis=-1))
    return tiles


def saliency_grid(
    inputs: np.ndarray, category: SaliencyMap, context: SaliencyMap, image_shape: tuple[int, ...], scale: int = 4
) -> np.ndarray:
    """uint8 RGB grid: inputs on the top row, category then context saliency below.

    Each saliency tile is max-normalized on its own.
    """
    rows = [_rgb_tiles(inputs, image_shape), _gray_tiles(category.values, image_shape),
            _gray_tiles(context.values, image_shape)]
    pad = 1
    th, tw = rows[0][0].shape[:2]
    cols = len(rows[0])
    grid = np.ones(((th + pad) * 3 + pad, (tw + pad) * cols + pad, 3))
    for r, tiles in enumerate(rows):
        for j, tile in enumerate(tiles):
            y0, x0 = pad + r * (th + pad), pad + j * (tw + pad)
            grid[y0 : y0 + th, x0 : x0 + tw] = np.clip(tile, 0, 1)
    grid = np.kron(grid, np.ones((scale, scale, 1)))
    return (grid * 255).round().astype(np.uint8)


def save_saliency_grid(path: str | Path, *args, **kwargs) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(saliency_grid(*args, **kwargs), mode="RGB").save(path, format="PNG")
    return path
