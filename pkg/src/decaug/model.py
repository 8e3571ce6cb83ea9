"""Dual-branch network with explicit parameter groups.

The network is written functionally: a :class:`ParameterSet` holds six named
groups of tensors and the forward functions read from it. That keeps the
groups disjoint by construction and makes higher-order autograd through the
branches straightforward.

    x --g(theta)--> z --f(theta1)--> z1 --h(phi1)--> category logits
                      \\-f(theta2)--> z2 --h(phi2)--> context logits
    [z1, z2~] --h(phi)--> final logits

A ``plain`` architecture (backbone + ``phi`` on ``z``) backs the ERM, IRMv1
and V-REx baselines; its branch groups are empty.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

GROUPS = ("theta", "theta1", "phi1", "theta2", "phi2", "phi")
ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "elu": F.elu,
    "softplus": F.softplus,
    "identity": lambda t: t,
}
INIT_SCHEMES = ("fan_in_uniform", "xavier_uniform", "zeros")
DTYPES = {"double": torch.float64, "single": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    """Network shape.

    The backbone maps ``input_dim -> backbone_widths... -> feature_dim`` with
    the activation after every layer, so the default is two layers of 256.
    """

    input_dim: int
    num_categories: int
    num_contexts: int
    backbone_widths: tuple[int, ...] = (256,)
    feature_dim: int = 256
    branch_dim: int = 128
    nonlinearity: str = "relu"
    branch_activation: bool = True
    init_scheme: str = "fan_in_uniform"
    architecture: str = "decaug"
    grayscale: bool = False
    channels: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        dims = [self.input_dim, self.feature_dim, self.branch_dim, self.num_categories, self.num_contexts]
        if any(int(d) < 1 for d in [*dims, *self.backbone_widths]):
            raise ValueError("all model dimensions must be >= 1")
        if self.nonlinearity not in ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")
        if self.architecture not in ("decaug", "plain"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.grayscale and self.input_dim % self.channels:
            raise ValueError("grayscale needs input_dim divisible by channels")

    @property
    def first_layer_dim(self) -> int:
        return self.input_dim // self.channels if self.grayscale else self.input_dim

    @property
    def concat_dim(self) -> int:
        return 2 * self.branch_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def layer_shapes(cfg: ModelConfig) -> dict[str, list[tuple[str, int, int]]]:
    """``group -> [(prefix, fan_in, fan_out)]`` for every affine layer."""
    dims = [cfg.first_layer_dim, *cfg.backbone_widths, cfg.feature_dim]
    shapes = {g: [] for g in GROUPS}
    shapes["theta"] = [(f"layer{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
    if cfg.architecture == "plain":
        shapes["phi"] = [("out", cfg.feature_dim, cfg.num_categories)]
        return shapes
    shapes["theta1"] = [("proj", cfg.feature_dim, cfg.branch_dim)]
    shapes["phi1"] = [("out", cfg.branch_dim, cfg.num_categories)]
    shapes["theta2"] = [("proj", cfg.feature_dim, cfg.branch_dim)]
    shapes["phi2"] = [("out", cfg.branch_dim, cfg.num_contexts)]
    shapes["phi"] = [("out", cfg.concat_dim, cfg.num_categories)]
    return shapes


@dataclass
class ParameterSet:
    config: ModelConfig
    theta: dict[str, torch.Tensor] = field(default_factory=dict)
    theta1: dict[str, torch.Tensor] = field(default_factory=dict)
    phi1: dict[str, torch.Tensor] = field(default_factory=dict)
    theta2: dict[str, torch.Tensor] = field(default_factory=dict)
    phi2: dict[str, torch.Tensor] = field(default_factory=dict)
    phi: dict[str, torch.Tensor] = field(default_factory=dict)

    def group(self, name: str) -> dict[str, torch.Tensor]:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def named_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        for g in GROUPS:
            for k, t in self.group(g).items():
                yield f"{g}.{k}", t

    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.named_tensors()]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors())

    @property
    def dtype(self) -> torch.dtype:
        return self.theta["layer0.weight"].dtype

    def map(self, fn) -> "ParameterSet":
        return ParameterSet(self.config, **{g: {k: fn(t) for k, t in self.group(g).items()} for g in GROUPS})

    def clone(self) -> "ParameterSet":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        return self.map(lambda t: t.detach().to(dtype))

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self


def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float64) -> ParameterSet:
    """Seeded initialization; draws happen in a fixed group/layer order."""
    gen = torch.Generator().manual_seed(cfg.seed)
    params = ParameterSet(cfg)
    for g, layers in layer_shapes(cfg).items():
        for prefix, fan_in, fan_out in layers:
            if cfg.init_scheme == "zeros":
                w = torch.zeros(fan_out, fan_in, dtype=torch.float64)
                b = torch.zeros(fan_out, dtype=torch.float64)
            elif cfg.init_scheme == "xavier_uniform":
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                w = (torch.rand(fan_out, fan_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                b = torch.zeros(fan_out, dtype=torch.float64)
            else:
                bound = fan_in**-0.5
                w = (torch.rand(fan_out, fan_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                b = (torch.rand(fan_out, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            params.group(g)[f"{prefix}.weight"] = w.to(dtype)
            params.group(g)[f"{prefix}.bias"] = b.to(dtype)
    return params


def _check_last_dim(t: torch.Tensor, n: int, what: str) -> None:
    if t.ndim not in (1, 2) or t.shape[-1] != n:
        raise ValueError(f"{what}: expected trailing dimension {n}, got shape {tuple(t.shape)}")


def _affine(t: torch.Tensor, group: dict[str, torch.Tensor], prefix: str) -> torch.Tensor:
    return F.linear(t, group[f"{prefix}.weight"], group[f"{prefix}.bias"])


def forward_backbone(params: ParameterSet, x: torch.Tensor) -> torch.Tensor:
    cfg = params.config
    _check_last_dim(x, cfg.input_dim, "backbone input")
    act = ACTIVATIONS[cfg.nonlinearity]
    h = x
    if cfg.grayscale:
        h = h.reshape(*h.shape[:-1], cfg.channels, cfg.first_layer_dim).sum(dim=-2)
    for i in range(len(cfg.backbone_widths) + 1):
        h = act(_affine(h, params.theta, f"layer{i}"))
    return h


def forward_branch(params: ParameterSet, z: torch.Tensor, which: str) -> tuple[torch.Tensor, torch.Tensor]:
    """``(branch features, logits)`` for ``which`` in {"category", "context"}."""
    cfg = params.config
    if cfg.architecture != "decaug":
        raise ValueError("plain models have no branches")
    if which == "category":
        extractor, classifier = params.theta1, params.phi1
    elif which == "context":
        extractor, classifier = params.theta2, params.phi2
    else:
        raise ValueError(f"which must be 'category' or 'context', got {which!r}")
    _check_last_dim(z, cfg.feature_dim, "branch input")
    feats = _affine(z, extractor, "proj")
    if cfg.branch_activation:
        feats = ACTIVATIONS[cfg.nonlinearity](feats)
    return feats, _affine(feats, classifier, "out")


def branch_classifier(params: ParameterSet, feats: torch.Tensor, which: str) -> torch.Tensor:
    """Apply only the classifier of a branch to precomputed branch features."""
    _check_last_dim(feats, params.config.branch_dim, "branch features")
    return _affine(feats, params.phi1 if which == "category" else params.phi2, "out")


def forward_concat(params: ParameterSet, z1: torch.Tensor, z2_aug: torch.Tensor) -> torch.Tensor:
    cfg = params.config
    _check_last_dim(z1, cfg.branch_dim, "category features")
    _check_last_dim(z2_aug, cfg.branch_dim, "context features")
    return _affine(torch.cat([z1, z2_aug], dim=-1), params.phi, "out")


def forward_plain(params: ParameterSet, z: torch.Tensor) -> torch.Tensor:
    _check_last_dim(z, params.config.feature_dim, "head input")
    return _affine(z, params.phi, "out")


def predict_logits(params: ParameterSet, x: torch.Tensor) -> torch.Tensor:
    """Inference path. DecAug models concatenate the unaugmented features."""
    z = forward_backbone(params, x)
    if params.config.architecture == "plain":
        return forward_plain(params, z)
    z1, _ = forward_branch(params, z, "category")
    z2, _ = forward_branch(params, z, "context")
    return forward_concat(params, z1, z2)


# ---------------------------------------------------------------------------
# Checkpoints: a zip archive holding config.json and one .npy per tensor,
# stored as "<group>/<name>.npy". Entries use a fixed timestamp and order so
# identical parameters give identical bytes.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ParameterSet, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        meta = {"config": params.config.to_dict(), "dtype": str(params.dtype).replace("torch.", "")}
        if extra:
            meta["extra"] = extra
        zf.writestr(zipfile.ZipInfo("config.json", _ZIP_DATE), json.dumps(meta, sort_keys=True, indent=1))
        for name, t in params.named_tensors():
            group, key = name.split(".", 1)
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, t.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{group}/{key}.npy", _ZIP_DATE), arr_buf.getvalue())
    return buf.getvalue()


def save_checkpoint(params: ParameterSet, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params, extra))
    return path


def load_checkpoint(path: str | Path) -> ParameterSet:
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        if "config.json" not in names:
            raise CheckpointError("checkpoint has no config.json")
        meta = json.loads(zf.read("config.json"))
        cfg = ModelConfig.from_dict(meta["config"])
        expected = {g: {} for g in GROUPS}
        for g, layers in layer_shapes(cfg).items():
            for prefix, fan_in, fan_out in layers:
                expected[g][f"{prefix}.weight"] = (fan_out, fan_in)
                expected[g][f"{prefix}.bias"] = (fan_out,)
        params = ParameterSet(cfg)
        seen = set()
        for entry in names:
            if entry == "config.json":
                continue
            group, _, rest = entry.partition("/")
            if group not in GROUPS or not rest.endswith(".npy"):
                raise CheckpointError(f"unexpected entry {entry!r}")
            key = rest[: -len(".npy")]
            if key not in expected[group]:
                raise CheckpointError(f"unknown tensor {group}.{key}")
            arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
            if tuple(arr.shape) != expected[group][key]:
                raise CheckpointError(f"{group}.{key}: shape {arr.shape} != {expected[group][key]}")
            params.group(group)[key] = torch.from_numpy(arr.copy())
            seen.add((group, key))
        missing = {(g, k) for g in GROUPS for k in expected[g]} - seen
        if missing:
            raise CheckpointError(f"missing tensors: {sorted(missing)}")
    return params
