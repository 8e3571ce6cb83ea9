"""Experiment specifications: YAML files, presets, validation and run IDs."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from . import datagen
from .datagen import EnvironmentSpec, TwoFactorSpec
from .model import ModelConfig
from .objectives import LossWeights
from .trainer import TrainConfig

PRESETS = (
    "cmnist_decaug",
    "cmnist_erm",
    "cmnist_irmv1",
    "cmnist_vrex",
    "cmnist_grayscale_oracle",
    "twofactor_decaug",
    "twofactor_erm",
)

# Short names accepted by `sweep --axis`.
AXIS_ALIASES = {
    "lambda1": "train.weights.lambda1",
    "lambda2": "train.weights.lambda2",
    "lambda_orth": "train.weights.lambda_orth",
    "epsilon": "train.weights.epsilon",
    "concat_enabled": "train.weights.concat_enabled",
    "variant": "train.weights.variant",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "penalty_weight": "train.penalty_weight",
    "corr": "dataset.corr",
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


_CMNIST_KEYS = {"kind", "train_envs", "test_env", "source_split", "source_dir"}
_TWO_FACTOR_KEYS = {"kind"} | {f.name for f in fields(TwoFactorSpec)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"input_dim", "num_categories", "num_contexts", "seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_WEIGHT_KEYS = {f.name for f in fields(LossWeights)}
_TOP_KEYS = {"name", "dataset", "model", "train", "seeds", "sweep", "output_dir", "checkpoint_every"}


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected a mapping")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}" if where else key, "unknown key")


@dataclass
class DatasetConfig:
    kind: str = "colored_mnist"
    train_envs: tuple[EnvironmentSpec, ...] = datagen.CMNIST_DEFAULT_TRAIN
    test_env: EnvironmentSpec = datagen.CMNIST_DEFAULT_TEST
    source_split: str = "train"
    source_dir: str | None = None
    two_factor: TwoFactorSpec = field(default_factory=TwoFactorSpec)

    def to_dict(self) -> dict:
        if self.kind == "two_factor":
            d = {"kind": self.kind}
            for f in fields(TwoFactorSpec):
                v = getattr(self.two_factor, f.name)
                d[f.name] = [list(p) for p in v] if f.name == "held_out_pairs" else v
            return d
        return {
            "kind": self.kind,
            "train_envs": [_env_dict(e) for e in self.train_envs],
            "test_env": _env_dict(self.test_env),
            "source_split": self.source_split,
            "source_dir": self.source_dir,
        }


def _env_dict(e: EnvironmentSpec) -> dict:
    return {"name": e.name, "p_match": e.p_match, "size": e.size, "label_flip": e.label_flip}


@dataclass
class ExperimentSpec:
    name: str
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    sweep: dict[str, list] = field(default_factory=dict)
    output_dir: str = "out"
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "model": dict(self.model),
            "train": train,
            "seeds": list(self.seeds),
            "sweep": {k: list(v) for k, v in self.sweep.items()},
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def cell_dict(self) -> dict:
        """The science content of one run (no seeds, sweep or output location)."""
        d = self.to_dict()
        for k in ("seeds", "sweep", "output_dir", "checkpoint_every"):
            d.pop(k)
        return d

    def model_config(self, input_dim: int, num_categories: int, num_contexts: int, seed: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, num_categories=num_categories, num_contexts=num_contexts,
                           seed=seed, **self.model)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)


def _parse_env(d: Any, where: str) -> EnvironmentSpec:
    _reject_unknown(d, {"name", "p_match", "size", "label_flip"}, where)
    for req in ("name", "p_match", "size"):
        if req not in d:
            raise ConfigError(f"{where}.{req}", "missing required field")
    try:
        return EnvironmentSpec(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc


def _parse_dataset(d: Any) -> DatasetConfig:
    if d is None:
        return DatasetConfig()
    if not isinstance(d, dict):
        raise ConfigError("dataset", "expected a mapping")
    kind = d.get("kind", "colored_mnist")
    if kind == "colored_mnist":
        _reject_unknown(d, _CMNIST_KEYS, "dataset")
        out = DatasetConfig(kind=kind)
        if "train_envs" in d:
            if not isinstance(d["train_envs"], list) or not d["train_envs"]:
                raise ConfigError("dataset.train_envs", "expected a non-empty list")
            out.train_envs = tuple(_parse_env(e, f"dataset.train_envs[{i}]") for i, e in enumerate(d["train_envs"]))
        if "test_env" in d:
            out.test_env = _parse_env(d["test_env"], "dataset.test_env")
        if d.get("source_split", "train") not in ("train", "test", "all"):
            raise ConfigError("dataset.source_split", "must be train, test or all")
        out.source_split = d.get("source_split", "train")
        out.source_dir = d.get("source_dir")
        return out
    if kind == "two_factor":
        _reject_unknown(d, _TWO_FACTOR_KEYS, "dataset")
        kw = {k: v for k, v in d.items() if k != "kind"}
        if "held_out_pairs" in kw:
            kw["held_out_pairs"] = tuple(tuple(p) for p in kw["held_out_pairs"])
        try:
            return DatasetConfig(kind=kind, two_factor=TwoFactorSpec(**kw))
        except (TypeError, ValueError) as exc:
            raise ConfigError("dataset", str(exc)) from exc
    raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")


def parse_spec(raw: Any) -> ExperimentSpec:
    _reject_unknown(raw, _TOP_KEYS, "")
    if "name" not in raw:
        raise ConfigError("name", "missing required field")
    model = raw.get("model") or {}
    _reject_unknown(model, _MODEL_KEYS, "model")
    train_raw = dict(raw.get("train") or {})
    _reject_unknown(train_raw, _TRAIN_KEYS, "train")
    weights = train_raw.pop("weights", None) or {}
    _reject_unknown(weights, _WEIGHT_KEYS, "train.weights")
    try:
        lw = LossWeights(**weights)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train.weights", str(exc)) from exc
    try:
        train = TrainConfig(weights=lw, **train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc
    if "backbone_widths" in model:
        model = {**model, "backbone_widths": tuple(model["backbone_widths"])}
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of integers")
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict) or not all(isinstance(v, list) and v for v in sweep.values()):
        raise ConfigError("sweep", "expected a mapping of axis -> non-empty list")
    spec = ExperimentSpec(
        name=str(raw["name"]),
        dataset=_parse_dataset(raw.get("dataset")),
        model=dict(model),
        train=train,
        seeds=list(seeds),
        sweep={str(k): list(v) for k, v in sweep.items()},
        output_dir=str(raw.get("output_dir", "out")),
        checkpoint_every=int(raw.get("checkpoint_every", 0)),
    )
    try:
        # validate the model section against a dummy shape
        spec.model_config(input_dim=4, num_categories=2, num_contexts=2, seed=0)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from exc
    for axis in spec.sweep:
        resolve_axis(axis)
    return spec


def load_config(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_spec(yaml.safe_load(path.read_text()))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("decaug.presets").joinpath(f"{name}.yaml").read_text()


def load_preset(name: str) -> ExperimentSpec:
    return parse_spec(yaml.safe_load(preset_text(name)))


def resolve_axis(axis: str) -> str:
    path = AXIS_ALIASES.get(axis, axis)
    head = path.split(".")[0]
    if head not in ("dataset", "model", "train"):
        raise ConfigError(f"sweep.{axis}", "axis must be an alias or a dotted path under dataset/model/train")
    return path


def with_overrides(spec: ExperimentSpec, overrides: dict[str, Any]) -> ExperimentSpec:
    """Return a new spec with dotted-path overrides applied and re-validated."""
    raw = spec.to_dict()
    for key, value in overrides.items():
        parts = resolve_axis(key).split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return parse_spec(raw)


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def sweep_cells(spec: ExperimentSpec) -> list[tuple[str, ExperimentSpec]]:
    """Every grid cell as ``(label, spec)``; the grid is the product of axes."""
    if not spec.sweep:
        return [(spec.name, spec)]
    axes = list(spec.sweep.items())
    cells = []
    for combo in itertools.product(*[values for _, values in axes]):
        overrides = {name: value for (name, _), value in zip(axes, combo)}
        cell = with_overrides(replace(spec, sweep={}), overrides)
        label = spec.name + "[" + ",".join(f"{k}={v}" for k, v in overrides.items()) + "]"
        cells.append((label, cell))
    return cells


def config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(spec.cell_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_id(spec: ExperimentSpec, seed: int) -> str:
    return f"{spec.name}-{config_hash(spec)}-s{seed}"
