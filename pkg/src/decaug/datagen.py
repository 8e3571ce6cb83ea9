"""Synthetic distribution-shift benchmarks.

Two generators live here:

* Colored MNIST: binary digit labels with 25% label noise and a color channel
  that agrees with the (noisy) label at an environment-specific rate.
* A two-factor dataset whose inputs concatenate a category block and a
  context block, used for fast property tests and the diversity-shift check.

Both produce a :class:`DatasetBundle`. Bundles serialize to a directory (see
:func:`save_bundle`) with a small self-describing binary array format.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IMAGE_SIDE = 14
NUM_COLORS = 2


class DataError(ValueError):
    pass


class CapacityError(DataError):
    """Not enough source digits for the requested environment sizes."""


class EmptyTrainError(DataError):
    """Every (category, context) pair was held out of training."""


@dataclass(frozen=True)
class LabeledExample:
    input: np.ndarray
    y: int
    c: int

    def validate(self, num_categories: int, num_contexts: int, image: bool = True) -> None:
        if not np.all(np.isfinite(self.input)):
            raise DataError("non-finite input")
        if image and (self.input.min() < 0 or self.input.max() > 1):
            raise DataError("image values outside [0, 1]")
        if not 0 <= self.y < num_categories:
            raise DataError(f"category label {self.y} outside [0, {num_categories})")
        if not 0 <= self.c < num_contexts:
            raise DataError(f"context label {self.c} outside [0, {num_contexts})")


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    p_match: float
    size: int
    label_flip: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p_match <= 1.0:
            raise DataError(f"{self.name}: p_match={self.p_match} outside [0, 1]")
        if not 0.0 <= self.label_flip <= 1.0:
            raise DataError(f"{self.name}: label_flip={self.label_flip} outside [0, 1]")
        if int(self.size) < 1:
            raise DataError(f"{self.name}: size must be >= 1")


@dataclass
class EnvironmentData:
    """Arrays for one environment. Row ``i`` of each array is one example."""

    name: str
    inputs: np.ndarray  # (N, D) float32
    y: np.ndarray  # (N,) int64
    c: np.ndarray  # (N,) int64
    source_index: np.ndarray  # (N,) int64, row in the source corpus (-1 if synthetic)
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.inputs[i], int(self.y[i]), int(self.c[i]))

    def examples(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self.example(i)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"inputs": self.inputs, "y": self.y, "c": self.c, "source_index": self.source_index}


@dataclass
class DatasetBundle:
    kind: str
    train_envs: list[EnvironmentData]
    test_env: EnvironmentData
    num_categories: int
    num_contexts: int
    input_shape: tuple[int, ...]
    seed: int
    spec: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def environments(self) -> list[EnvironmentData]:
        return [*self.train_envs, self.test_env]

    def pooled_train(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate training environments: ``(inputs, y, c, env_index)``."""
        inputs = np.concatenate([e.inputs for e in self.train_envs])
        y = np.concatenate([e.y for e in self.train_envs])
        c = np.concatenate([e.c for e in self.train_envs])
        env = np.concatenate([np.full(len(e), i, dtype=np.int64) for i, e in enumerate(self.train_envs)])
        return inputs, y, c, env


# ---------------------------------------------------------------------------
# Colored MNIST


def binarize_digit(digit: int) -> int:
    if not 0 <= int(digit) <= 9 or int(digit) != digit:
        raise DataError(f"digit must be an integer in 0..9, got {digit!r}")
    return 0 if digit <= 4 else 1


def _env_rng(seed: int, *key: int) -> np.random.Generator:
    # Independent child stream per (purpose, environment): adding an
    # environment leaves the draws of the others untouched.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def downsample(images: np.ndarray) -> np.ndarray:
    """28x28 -> 14x14 by taking every other pixel."""
    return images[:, ::2, ::2]


def _color_environment(
    images: np.ndarray, digits: np.ndarray, spec: EnvironmentSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(digits)
    y = (digits >= 5).astype(np.int64)
    flip = rng.random(n) < spec.label_flip
    y = np.where(flip, 1 - y, y)
    match = rng.random(n) < spec.p_match
    color = np.where(match, y, 1 - y)
    small = downsample(images).astype(np.float32) / np.float32(255.0)
    out = np.zeros((n, NUM_COLORS, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    out[np.arange(n), color] = small
    return out.reshape(n, -1), y, color


CMNIST_DEFAULT_TRAIN = (
    EnvironmentSpec("train_0.8", p_match=0.8, size=25000),
    EnvironmentSpec("train_0.9", p_match=0.9, size=25000),
)
CMNIST_DEFAULT_TEST = EnvironmentSpec("test_0.1", p_match=0.1, size=10000)


def build_colored_mnist(
    images: np.ndarray,
    digits: np.ndarray,
    specs: Sequence[EnvironmentSpec] = CMNIST_DEFAULT_TRAIN,
    test_spec: EnvironmentSpec = CMNIST_DEFAULT_TEST,
    seed: int = 0,
) -> DatasetBundle:
    """Build Colored MNIST environments from a grayscale digit corpus.

    ``images`` is (N, 28, 28) uint8 and ``digits`` the matching 0..9 labels.
    Environments are disjoint slices of one seeded permutation of the corpus.
    The context label of every example is the index of its environment
    (training environments first, the test environment last).
    """
    images = np.asarray(images)
    digits = np.asarray(digits).astype(np.int64)
    if len(images) == 0:
        raise DataError("empty source corpus")
    if images.shape[1:] != (28, 28) or len(images) != len(digits):
        raise DataError(f"expected (N, 28, 28) images with N labels, got {images.shape}")
    if digits.min() < 0 or digits.max() > 9:
        raise DataError("source digits must be in 0..9")
    all_specs = [*specs, test_spec]
    total = sum(s.size for s in all_specs)
    if total > len(images):
        raise CapacityError(f"requested {total} examples but the source has {len(images)}")

    order = _env_rng(seed, 0).permutation(len(images))
    envs = []
    start = 0
    for i, spec in enumerate(all_specs):
        idx = np.sort(order[start : start + spec.size])
        start += spec.size
        x, y, _ = _color_environment(images[idx], digits[idx], spec, _env_rng(seed, 1, i))
        envs.append(
            EnvironmentData(
                name=spec.name,
                inputs=x,
                y=y,
                c=np.full(spec.size, i, dtype=np.int64),
                source_index=idx.astype(np.int64),
                spec=asdict(spec),
            )
        )
    return DatasetBundle(
        kind="colored_mnist",
        train_envs=envs[:-1],
        test_env=envs[-1],
        num_categories=2,
        num_contexts=len(all_specs),
        input_shape=(NUM_COLORS, IMAGE_SIDE, IMAGE_SIDE),
        seed=seed,
        spec={"train": [asdict(s) for s in specs], "test": asdict(test_spec)},
    )


def color_of(inputs: np.ndarray) -> np.ndarray:
    """Index of the nonzero color channel per flattened Colored MNIST image."""
    per_channel = np.abs(inputs.reshape(len(inputs), NUM_COLORS, -1)).sum(axis=2)
    return per_channel.argmax(axis=1)


# ---------------------------------------------------------------------------
# Two-factor surrogate


@dataclass(frozen=True)
class TwoFactorSpec:
    """Category/context dataset with correlation and diversity shift.

    The context aligned with category ``y`` is context ``y``. In training a
    label's context is the aligned one with probability ``corr``; otherwise it
    is drawn uniformly from the label's other non-held-out contexts. The test
    split holds only ``held_out_pairs`` (or, when that set is empty, an IID
    sample of the training distribution).

    The category block is generated from the clean category; the observed
    label can be corrupted with probability ``label_noise`` (off by default).
    """

    d_cat: int = 8
    d_ctx: int = 8
    corr: float = 0.9
    held_out_pairs: tuple[tuple[int, int], ...] = ((0, 1), (1, 0))
    num_categories: int = 2
    num_contexts: int = 4
    n_train: int = 10000
    n_test: int = 2000
    label_noise: float = 0.0
    noise: float = 0.1

    def __post_init__(self):
        if self.d_cat < 1 or self.d_ctx < 1:
            raise DataError("d_cat and d_ctx must be >= 1")
        if not 0.0 <= self.corr <= 1.0:
            raise DataError("corr must be in [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise DataError("label_noise must be in [0, 1)")
        if self.num_categories < 2 or self.num_contexts < self.num_categories:
            raise DataError("need num_categories >= 2 and num_contexts >= num_categories")
        pairs = tuple(sorted((int(a), int(b)) for a, b in self.held_out_pairs))
        for y, c in pairs:
            if not (0 <= y < self.num_categories and 0 <= c < self.num_contexts):
                raise DataError(f"held-out pair {(y, c)} out of range")
        object.__setattr__(self, "held_out_pairs", pairs)

    def allowed_contexts(self, y: int) -> list[int]:
        held = set(self.held_out_pairs)
        return [c for c in range(self.num_contexts) if (y, c) not in held]


def _prototypes(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    # Unit vectors; when dim >= count they are made exactly orthonormal.
    raw = rng.standard_normal((max(count, dim), dim))
    if dim >= count:
        q, _ = np.linalg.qr(raw[:dim].T)
        return q.T[:count]
    return raw[:count] / np.linalg.norm(raw[:count], axis=1, keepdims=True)


def _flip_labels(y: np.ndarray, k: int, p: float, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(y)) < p
    other = (y + rng.integers(1, k, size=len(y))) % k
    return np.where(flip, other, y)


def build_two_factor(spec: TwoFactorSpec, seed: int = 0) -> DatasetBundle:
    k, n_ctx = spec.num_categories, spec.num_contexts
    allowed = {y: spec.allowed_contexts(y) for y in range(k)}
    if all(not v for v in allowed.values()):
        raise EmptyTrainError("held_out_pairs cover every (category, context) combination")
    for y, ctxs in allowed.items():
        if not ctxs:
            raise EmptyTrainError(f"category {y} has no training context")
        others = [c for c in ctxs if c != y]
        if y in ctxs and spec.corr < 1.0 and not others:
            raise DataError(f"category {y} has no non-aligned training context for corr < 1")

    proto_rng = _env_rng(seed, 2)
    cat_proto = _prototypes(proto_rng, k, spec.d_cat)
    ctx_proto = _prototypes(proto_rng, n_ctx, spec.d_ctx)

    def render(y_clean, c, rng):
        n = len(c)
        cat = cat_proto[y_clean] + spec.noise * rng.standard_normal((n, spec.d_cat))
        ctx = ctx_proto[c] + spec.noise * rng.standard_normal((n, spec.d_ctx))
        return np.concatenate([cat, ctx], axis=1).astype(np.float32)

    # train: clean category -> noisy label -> context correlated with noisy label
    rng = _env_rng(seed, 3, 0)
    y_clean = rng.integers(0, k, size=spec.n_train)
    y = _flip_labels(y_clean, k, spec.label_noise, rng)
    c = np.empty(spec.n_train, dtype=np.int64)
    u = rng.random(spec.n_train)
    for label in range(k):
        rows = np.flatnonzero(y == label)
        ctxs = allowed[label]
        others = [x for x in ctxs if x != label]
        pick_other = rng.integers(0, max(len(others), 1), size=len(rows))
        pick_any = rng.integers(0, len(ctxs), size=len(rows))
        if label in ctxs:
            aligned = u[rows] < spec.corr
            alt = np.asarray(others, dtype=np.int64)[pick_other] if others else np.full(len(rows), label)
            c[rows] = np.where(aligned, label, alt)
        else:
            c[rows] = np.asarray(ctxs, dtype=np.int64)[pick_any]
    train = EnvironmentData(
        "train", render(y_clean, c, rng), y.astype(np.int64), c, np.full(spec.n_train, -1, dtype=np.int64)
    )

    rng = _env_rng(seed, 3, 1)
    if spec.held_out_pairs:
        pairs = np.asarray(spec.held_out_pairs, dtype=np.int64)
        pick = rng.integers(0, len(pairs), size=spec.n_test)
        y_t, c_t = pairs[pick, 0], pairs[pick, 1]
        # the observed label is the noisy one; recover a clean category with the same noise model
        y_clean_t = _flip_labels(y_t, k, spec.label_noise, rng)
    else:
        y_clean_t = rng.integers(0, k, size=spec.n_test)
        y_t = _flip_labels(y_clean_t, k, spec.label_noise, rng)
        c_t = np.empty(spec.n_test, dtype=np.int64)
        u = rng.random(spec.n_test)
        for label in range(k):
            rows = np.flatnonzero(y_t == label)
            others = [x for x in range(n_ctx) if x != label]
            alt = np.asarray(others, dtype=np.int64)[rng.integers(0, len(others), size=len(rows))]
            c_t[rows] = np.where(u[rows] < spec.corr, label, alt)
    test = EnvironmentData(
        "test", render(y_clean_t, c_t, rng), y_t.astype(np.int64), c_t.astype(np.int64),
        np.full(spec.n_test, -1, dtype=np.int64),
    )
    spec_dict = asdict(spec)
    spec_dict["held_out_pairs"] = [list(p) for p in spec.held_out_pairs]
    train.spec = test.spec = spec_dict
    return DatasetBundle(
        kind="two_factor",
        train_envs=[train],
        test_env=test,
        num_categories=k,
        num_contexts=n_ctx,
        input_shape=(spec.d_cat + spec.d_ctx,),
        seed=seed,
        spec=spec_dict,
    )


def combinations(env: EnvironmentData) -> set[tuple[int, int]]:
    return set(zip(env.y.tolist(), env.c.tolist()))


# ---------------------------------------------------------------------------
# Serialization
#
# Array file layout (all integers little-endian):
#   magic      8 bytes  b"DCAGARR\0"
#   version    uint16   (currently 1)
#   n_arrays   uint16
#   then per array:
#     name_len uint16, name utf-8 bytes
#     dtype    uint8    (see DTYPE_CODES)
#     ndim     uint8
#     shape    ndim x uint64
#     payload  C-order little-endian bytes

MAGIC = b"DCAGARR\0"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1"), 5: np.dtype("<i4")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
            code = _CODE_OF.get(np.dtype(dt))
            if code is None:
                raise DataError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: bad magic")
    version, count = struct.unpack_from("<HH", data, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dt = DTYPE_CODES.get(code)
        if dt is None:
            raise DataError(f"{path}: unknown dtype code {code}")
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes")
    return out


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    envs = []
    for i, env in enumerate(bundle.environments):
        role = "test" if i == len(bundle.train_envs) else "train"
        fname = f"env{i}.bin"
        write_arrays(directory / fname, env.arrays())
        envs.append({"file": fname, "name": env.name, "role": role, "spec": env.spec})
    meta = {
        "kind": bundle.kind,
        "num_categories": bundle.num_categories,
        "num_contexts": bundle.num_contexts,
        "input_shape": list(bundle.input_shape),
        "seed": bundle.seed,
        "spec": bundle.spec,
        "environments": envs,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    envs = []
    for entry in meta["environments"]:
        arrays = read_arrays(directory / entry["file"])
        envs.append((entry["role"], EnvironmentData(name=entry["name"], spec=entry["spec"], **arrays)))
    train = [e for role, e in envs if role == "train"]
    test = [e for role, e in envs if role == "test"]
    if len(test) != 1:
        raise DataError("bundle must contain exactly one test environment")
    return DatasetBundle(
        kind=meta["kind"],
        train_envs=train,
        test_env=test[0],
        num_categories=meta["num_categories"],
        num_contexts=meta["num_contexts"],
        input_shape=tuple(meta["input_shape"]),
        seed=meta["seed"],
        spec=meta["spec"],
    )


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    if (a.kind, a.num_categories, a.num_contexts, tuple(a.input_shape), a.seed) != (
        b.kind, b.num_categories, b.num_contexts, tuple(b.input_shape), b.seed
    ):
        return False
    if len(a.environments) != len(b.environments):
        return False
    for ea, eb in zip(a.environments, b.environments):
        for (ka, va), (kb, vb) in zip(ea.arrays().items(), eb.arrays().items()):
            if ka != kb or va.dtype != vb.dtype or va.shape != vb.shape or va.tobytes() != vb.tobytes():
                return False
    return True


def all_pairs(num_categories: int, num_contexts: int) -> list[tuple[int, int]]:
    return list(itertools.product(range(num_categories), range(num_contexts)))
