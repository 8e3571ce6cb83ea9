"""Reading and fetching the raw MNIST digit corpus (IDX format)."""
from __future__ import annotations

import gzip
import hashlib
import io
import logging
import os
import tarfile
import urllib.request
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# The npm package `mnist-data` ships the four uncompressed IDX files; the npm
# registry is often reachable where the classic mirrors are not.
NPM_TARBALL_URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"

FILES = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class MNISTUnavailable(RuntimeError):
    pass


def default_root() -> Path:
    return Path.home() / ".cache" / "decaug" / "mnist"


def read_idx(data: bytes) -> np.ndarray:
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError("not an IDX file")
    dtype = _IDX_DTYPES.get(data[2])
    if dtype is None:
        raise ValueError(f"unknown IDX dtype code {data[2]:#x}")
    ndim = data[3]
    shape = tuple(int(s) for s in np.frombuffer(data, ">u4", count=ndim, offset=4))
    arr = np.frombuffer(data, dtype, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"IDX payload has {arr.size} items, header says {shape}")
    return arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def fetch(root: str | os.PathLike | None = None, url: str = NPM_TARBALL_URL) -> Path:
    """Download the IDX files into ``root`` and verify their checksums."""
    root = Path(root) if root is not None else default_root()
    root.mkdir(parents=True, exist_ok=True)
    log.info("downloading MNIST from %s", url)
    with urllib.request.urlopen(url, timeout=120) as resp:
        blob = resp.read()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = Path(member.name).name
            if name in FILES:
                fh = tar.extractfile(member)
                assert fh is not None
                (root / name).write_bytes(fh.read())
    for name, digest in FILES.items():
        path = root / name
        if not path.exists():
            raise MNISTUnavailable(f"{name} missing from {url}")
        if _sha256(path) != digest:
            path.unlink()
            raise MNISTUnavailable(f"checksum mismatch for {name}")
    return root


def load(
    root: str | os.PathLike | None = None, split: str = "train", download: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images, digits)``: uint8 arrays of shape (N, 28, 28) and (N,).

    ``split`` is ``"train"`` (60k), ``"test"`` (10k) or ``"all"`` (train then test).
    """
    if split == "all":
        a, b = load(root, "train", download), load(root, "test", download)
        return np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]])
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ValueError(f"unknown split {split!r}")
    root = Path(root) if root is not None else default_root()
    img_path = root / f"{prefix}-images-idx3-ubyte"
    lbl_path = root / f"{prefix}-labels-idx1-ubyte"
    if not (img_path.exists() and lbl_path.exists()):
        if not download:
            raise MNISTUnavailable(f"MNIST IDX files not found under {root}")
        try:
            fetch(root)
        except OSError as exc:
            raise MNISTUnavailable(f"could not download MNIST: {exc}") from exc
    images = read_idx(img_path.read_bytes())
    digits = read_idx(lbl_path.read_bytes())
    if images.shape[0] != digits.shape[0]:
        raise ValueError("image/label count mismatch")
    return images, digits


def available(root: str | os.PathLike | None = None) -> bool:
    root = Path(root) if root is not None else default_root()
    return all((root / name).exists() for name in FILES)
