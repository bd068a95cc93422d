"""IDX file parsing and the MNIST dataset handle."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .exceptions import IDXFormatError, IDXMagicError, IDXOverflowError, IDXTruncatedError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_UBYTE = 0x08
_MAX_PAYLOAD = 1 << 34


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_idx_bytes(raw: bytes) -> Tuple[np.ndarray, Tuple[int, ...]]:
    if len(raw) < 4:
        raise IDXTruncatedError(f"header needs 4 bytes, file has {len(raw)}", len(raw))
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != _UBYTE or ndim == 0:
        magic = struct.unpack(">I", raw[:4])[0]
        raise IDXMagicError(f"bad magic 0x{magic:08x}; expected an unsigned-byte IDX file", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"extent table needs {header} bytes, file has {len(raw)}", len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for k, extent in enumerate(shape):
        count *= extent
        if count > _MAX_PAYLOAD:
            raise IDXOverflowError(f"extent product overflows after dimension {k}", 4 + 4 * k)
    actual = len(raw) - header
    if actual < count:
        raise IDXTruncatedError(f"payload truncated: expected {count} bytes, got {actual}", len(raw))
    if actual > count:
        raise IDXFormatError(f"{actual - count} trailing bytes after payload of {count}", header + count)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)
    return data, tuple(shape)


def parse_idx(path) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array and its shape."""
    return parse_idx_bytes(_read_bytes(path))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, _UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


@dataclass
class DatasetHandle:
    images: np.ndarray  # (n, channels, H, W) in [0, 1]
    labels: np.ndarray
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index) -> "DatasetHandle":
        return DatasetHandle(self.images[index], self.labels[index], dict(self.provenance))


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _locate(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train", limit: Optional[int] = None) -> DatasetHandle:
    directory = Path(directory)
    image_path, label_path = (_locate(directory, s) for s in _MNIST_FILES[split])
    image_raw, label_raw = _read_bytes(image_path), _read_bytes(label_path)
    if struct.unpack(">I", image_raw[:4])[0] != IDX_IMAGES_MAGIC:
        raise IDXMagicError(f"{image_path} is not an image file", 0)
    if struct.unpack(">I", label_raw[:4])[0] != IDX_LABELS_MAGIC:
        raise IDXMagicError(f"{label_path} is not a label file", 0)
    images, _ = parse_idx_bytes(image_raw)
    labels, _ = parse_idx_bytes(label_raw)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    provenance = {
        image_path.name: hashlib.sha256(image_raw).hexdigest(),
        label_path.name: hashlib.sha256(label_raw).hexdigest(),
    }
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return DatasetHandle(x, labels.astype(np.intp), provenance)


def default_mnist_dir() -> Optional[Path]:
    """``$MISTLAB_MNIST_DIR`` if set, else ``data/mnist`` next to the source checkout."""
    import os

    env = os.environ.get("MISTLAB_MNIST_DIR")
    candidates = [Path(env)] if env else []
    candidates.append(Path(__file__).resolve().parents[2] / "data" / "mnist")
    for c in candidates:
        if c.is_dir():
            return c
    return None
