"""Binary tensor container, dataset manifests, normalization and splitting.

TensorFile layout (little-endian)::

    magic    4 bytes  b"MDPT"
    version  uint32
    dtype    uint8    0 = float32
    rank     uint8
    extents  rank x uint64
    payload  row-major float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MDPT"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    pass


def header_bytes(shape) -> bytes:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 255:
        raise FormatError("rank exceeds 255")
    return MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header_bytes(arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, dtype, rank = struct.unpack_from("<IBB", data, 4)
    if version != VERSION or dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    offset = 10 + 8 * rank
    shape = struct.unpack_from(f"<{rank}Q", data, 10)
    payload = data[offset:]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in entries.items()]
    manifest_path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in manifest_path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key] = value
    return out


@dataclass
class NormStats:
    min: np.ndarray   # per channel
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if np.any(self.max < self.min):
            raise ValueError("normalization max below min")


def compute_stats(data: np.ndarray) -> NormStats:
    """Per-channel extrema of ``[..., C, H, W]`` data."""
    axes = tuple(i for i in range(data.ndim) if i != data.ndim - 3)
    return NormStats(data.min(axis=axes), data.max(axis=axes))


def minmax_normalize(data: np.ndarray, stats: NormStats | None = None) -> tuple[np.ndarray, NormStats]:
    """Map each channel to [0, 1]; channels with zero range map to 0.5."""
    stats = stats or compute_stats(data)
    lo = stats.min[:, None, None]
    span = (stats.max - stats.min)[:, None, None]
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (data - lo) / safe, 0.5)
    return out.astype(np.float32), stats


def denormalize(data: np.ndarray, stats: NormStats) -> np.ndarray:
    lo = stats.min[:, None, None]
    span = (stats.max - stats.min)[:, None, None]
    return np.where(span > 0, data * span + lo, lo).astype(np.float32)


def split_train_valid(n: int, seed: int, ratio: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation of ``range(n)`` split at ``floor(ratio * n)``."""
    if n < 5:
        raise ValueError(f"need at least 5 trajectories to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(ratio * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def write_dataset(trajectories, path, manifest: dict | None = None) -> np.ndarray:
    """Stack equally shaped ``[T, C, H, W]`` trajectories into one ``[n, T, C, H, W]`` TensorFile."""
    arrays = [np.asarray(getattr(t, "states", t)) for t in trajectories]
    if not arrays:
        raise ValueError("no trajectories to write")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"trajectories have different shapes: {sorted(shapes)}")
    data = np.stack(arrays).astype(np.float32)
    write_tensor(path, data)
    write_manifest(path, {"shape": list(data.shape), **(manifest or {})})
    return data


def read_dataset(path) -> tuple[np.ndarray, dict[str, str]]:
    data = read_tensor(path)
    meta = read_manifest(path) if manifest_path(path).exists() else {}
    return data, meta


def parse_list(value: str, kind=float) -> list:
    return [kind(v) for v in value.split(",") if v != ""]
