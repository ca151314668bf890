"""Dataset specifications, synthetic cluster generator, CSV and IDX I/O."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scoring import ConfigError

MODALITIES = ("synthetic_clusters", "vector_csv", "image_idx")

# IDX element type codes
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder(">").str: code for code, dt in _IDX_DTYPES.items()}


class DatasetError(OSError):
    """A dataset file is missing or malformed."""


@dataclass(frozen=True)
class DatasetSpec:
    modality: str = "synthetic_clusters"
    path: str = ""
    label_path: str = ""
    n_clusters: int = 3
    dim: int = 2
    separation: float = 6.0
    cluster_std: float = 1.0
    per_cluster: int = 300
    clusters: tuple[int, ...] = ()
    seed: int = 0
    train_fraction: float = 2 / 3
    test_fraction: float = 1 / 3

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown dataset modality {self.modality!r}")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("split fractions must lie in [0, 1]")
        if self.modality == "synthetic_clusters":
            if min(self.n_clusters, self.dim, self.per_cluster) < 1:
                raise ConfigError("generator counts must be positive")
            if self.separation <= 0 or self.cluster_std <= 0:
                raise ConfigError("separation and cluster_std must be positive")
            if any(not 0 <= c < self.n_clusters for c in self.clusters):
                raise ConfigError("selected clusters out of range")
        elif not self.path:
            raise ConfigError(f"{self.modality} datasets need a path")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray | None
    x_test: np.ndarray
    y_test: np.ndarray | None

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def cluster_centers(n_clusters: int, dim: int, separation: float, std: float = 1.0) -> np.ndarray:
    """Centers on a circle in the first two coordinates, neighbours
    ``separation * std`` apart (on a line when ``dim == 1``)."""
    centers = np.zeros((n_clusters, dim))
    gap = separation * std
    if n_clusters == 1:
        return centers
    if dim == 1:
        centers[:, 0] = gap * (np.arange(n_clusters) - (n_clusters - 1) / 2)
        return centers
    radius = gap / (2.0 * np.sin(np.pi / n_clusters))
    angles = 2.0 * np.pi * np.arange(n_clusters) / n_clusters + np.pi / 2
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def make_clusters(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters; labels are cluster indices."""
    rng = np.random.default_rng(spec.seed)
    centers = cluster_centers(spec.n_clusters, spec.dim, spec.separation, spec.cluster_std)
    xs, ys = [], []
    for c in range(spec.n_clusters):
        xs.append(centers[c] + spec.cluster_std * rng.standard_normal((spec.per_cluster, spec.dim)))
        ys.append(np.full(spec.per_cluster, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if spec.clusters:
        keep = np.isin(y, spec.clusters)
        x, y = x[keep], y[keep]
    return x, y


def read_vector_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Header-bearing CSV; a last column named ``label`` holds integer labels."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise DatasetError(f"{path}: need a header and at least one row")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        arr = np.array(body, dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric entry") from exc
    if header[-1].strip().lower() == "label":
        labels = arr[:, -1]
        if np.any(labels != np.round(labels)):
            raise DatasetError(f"{path}: labels must be integers")
        return arr[:, :-1], labels.astype(np.int64)
    return arr, None


def write_vector_csv(path, x: np.ndarray, y: np.ndarray | None = None) -> None:
    x = np.asarray(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{i}" for i in range(x.shape[1])] + (["label"] if y is not None else [])
        w.writerow(header)
        for i, row in enumerate(x):
            w.writerow([repr(float(v)) for v in row] + ([int(y[i])] if y is not None else []))


def read_idx(path) -> np.ndarray:
    """Read an IDX file (big-endian magic: two zero bytes, type code, ndim)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX type code 0x{code:02x}")
    header_end = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header_end != count * dtype.itemsize:
        raise DatasetError(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    be = arr.dtype.newbyteorder(">") if arr.dtype.byteorder not in (">", "|") else arr.dtype
    code = _IDX_CODES.get(be.str)
    if code is None:
        raise DatasetError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(be).tobytes())


def split(x: np.ndarray, y, spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed + 1)
    order = rng.permutation(len(x))
    n_train = int(round(spec.train_fraction * len(x)))
    tr, te = order[:n_train], order[n_train:]
    return Dataset(x[tr], None if y is None else y[tr], x[te], None if y is None else y[te])


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.modality == "synthetic_clusters":
        x, y = make_clusters(spec)
    elif spec.modality == "vector_csv":
        x, y = read_vector_csv(spec.path)
    else:
        imgs = read_idx(spec.path)
        if imgs.ndim != 3 or imgs.shape[1] != imgs.shape[2]:
            raise DatasetError(f"{spec.path}: expected N square images")
        x = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
        y = None
        if spec.label_path:
            y = read_idx(spec.label_path).astype(np.int64)
            if y.shape != (len(x),):
                raise DatasetError("label count does not match image count")
    return split(x, y, spec)
