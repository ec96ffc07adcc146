"""Synthetic mixtures, initialization, dataset files, MNIST IDX and PCA."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..mixture import MixtureModel, as_data, cholesky, default_reg

BINARY_MAGIC = b"GMD1"
_BINARY_HEADER = struct.Struct("<4sQI")  # magic, N, d -> 16 bytes


class IDXFormatError(ValueError):
    pass


def sample_mixture(model: MixtureModel, N: int, seed=None) -> np.ndarray:
    """Draw ``N`` points; component counts are multinomial in the weights.

    Points are grouped by component in index order.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(N, model.weights)
    blocks = []
    for j, n in enumerate(counts):
        L = cholesky(model.covs[j])
        z = rng.standard_normal((n, model.dim))
        blocks.append(model.means[j] + z @ L.T)
    return np.concatenate(blocks, axis=0)


def sample_sizes(model: MixtureModel, sizes, seed=None) -> np.ndarray:
    """Draw exactly ``sizes[j]`` points from component ``j``."""
    rng = np.random.default_rng(seed)
    blocks = []
    for j, n in enumerate(sizes):
        L = cholesky(model.covs[j])
        blocks.append(model.means[j] + rng.standard_normal((int(n), model.dim)) @ L.T)
    return np.concatenate(blocks, axis=0)


def init_model(data, K: int, seed=None, reg=None) -> MixtureModel:
    """Random distinct data points as means, uniform weights, global covariance."""
    X = as_data(data)
    N, d = X.shape
    if K > N:
        raise ValueError(f"cannot pick {K} distinct means from {N} points")
    rng = np.random.default_rng(seed)
    idx = rng.choice(N, size=K, replace=False)
    reg = default_reg(X) if reg is None else reg
    cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True)) + reg * np.eye(d)
    return MixtureModel(np.full(K, 1.0 / K), X[idx].copy(), np.repeat(cov[None], K, axis=0))


# --- dataset files -----------------------------------------------------------

def write_text(path, X) -> None:
    X = as_data(X)
    with open(path, "w") as fh:
        fh.write(f"n={X.shape[0]} d={X.shape[1]}\n")
        np.savetxt(fh, X, fmt="%.17g")


def read_text(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        try:
            meta = dict(tok.split("=", 1) for tok in header)
            N, d = int(meta["n"]), int(meta["d"])
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}: bad header {header!r}") from exc
        X = np.loadtxt(fh, ndmin=2)
    if X.shape != (N, d):
        raise ValueError(f"{path}: header says {N}x{d}, body is {X.shape[0]}x{X.shape[1]}")
    return as_data(X)


def write_binary(path, X) -> None:
    X = as_data(X)
    with open(path, "wb") as fh:
        fh.write(_BINARY_HEADER.pack(BINARY_MAGIC, X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def read_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _BINARY_HEADER.size:
        raise ValueError(f"{path}: file shorter than the 16-byte header")
    magic, N, d = _BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_BINARY_HEADER.size:]
    if len(body) != 8 * N * d:
        raise ValueError(f"{path}: expected {8 * N * d} payload bytes, found {len(body)}")
    return as_data(np.frombuffer(body, dtype="<f8").reshape(N, d))


def read_dataset(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_binary(path) if head == BINARY_MAGIC else read_text(path)


def write_dataset(path, X, binary=False) -> None:
    (write_binary if binary else write_text)(path, X)


# --- MNIST -------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated magic number at byte offset 0")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim < 1:
        raise IDXFormatError(
            f"{path}: malformed magic number {raw[:4].hex()} at byte offset 0")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IDXFormatError(f"{path}: truncated dimension table at byte offset 4 "
                             f"(need {hdr} bytes, have {len(raw)})")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = np.dtype(_IDX_TYPES[dtype_code])
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - hdr < need:
        raise IDXFormatError(f"{path}: truncated payload at byte offset {len(raw)} "
                             f"(expected {hdr + need} bytes)")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=hdr).reshape(dims)


def ingest_idx(path) -> np.ndarray:
    """Images from an IDX3 file as rows scaled to [0, 1], flattened row-major."""
    arr = read_idx(path)
    if arr.ndim < 2:
        raise IDXFormatError(f"{path}: expected an image file, got {arr.ndim}-d array")
    flat = arr.reshape(arr.shape[0], -1).astype(float)
    if arr.dtype.kind == "u" and arr.dtype.itemsize == 1:
        flat /= 255.0
    return flat


def pca_project(data, k: int) -> np.ndarray:
    """Center and project onto the top-``k`` principal axes.

    Each axis is oriented so its largest-magnitude coordinate is positive.
    """
    X = as_data(data)
    if not 1 <= k <= X.shape[1]:
        raise ValueError(f"k must be in [1, {X.shape[1]}]")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vecs = vecs[:, ::-1][:, :k]
    flip = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(k)] < 0
    vecs[:, flip] *= -1
    return Xc @ vecs


__all__ = [
    "sample_mixture", "sample_sizes", "init_model", "read_dataset", "write_dataset",
    "read_text", "write_text", "read_binary", "write_binary", "read_idx",
    "ingest_idx", "pca_project", "IDXFormatError",
]
