"""Synthetic datasets and the dataset container format.

The generator renders class-conditional Gaussian blobs as C x H x W images:
classes live at mutually orthogonal template directions scaled so that the
pairwise center distance is ``margin`` times the per-pixel noise, which makes
the separability directly controllable.  Files use the ARQDATA container
(little-endian, versioned) and round-trip byte-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import REAL

_MAGIC = b"ARQDATA"
_VERSION = 1


def gen_blobs(num_classes: int = 3, image_size: int = 8, channels: int = 1,
              per_class: int = 800, margin: float = 8.0, noise: float = 0.1,
              seed: int = 0):
    """Deterministic blob dataset; returns (xs, labels) with xs in NCHW.

    ``margin`` is the inter-class center distance in units of the per-pixel
    noise sigma; class centers are orthogonalized random directions, so the
    distance holds for every pair.
    """
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    if margin <= 0:
        raise ValueError("margin must be positive")
    if noise <= 0:
        raise ValueError("noise must be positive")
    dim = channels * image_size * image_size
    if num_classes > dim:
        raise ValueError("more classes than pixels")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    raw = rng.standard_normal((num_classes, dim))
    # Gram-Schmidt: orthonormal directions -> pairwise distance sqrt(2)*radius
    basis = []
    for v in raw:
        for u in basis:
            v = v - (v @ u) * u
        basis.append(v / np.linalg.norm(v))
    centers = np.stack(basis) * (margin * noise / np.sqrt(2.0))
    xs = np.empty((num_classes * per_class, dim), dtype=REAL)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        xs[block] = centers[c] + noise * rng.standard_normal((per_class, dim))
        labels[block] = c
    order = rng.permutation(len(xs))
    xs = xs[order].reshape(-1, channels, image_size, image_size)
    return xs, labels[order]


def split_dataset(xs, labels, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint (train, cert, eval) splits from a seeded permutation."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n = len(xs)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    order = rng.permutation(n)
    n_train = int(fractions[0] * n)
    n_cert = int(fractions[1] * n)
    parts = (order[:n_train], order[n_train:n_train + n_cert],
             order[n_train + n_cert:])
    return tuple((xs[p], labels[p]) for p in parts)


def save_dataset(path, xs: np.ndarray, labels: np.ndarray,
                 num_classes: int) -> None:
    xs = np.asarray(xs, dtype=REAL)
    if xs.ndim != 4:
        raise ValueError("dataset arrays must be NCHW")
    n, c, h, w = xs.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIII", _VERSION, n, c, h, w, num_classes))
        fh.write(np.ascontiguousarray(xs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:7] != _MAGIC:
        raise ValueError("not an ARQDATA file (bad magic)")
    version, n, c, h, w, num_classes = struct.unpack_from("<IIIIII", blob, 7)
    if version != _VERSION:
        raise ValueError(f"unsupported ARQDATA version {version}")
    off = 7 + 24
    count = n * c * h * w
    if len(blob) < off + 8 * count + 8 * n:
        raise ValueError("truncated ARQDATA file")
    xs = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off + 8 * count)
    return xs.reshape(n, c, h, w).copy(), labels.copy(), num_classes


def load_csv_dataset(path, channels: int, image_size: int):
    """CSV ingestion: one sample per line, label first, then the pixels."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=REAL)
    labels = rows[:, 0].astype(np.int64)
    dim = channels * image_size * image_size
    if rows.shape[1] - 1 != dim:
        raise ValueError(
            f"CSV rows carry {rows.shape[1] - 1} features, expected {dim}")
    xs = rows[:, 1:].reshape(-1, channels, image_size, image_size)
    return xs, labels
