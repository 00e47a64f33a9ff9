"""Seeded, splittable randomness and weight initializers.

All randomness in the package flows through Rng so that a 64-bit seed fixes
every draw.  Splitting derives independent named streams, which keeps
initialization order-independent: each parameter gets its own stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor_core import FP32, FP64, check_dtype


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"split key must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"split key must be int or str, got {type(key).__name__}")


class Rng:
    """PCG64 stream addressed by (seed, split path).

    The same seed always reproduces the same stream bit for bit, and
    split() children are statistically independent of the parent and of
    each other.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def split(self, key) -> "Rng":
        return Rng(self.seed, self.path + (_key_to_int(key),))

    # thin draw helpers; everything is drawn in fp64 and cast by callers
    def normal(self, shape=None) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low, high, shape=None) -> np.ndarray:
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def random_orthogonal(n: int, rng: Rng, dtype=FP64) -> np.ndarray:
    """Random n x n orthogonal matrix via the Householder recursion.

    Start from a random 1x1 orthogonal matrix (+1 or -1); at step k embed
    the (k-1)-dim matrix in the lower-right block and apply the Householder
    reflector of a fresh Gaussian k-vector.  All arithmetic is fp64; the
    result is cast to the requested dtype at the end.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    q = np.array([[1.0 if rng.uniform() < 0.5 else -1.0]])
    for k in range(2, n + 1):
        v = rng.normal(k)
        norm = np.linalg.norm(v)
        while norm == 0.0:  # probability zero, but stay defined
            v = rng.normal(k)
            norm = np.linalg.norm(v)
        u = v / norm
        emb = np.zeros((k, k))
        emb[0, 0] = 1.0
        emb[1:, 1:] = q
        q = emb - 2.0 * np.outer(u, u @ emb)
    return q.astype(dtype, copy=False)


def init_orthogonal_node(shape: tuple[int, ...], in_axes, rng: Rng,
                         dtype=FP32) -> np.ndarray:
    """Fill a node tensor from a slice of a random orthogonal matrix.

    The node's axes split into in-axes (product p) and out-axes (product q).
    The leading p x q block of a random max(p, q)-dim orthogonal matrix is
    reshaped onto (in-axes..., out-axes...) and permuted into the node's
    actual axis order.  For p >= q the matricized node M then satisfies
    M^T M = I.
    """
    shape = tuple(int(s) for s in shape)
    in_axes = tuple(int(a) for a in in_axes)
    for a in in_axes:
        if not 0 <= a < len(shape):
            raise ValueError(f"in-axis {a} out of range for shape {shape}")
    if len(set(in_axes)) != len(in_axes):
        raise ValueError(f"duplicate in-axes {in_axes}")
    out_axes = tuple(a for a in range(len(shape)) if a not in in_axes)
    p = int(np.prod([shape[a] for a in in_axes], dtype=np.int64)) if in_axes else 1
    q = int(np.prod([shape[a] for a in out_axes], dtype=np.int64)) if out_axes else 1
    full = random_orthogonal(max(p, q), rng, dtype=FP64)
    block = full[:p, :q]
    t = block.reshape(tuple(shape[a] for a in in_axes) +
                      tuple(shape[a] for a in out_axes))
    # undo the in-first ordering: axis i of t belongs at (in_axes+out_axes)[i]
    inv = np.argsort(in_axes + out_axes)
    return np.ascontiguousarray(np.transpose(t, inv)).astype(dtype, copy=False)


def init_gaussian_fanin(shape: tuple[int, ...], n_in: int, rng: Rng,
                        dtype=FP32) -> np.ndarray:
    """Zero-mean Gaussian with sigma = 1/sqrt(n_in)."""
    if n_in < 1:
        raise ValueError(f"n_in must be >= 1, got {n_in}")
    sigma = 1.0 / np.sqrt(float(n_in))
    return (sigma * rng.normal(tuple(shape))).astype(dtype, copy=False)


def orthogonality_defect(q: np.ndarray) -> float:
    """max |Q^T Q - I|; small for orthogonal Q."""
    q = check_dtype(q, "q").astype(FP64, copy=False)
    n = q.shape[1]
    return float(np.max(np.abs(q.T @ q - np.eye(n))))
