"""Dense tensor primitives: reshaping between matrix and mode indices,
pairwise contraction, axis permutation, and a small binary serialization.

Tensors are C-contiguous numpy arrays of float32 or float64.  The flat
layout is row-major, so a mode tuple (i1, ..., ik) over dims (d1, ..., dk)
flattens most-significant-first: i1*d2*...*dk + ... + ik.  Every operation
here returns a fresh C-contiguous array; inputs are never mutated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod

import numpy as np

FP32 = np.dtype(np.float32)
FP64 = np.dtype(np.float64)

_DTYPE_TAGS = {FP32: 1, FP64: 2}
_TAG_DTYPES = {1: FP32, 2: FP64}
_MAGIC = b"TNT1"


def check_dtype(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Reject anything that is not a float32/float64 ndarray."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise TypeError(f"{what} must be float32 or float64, got {arr.dtype}")
    return arr


@dataclass(frozen=True)
class AxisMap:
    """Bijection between a matrix index pair (A, B) and mode indices.

    A matrix W of shape (d**n, d**m) corresponds to a rank n+m tensor whose
    first n axes are the in-modes and last m axes the out-modes.  Row index
    A encodes (i1..in) most-significant-first, column index B encodes
    (j1..jm) the same way.
    """

    in_modes: int
    out_modes: int
    mode_dim: int

    def __post_init__(self) -> None:
        if self.in_modes < 1 or self.out_modes < 1:
            raise ValueError(f"AxisMap needs at least one mode per side, got "
                             f"({self.in_modes}, {self.out_modes})")
        if self.mode_dim < 2:
            raise ValueError(f"mode_dim must be >= 2, got {self.mode_dim}")

    @property
    def in_width(self) -> int:
        return self.mode_dim ** self.in_modes

    @property
    def out_width(self) -> int:
        return self.mode_dim ** self.out_modes

    def encode(self, modes: tuple[int, ...]) -> tuple[int, int]:
        """Mode tuple (i1..in, j1..jm) -> matrix index pair (A, B)."""
        if len(modes) != self.in_modes + self.out_modes:
            raise ValueError(f"expected {self.in_modes + self.out_modes} mode "
                             f"indices, got {len(modes)}")
        for pos, ix in enumerate(modes):
            if not 0 <= ix < self.mode_dim:
                raise ValueError(f"mode index {ix} at position {pos} is out of "
                                 f"range [0, {self.mode_dim})")
        row = 0
        for ix in modes[:self.in_modes]:
            row = row * self.mode_dim + ix
        col = 0
        for ix in modes[self.in_modes:]:
            col = col * self.mode_dim + ix
        return row, col

    def decode(self, row: int, col: int) -> tuple[int, ...]:
        """Matrix index pair (A, B) -> mode tuple; exact inverse of encode."""
        if not 0 <= row < self.in_width:
            raise ValueError(f"row index {row} out of range [0, {self.in_width})")
        if not 0 <= col < self.out_width:
            raise ValueError(f"col index {col} out of range [0, {self.out_width})")
        modes = []
        for _ in range(self.in_modes):
            row, r = divmod(row, self.mode_dim)
            modes.append(r)
        ins = modes[::-1]
        modes = []
        for _ in range(self.out_modes):
            col, r = divmod(col, self.mode_dim)
            modes.append(r)
        return tuple(ins + modes[::-1])


def tensorize(w: np.ndarray, amap: AxisMap) -> np.ndarray:
    """Reshape a (d**n, d**m) matrix into its rank n+m mode tensor.

    Because both layouts are row-major most-significant-first, the bijection
    is a pure reshape; no data moves.
    """
    w = check_dtype(w, "matrix")
    if w.shape != (amap.in_width, amap.out_width):
        raise ValueError(f"matrix shape {w.shape} does not match AxisMap "
                         f"widths ({amap.in_width}, {amap.out_width})")
    d = amap.mode_dim
    return np.ascontiguousarray(w).reshape((d,) * (amap.in_modes + amap.out_modes)).copy()


def matricize(t: np.ndarray, amap: AxisMap) -> np.ndarray:
    """Exact inverse of tensorize; bit-exact roundtrip."""
    t = check_dtype(t)
    d = amap.mode_dim
    expect = (d,) * (amap.in_modes + amap.out_modes)
    if t.shape != expect:
        raise ValueError(f"tensor shape {t.shape} does not match AxisMap "
                         f"shape {expect}")
    return np.ascontiguousarray(t).reshape(amap.in_width, amap.out_width).copy()


def _as_axes(axes, rank: int, what: str) -> tuple[int, ...]:
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if not 0 <= a < rank:
            raise ValueError(f"{what} axis {a} out of range for rank {rank}")
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate {what} axes {axes}")
    return axes


def contract(a: np.ndarray, a_axes, b: np.ndarray, b_axes) -> np.ndarray:
    """Contract paired axes of two tensors.

    Result axes are a's free axes (in original order) followed by b's free
    axes.  Implemented as permute -> reshape -> matmul so the whole library
    reduces to one numeric kernel.
    """
    a = check_dtype(a, "a")
    b = check_dtype(b, "b")
    a_axes = _as_axes(a_axes, a.ndim, "a")
    b_axes = _as_axes(b_axes, b.ndim, "b")
    if len(a_axes) != len(b_axes):
        raise ValueError(f"axis lists differ in length: {len(a_axes)} vs {len(b_axes)}")
    for ax, bx in zip(a_axes, b_axes):
        if a.shape[ax] != b.shape[bx]:
            raise ValueError(f"size mismatch on axis pair (a axis {ax} has size "
                             f"{a.shape[ax]}, b axis {bx} has size {b.shape[bx]})")
    a_free = tuple(i for i in range(a.ndim) if i not in a_axes)
    b_free = tuple(i for i in range(b.ndim) if i not in b_axes)
    k = prod(a.shape[ax] for ax in a_axes)
    pa = np.transpose(a, a_free + a_axes).reshape(prod(a.shape[i] for i in a_free), k)
    pb = np.transpose(b, b_axes + b_free).reshape(k, prod(b.shape[i] for i in b_free))
    out = pa @ pb
    return out.reshape(tuple(a.shape[i] for i in a_free) +
                       tuple(b.shape[i] for i in b_free))


def permute(t: np.ndarray, perm) -> np.ndarray:
    """Reorder axes; perm must be a permutation of range(rank)."""
    t = check_dtype(t)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(t.ndim)):
        raise ValueError(f"{perm} is not a permutation of range({t.ndim})")
    return np.ascontiguousarray(np.transpose(t, perm))


# --- serialization ----------------------------------------------------------
#
# Layout (all little-endian):
#   4 bytes  magic "TNT1"
#   1 byte   dtype tag (1 = float32, 2 = float64)
#   1 byte   rank
#   rank u32 dims
#   raw C-order buffer


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = check_dtype(arr)
    arr = np.ascontiguousarray(arr)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"serializable rank must be in [1, 255], got {arr.ndim}")
    for dim in arr.shape:
        if dim >= 2 ** 32:
            raise ValueError(f"dim {dim} does not fit in u32")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor stream: {what} needs {n} bytes, "
                         f"got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank header"))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    dtype = _TAG_DTYPES[tag]
    nbytes = prod(dims) * dtype.itemsize
    buf = _read_exact(fh, nbytes, f"buffer for dims {dims}")
    return np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    import io
    fh = io.BytesIO()
    write_tensor(fh, arr)
    return fh.getvalue()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    import io
    return read_tensor(io.BytesIO(buf))
