"""Reverse-mode automatic differentiation on a flat tape.

A Tape records every produced array along with the indices of its parents
and a closure that maps the output gradient to per-parent gradients.
backward() replays the entries in reverse, accumulating into a dict keyed
by entry index.  Anything differentiable in the package (tensor-network
contractions and the neural-net primitives) goes through tape.record, so
new primitives only need a forward value and a backward closure.
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc


class Var:
    """Handle to one tape entry."""

    __slots__ = ("tape", "idx", "name")

    def __init__(self, tape: "Tape", idx: int, name: str | None = None):
        self.tape = tape
        self.idx = idx
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        label = self.name or f"#{self.idx}"
        return f"Var({label}, shape={self.value.shape})"


class Tape:
    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._backward: list = []  # None for leaves

    def leaf(self, value: np.ndarray, name: str | None = None) -> Var:
        value = tc.check_dtype(value, name or "leaf")
        return self._push(value, (), None, name)

    def record(self, value: np.ndarray, parents: tuple[Var, ...],
               backward) -> Var:
        """backward(grad) must return one gradient (or None) per parent."""
        for p in parents:
            if p.tape is not self:
                raise ValueError("parent recorded on a different tape")
        return self._push(np.asarray(value), tuple(p.idx for p in parents),
                          backward, None)

    def _push(self, value, parent_idx, backward, name) -> Var:
        self.values.append(value)
        self._parents.append(parent_idx)
        self._backward.append(backward)
        return Var(self, len(self.values) - 1, name)

    def backward(self, root: Var, seed: np.ndarray | None = None) -> dict:
        """Gradients of root w.r.t. every entry it depends on, by index."""
        if root.tape is not self:
            raise ValueError("root recorded on a different tape")
        if seed is None:
            if root.value.ndim != 0:
                raise ValueError(f"root must be a scalar (got shape "
                                 f"{root.value.shape}); pass an explicit seed")
            seed = np.ones((), dtype=root.value.dtype)
        grads: dict[int, np.ndarray] = {root.idx: np.asarray(seed)}
        for idx in range(root.idx, -1, -1):
            g = grads.get(idx)
            if g is None or self._backward[idx] is None:
                continue
            parts = self._backward[idx](g)
            parents = self._parents[idx]
            if len(parts) != len(parents):
                raise RuntimeError(f"backward of entry {idx} returned "
                                   f"{len(parts)} gradients for "
                                   f"{len(parents)} parents")
            for pidx, part in zip(parents, parts):
                if part is None:
                    continue
                if pidx in grads:
                    grads[pidx] = grads[pidx] + part
                else:
                    grads[pidx] = part
        return grads

    def gradients(self, root: Var, leaves: dict[str, Var],
                  seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Per-leaf gradients; leaves the loss never touched get zeros."""
        grads = self.backward(root, seed)
        out = {}
        for name, var in leaves.items():
            g = grads.get(var.idx)
            out[name] = np.zeros_like(var.value) if g is None else g
        return out

    def release(self) -> None:
        """Drop every recorded value and backward closure.

        Closures capture Vars, which point back at the tape; that cycle
        keeps large intermediates alive until a gc pass.  Releasing breaks
        it so memory returns immediately.  The tape and its Vars must not
        be used afterwards.
        """
        self.values.clear()
        self._parents.clear()
        self._backward.clear()


# -- generic primitives --------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def backward(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return a.tape.record(out, (a, b), backward)


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value

    def backward(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return a.tape.record(out, (a, b), backward)


def scale(a: Var, c: float) -> Var:
    c = float(c)

    def backward(g):
        return (g * c,)

    return a.tape.record(a.value * c, (a,), backward)


def matmul(a: Var, b: Var) -> Var:
    out = a.value @ b.value

    def backward(g):
        return (g @ b.value.T, a.value.T @ g)

    return a.tape.record(out, (a, b), backward)


def permute(a: Var, perm) -> Var:
    perm = tuple(int(p) for p in perm)
    inv = tuple(np.argsort(perm))

    def backward(g):
        return (tc.permute(g, inv),)

    return a.tape.record(tc.permute(a.value, perm), (a,), backward)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    shape = tuple(int(s) for s in shape)

    def backward(g):
        return (np.ascontiguousarray(g).reshape(old),)

    return a.tape.record(np.ascontiguousarray(a.value).reshape(shape),
                         (a,), backward)


def contract(a: Var, a_axes, b: Var, b_axes) -> Var:
    """Differentiable pairwise contraction; see tensor_core.contract."""
    a_axes = tuple(int(x) for x in a_axes)
    b_axes = tuple(int(x) for x in b_axes)
    av, bv = a.value, b.value
    out = tc.contract(av, a_axes, bv, b_axes)
    p = av.ndim - len(a_axes)
    q = bv.ndim - len(b_axes)
    a_free = tuple(ax for ax in range(av.ndim) if ax not in a_axes)
    b_free = tuple(ax for ax in range(bv.ndim) if ax not in b_axes)

    def backward(g):
        # d a: fold g's b-free block into b, then lay axes back in a's order
        tmp = tc.contract(g, tuple(range(p, p + q)), bv, b_free)
        sorted_b = sorted(b_axes)
        perm = [0] * av.ndim
        for slot, ax in enumerate(a_free):
            perm[ax] = slot
        for aax, bax in zip(a_axes, b_axes):
            perm[aax] = p + sorted_b.index(bax)
        da = tc.permute(tmp, perm)

        tmp = tc.contract(av, a_free, g, tuple(range(p)))
        sorted_a = sorted(a_axes)
        perm = [0] * bv.ndim
        for slot, ax in enumerate(b_free):
            perm[ax] = len(a_axes) + slot
        for aax, bax in zip(a_axes, b_axes):
            perm[bax] = sorted_a.index(aax)
        db = tc.permute(tmp, perm)
        return (da, db)

    return a.tape.record(out, (a, b), backward)


def lrelu(a: Var, leak: float = 0.2) -> Var:
    mask = np.where(a.value >= 0, 1.0, leak).astype(a.value.dtype)

    def backward(g):
        return (g * mask,)

    return a.tape.record(a.value * mask, (a,), backward)


def vsum(a: Var) -> Var:
    def backward(g):
        return (np.broadcast_to(g, a.value.shape).astype(a.value.dtype),)

    return a.tape.record(np.asarray(a.value.sum()), (a,), backward)


def vmean(a: Var) -> Var:
    n = a.value.size

    def backward(g):
        return ((np.broadcast_to(g, a.value.shape) / n).astype(a.value.dtype),)

    return a.tape.record(np.asarray(a.value.mean()), (a,), backward)


# -- numeric gradient checking -------------------------------------------------


def gradcheck(fn, leaves: dict[str, np.ndarray], eps: float = 1e-6,
              max_coords: int = 25, seed: int = 0) -> float:
    """Compare tape gradients of fn against central differences.

    fn(tape, vars) must build and return a scalar loss Var from the given
    leaf Vars, using only the values it is handed.  For each sampled
    coordinate the error |analytic - numeric| is divided by the largest
    gradient magnitude seen for that leaf (so coordinates whose true
    gradient sits below the finite-difference noise floor do not dominate);
    returns the worst such ratio.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside sane range [1e-7, 1e-3]")
    leaves = {k: np.asarray(v, dtype=np.float64) for k, v in leaves.items()}
    tape = Tape()
    lvars = {k: tape.leaf(v, name=k) for k, v in leaves.items()}
    loss = fn(tape, lvars)
    analytic = tape.gradients(loss, lvars)

    def eval_loss(mutated: dict[str, np.ndarray]) -> float:
        t = Tape()
        vs = {k: t.leaf(v, name=k) for k, v in mutated.items()}
        return float(fn(t, vs).value)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in leaves.items():
        coords = np.arange(arr.size)
        if arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        pairs = []
        for flat in coords:
            idx = np.unravel_index(int(flat), arr.shape) if arr.ndim else ()
            bumped = dict(leaves)
            plus = arr.copy()
            plus[idx] += eps
            bumped[name] = plus
            up = eval_loss(bumped)
            minus = arr.copy()
            minus[idx] -= eps
            bumped[name] = minus
            down = eval_loss(bumped)
            pairs.append((float(analytic[name][idx]),
                          (up - down) / (2.0 * eps)))
        scale = max(max(abs(a), abs(n)) for a, n in pairs)
        scale = max(scale, 1e-12)
        worst = max(worst, max(abs(a - n) / scale for a, n in pairs))
    return worst
