"""Convolutional-network primitives recorded on the autodiff tape.

Layout convention is NHWC throughout: batches are (batch, height, width,
channels) and kernels are (out_channels, in_channels, kh, kw).
Convolutions and pooling use same padding: the output spatial size is
ceil(size / stride) and the total padding splits as pad_before = total // 2.
Pooling takes the maximum over valid cells only, so padding never leaks a
value into the result.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Var, add, matmul
from .init import Rng


def same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for same padding."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Var, w: Var, stride: int = 1) -> Var:
    """Same-padded 2-d cross-correlation, no bias.

    Runs as one matrix product over unrolled patches; each patch row is
    laid out (channel, kernel row, kernel col) to match the kernel layout.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got "
                         f"{xv.ndim}-d and {wv.ndim}-d")
    B, H, W, C = xv.shape
    Cout, Cin, kh, kw = wv.shape
    if C != Cin:
        raise ValueError(f"input has {C} channels, kernel expects {Cin}")
    s = int(stride)
    OH, pt, pb = same_pads(H, kh, s)
    OW, pl, pr = same_pads(W, kw, s)
    xp = np.pad(xv, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 1, 2, 3, 4, 5).reshape(B * OH * OW, C * kh * kw)
    wmat = wv.reshape(Cout, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, OH, OW, Cout)

    def backward(g):
        gmat = np.ascontiguousarray(g).reshape(B * OH * OW, Cout)
        dw = (gmat.T @ cols).reshape(wv.shape)
        dcols = (gmat @ wmat).reshape(B, OH, OW, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * OH:s, j:j + s * OW:s, :] += dcols[..., i, j]
        return (np.ascontiguousarray(dxp[:, pt:pt + H, pl:pl + W, :]), dw)

    return x.tape.record(out, (x, w), backward)


def maxpool(x: Var, size: int = 3, stride: int = 2) -> Var:
    """Same-padded max pooling over valid cells; first maximum wins ties."""
    xv = x.value
    if xv.ndim != 4:
        raise ValueError(f"maxpool expects 4-d input, got {xv.ndim}-d")
    B, H, W, C = xv.shape
    k, s = int(size), int(stride)
    OH, pt, pb = same_pads(H, k, s)
    OW, pl, pr = same_pads(W, k, s)
    xp = np.pad(xv, ((0, 0), (pt, pb), (pl, pr), (0, 0)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    flat = win.reshape(B, OH, OW, C, k * k)
    arg = flat.argmax(axis=-1)
    out = np.ascontiguousarray(
        np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        dxp = np.zeros((B, H + pt + pb, W + pl + pr, C), dtype=g.dtype)
        bi, oi, oj, ci = np.indices((B, OH, OW, C))
        np.add.at(dxp, (bi, oi * s + arg // k, oj * s + arg % k, ci), g)
        return (np.ascontiguousarray(dxp[:, pt:pt + H, pl:pl + W, :]),)

    return x.tape.record(out, (x,), backward)


def batchnorm(x: Var, gamma: Var, beta: Var, running: dict, training: bool,
              momentum: float = 0.9, eps: float = 1e-5) -> Var:
    """Per-channel batch normalization for NHWC input.

    In training mode the batch statistics normalize the activations and the
    running dict is updated in place as momentum * old + (1 - momentum) *
    batch.  In inference mode the running statistics are used unchanged.
    """
    xv = x.value
    if xv.ndim != 4:
        raise ValueError(f"batchnorm expects 4-d input, got {xv.ndim}-d")
    if training and xv.shape[0] < 2:
        raise ValueError(f"batchnorm needs a batch of at least 2 in training, "
                         f"got {xv.shape[0]}")
    axes = (0, 1, 2)
    n = xv.shape[0] * xv.shape[1] * xv.shape[2]
    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running["mean"] = momentum * running["mean"] + (1 - momentum) * mu
        running["var"] = momentum * running["var"] + (1 - momentum) * var
    else:
        mu = running["mean"].astype(xv.dtype)
        var = running["var"].astype(xv.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = (gamma.value * xhat + beta.value).astype(xv.dtype)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.value
        if training:
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes)
                              - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return (dx.astype(xv.dtype), dgamma.astype(xv.dtype),
                dbeta.astype(xv.dtype))

    return x.tape.record(out, (x, gamma, beta), backward)


def dropout(x: Var, rate: float, rng: Rng, training: bool) -> Var:
    """Inverted dropout: surviving activations are scaled by 1/(1 - rate)."""
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.tape.record(x.value, (x,), lambda g: (g,))
    keep = 1.0 - rate
    mask = (rng.uniform(x.value.shape) >= rate).astype(x.value.dtype) / keep

    def backward(g):
        return (g * mask,)

    return x.tape.record(x.value * mask, (x,), backward)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """x @ w plus an optional broadcast bias row."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def softmax_xent(logits: Var, labels) -> Var:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-d, got {z.ndim}-d")
    if labels.shape != (z.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch "
                         f"size {z.shape[0]}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    B = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(B), labels].mean(), dtype=z.dtype)
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return ((d * (float(g) / B)).astype(z.dtype),)

    return logits.tape.record(loss, (logits,), backward)


def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax equals the label."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


class Adam:
    """Adam with bias correction; step() returns fresh parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        if set(params) != set(grads):
            missing = set(params) ^ set(grads)
            raise ValueError(f"parameter/gradient name mismatch: {sorted(missing)}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for {name!r}")
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = (p - step).astype(p.dtype)
        return out

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}
