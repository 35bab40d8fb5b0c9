"""Dense float32 tensors with explicit per-operation backward passes.

There is no general autodiff: each forward op optionally records one backward
closure on a Tape, and Tape.backward replays them in reverse. Gradients
accumulate on Tensor.grad. Teacher-side values are simply run without a tape,
so they never receive gradients.
"""

from __future__ import annotations

import numpy as np

from . import backends


class Tensor:
    """Row-major contiguous float32 array plus a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def check_finite(self, context=""):
        if not np.all(np.isfinite(self.data)):
            bad = int(np.sum(~np.isfinite(self.data)))
            raise FloatingPointError(
                f"non-finite values ({bad} of {self.data.size}) in {context or 'tensor'}"
            )

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter:
    """A named learnable tensor. grad mirrors value's shape and is zeroed
    (cleared) between optimizer steps by the trainer."""

    __slots__ = ("value", "name", "trainable")

    def __init__(self, data, name="", trainable=True):
        self.value = data if isinstance(data, Tensor) else Tensor(data)
        self.name = name
        self.trainable = trainable

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Recorded forward trace; backward() replays node closures in reverse."""

    def __init__(self):
        self._nodes = []

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=np.float32)
        for fn in reversed(self._nodes):
            fn()


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, tape: Tape | None = None) -> Tensor:
    """'Same' zero-padded stride-1 cross-correlation, NCHW x OIKK -> NOHW."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d: need 4-d input/weight, got {x.data.ndim}-d and {w.data.ndim}-d"
        )
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {w.shape[1]}"
        )
    if tape is None:
        return Tensor(backends.conv2d_fwd(x.data, w.data))
    y, cols = backends.conv2d_fwd_ctx(x.data, w.data)  # columns reused below
    out = Tensor(y)

    def _backward():
        g = out.grad
        if g is None:
            return
        go = np.ascontiguousarray(g, dtype=np.float32)
        x.accumulate(backends.conv2d_bwd_input(go, w.data))
        w.accumulate(backends.conv2d_bwd_weight_ctx(go, cols, w.shape[2]))

    tape.record(_backward)
    return out


def conv2d_backward(grad_out, x_data, w_data):
    """Gradients of sum(grad_out * conv2d(x, w)) w.r.t. x and w."""
    if grad_out.shape[1] != w_data.shape[0]:
        raise ValueError(
            f"conv2d_backward: grad_out has {grad_out.shape[1]} channels, "
            f"weight produces {w_data.shape[0]}"
        )
    go = np.ascontiguousarray(grad_out, dtype=np.float32)
    gx = backends.conv2d_bwd_input(go, w_data)
    gw = backends.conv2d_bwd_weight(go, x_data, w_data.shape[2])
    return gx, gw


# ---------------------------------------------------------------------------
# pointwise layers


def prelu(x: Tensor, slope: Parameter, tape: Tape | None = None) -> Tensor:
    """y = x for x > 0 else slope*x; slope is per-channel (axis 1) or scalar."""
    c = x.shape[1] if x.data.ndim > 1 else 1
    s = slope.data
    if s.size not in (1, c):
        raise ValueError(f"prelu: slope has {s.size} entries for {c} channels")
    s_b = s.reshape((1, -1) + (1,) * (x.data.ndim - 2)) if x.data.ndim > 1 else s
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, s_b * x.data))
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            x.accumulate(np.where(pos, g, s_b * g))
            gs = np.where(pos, 0.0, g * x.data)
            if s.size == 1:
                slope.value.accumulate(gs.sum(dtype=np.float32).reshape(s.shape))
            else:
                axes = (0,) + tuple(range(2, x.data.ndim))
                slope.value.accumulate(gs.sum(axis=axes, dtype=np.float32))
        tape.record(_backward)
    return out


def _shuffle(data, r):
    n, c, h, w = data.shape
    co = c // (r * r)
    return (
        data.reshape(n, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * r, w * r)
    )


def _unshuffle(data, r):
    n, c, hr, wr = data.shape
    h, w = hr // r, wr // r
    return (
        data.reshape(n, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h, w)
    )


def pixel_shuffle(x: Tensor, r: int, tape: Tape | None = None) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, rH, rW) channel-to-space remapping."""
    c = x.shape[1]
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    out = Tensor(_shuffle(x.data, r))
    if tape is not None:
        def _backward():
            if out.grad is not None:
                x.accumulate(_unshuffle(out.grad, r))
        tape.record(_backward)
    return out


def pixel_unshuffle(x: Tensor, r: int, tape: Tape | None = None) -> Tensor:
    """Inverse of pixel_shuffle."""
    if x.shape[2] % r != 0 or x.shape[3] % r != 0:
        raise ValueError(f"pixel_unshuffle: spatial {x.shape[2:]} not divisible by {r}")
    out = Tensor(_unshuffle(x.data, r))
    if tape is not None:
        def _backward():
            if out.grad is not None:
                x.accumulate(_shuffle(out.grad, r))
        tape.record(_backward)
    return out


def add_scaled(x: Tensor, y: Tensor, alpha: Parameter, tape: Tape | None = None) -> Tensor:
    """out = x + alpha*y (block output plus scaled shortcut); alpha scalar."""
    _same_shape(x.data, y.data, "add_scaled")
    a = float(alpha.data)
    out = Tensor(x.data + np.float32(a) * y.data)
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            x.accumulate(g)
            y.accumulate(np.float32(a) * g)
            alpha.value.accumulate(
                np.sum(g * y.data, dtype=np.float32).reshape(alpha.data.shape)
            )
        tape.record(_backward)
    return out


# ---------------------------------------------------------------------------
# losses (target is treated as a constant: no gradient flows into it)


def l1_loss(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, np.float32)
    _same_shape(pred.data, t, "l1_loss")
    if pred.size == 0:
        raise ValueError("l1_loss: empty tensors")
    diff = pred.data - t
    out = Tensor(np.mean(np.abs(diff), dtype=np.float32))
    if tape is not None:
        def _backward():
            if out.grad is not None:
                pred.accumulate(out.grad * np.sign(diff) / np.float32(diff.size))
        tape.record(_backward)
    return out


def mse_loss(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, np.float32)
    _same_shape(pred.data, t, "mse_loss")
    if pred.size == 0:
        raise ValueError("mse_loss: empty tensors")
    diff = pred.data - t
    out = Tensor(np.mean(diff * diff, dtype=np.float32))
    if tape is not None:
        def _backward():
            if out.grad is not None:
                pred.accumulate(out.grad * np.float32(2.0) * diff / np.float32(diff.size))
        tape.record(_backward)
    return out


def weighted_sum(terms, coeffs, tape: Tape | None = None) -> Tensor:
    """out = sum_i coeffs[i] * terms[i], all same shape (used on scalars)."""
    if len(terms) != len(coeffs) or not terms:
        raise ValueError("weighted_sum: need matching non-empty terms/coeffs")
    acc = np.zeros_like(terms[0].data)
    for t, c in zip(terms, coeffs):
        _same_shape(t.data, acc, "weighted_sum")
        acc = acc + np.float32(c) * t.data
    out = Tensor(acc)
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            for t, c in zip(terms, coeffs):
                t.accumulate(np.float32(c) * g)
        tape.record(_backward)
    return out
