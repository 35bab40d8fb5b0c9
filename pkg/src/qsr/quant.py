"""Quantization operators.

Two families:

* A plain symmetric uniform quantizer with straight-through gradients — the
  vanilla baseline. The scale is the quantization step: codes are
  clamp(round(x/v)) on the signed set {-2^(b-1), ..., 2^(b-1)-1} and v is
  initialized as 2*max|x|/(2^b - 1).

* Learnable redistribution quantizers. Weights are composed bit by bit: the
  b-bit value is 0.5*(S-1)*v with S = sum_i 2^i * q_i, q_i in {-1,+1} decided
  greedily from the residual left by the already-fixed higher bits, each
  decision passing through gain s_i and shift tau_i. Activations use an
  integrated integer quantizer with a learnable step v_a and mean shift tau_a,
  whose backward is shaped by a periodic tanh-based transfer (forward rounding
  is untouched by it).

Rounding is numpy's rint (ties to even); sign(0) = +1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tape, Tensor

SCALE_FLOOR = 1e-8


def code_bounds(bits: int):
    """Inclusive signed code range for a bit-width."""
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


# ---------------------------------------------------------------------------
# transformation functions


def phi_w(x):
    """Pre-sign weight transfer: odd, strictly monotonic, sign-preserving."""
    return np.tanh(2.0 * np.asarray(x, np.float32))


def phi_w_grad(x):
    t = np.tanh(2.0 * np.asarray(x, np.float32))
    return 2.0 * (1.0 - t * t)


def phi_a(a):
    """Periodic activation transfer; leaves round(phi_a(a)) == round(a) in the
    interior of each unit interval, so the forward pass uses plain rounding and
    this function only defines the backward shaping (see phi_a_grad)."""
    a = np.asarray(a, np.float32)
    frac = a - np.floor(a)
    return np.tanh(2.0 * frac - 1.0) / np.tanh(1.0) + np.floor(a) + 1.0


def phi_a_grad(a):
    """Derivative of phi_a: periodic in a with period 1, largest mid-interval."""
    a = np.asarray(a, np.float32)
    t = np.tanh(2.0 * (a - np.floor(a)) - 1.0)
    return 2.0 * (1.0 - t * t) / np.float32(np.tanh(1.0))


# ---------------------------------------------------------------------------
# uniform quantizer (vanilla baseline)


@dataclass
class UniformQuantizer:
    bits: int
    v: float = 1.0

    @classmethod
    def from_data(cls, x, bits):
        """Step from the data range: v = 2*max|x|/(2^b - 1); all-zero data
        degenerates to v = 1 (every code is then 0)."""
        m = float(np.max(np.abs(x))) if np.asarray(x).size else 0.0
        v = 2.0 * m / (2.0**bits - 1.0) if m > 0 else 1.0
        return cls(bits=bits, v=v)


def uniform_quantize(x, q: UniformQuantizer):
    """Returns (codes int32, dequantized float32)."""
    lo, hi = code_bounds(q.bits)
    z = np.asarray(x, np.float32) / np.float32(q.v)
    codes = np.clip(np.rint(z), lo, hi).astype(np.int32)
    return codes, (codes * np.float32(q.v)).astype(np.float32)


def uniform_backward(grad_out, x, q: UniformQuantizer):
    """Straight-through: gradient passes only where the code was not clamped."""
    lo, hi = code_bounds(q.bits)
    k = np.rint(np.asarray(x, np.float32) / np.float32(q.v))
    mask = (k >= lo) & (k <= hi)
    return np.where(mask, grad_out, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# redistribution weight quantizer


@dataclass
class RbdWeightQuantizer:
    """Learnable state: per-output-channel scale v_w, per-bit gain s and
    per-bit threshold shift tau_w (shared across the layer)."""

    bits: int
    v_w: Parameter
    s: Parameter
    tau_w: Parameter

    def params(self):
        return [self.v_w, self.s, self.tau_w]


def _greedy_bits(t, bits, s, tau):
    """MSB-to-LSB residual bit decisions on targets t = 2w/v + 1.

    Returns (S, u_stack, r_stack) where u_i = s_i*r_i - tau_i is the pre-sign
    input and r_i the residual before deciding bit i. Stacks are indexed by
    bit position i (index 0 = LSB).
    """
    t = np.asarray(t, np.float32)
    acc = np.zeros_like(t)
    u_stack = np.empty((bits,) + t.shape, np.float32)
    r_stack = np.empty((bits,) + t.shape, np.float32)
    for i in range(bits - 1, -1, -1):
        r = t - acc
        u = np.float32(s[i]) * r - np.float32(tau[i])
        q = np.where(u >= 0, 1.0, -1.0).astype(np.float32)
        acc = acc + np.float32(2**i) * q
        u_stack[i] = u
        r_stack[i] = r
    return acc, u_stack, r_stack


def rbd_weight_init(w, bits, channel_axis=0, name="") -> RbdWeightQuantizer:
    """State from the current weights: a provisional uniform step gives a first
    integer composition S, then v_w is rescaled per channel so the mean
    magnitude of 0.5*(S-1)*v_w matches the mean |w| (guarded fallback when the
    provisional codes are all zero)."""
    w = np.asarray(w, np.float32)
    if w.size == 0:
        raise ValueError("rbd_weight_init: empty weight tensor")
    nch = w.shape[channel_axis]
    flat = np.moveaxis(w, channel_axis, 0).reshape(nch, -1)
    max_abs = np.max(np.abs(flat), axis=1)
    v0 = np.where(max_abs > 0, 2.0 * max_abs / (2.0**bits - 1.0), 1.0).astype(np.float32)
    ones = np.ones(bits, np.float32)
    zeros = np.zeros(bits, np.float32)
    t = 2.0 * flat / v0[:, None] + 1.0
    s_comp, _, _ = _greedy_bits(t, bits, ones, zeros)
    denom = np.mean(np.abs(s_comp - 1.0), axis=1)
    v_hat = np.where(denom > 0, 2.0 * np.mean(np.abs(flat), axis=1) / np.maximum(denom, 1e-30), v0)
    return RbdWeightQuantizer(
        bits=bits,
        v_w=Parameter(v_hat.astype(np.float32), name=f"{name}.quant.v_w"),
        s=Parameter(ones.copy(), name=f"{name}.quant.s"),
        tau_w=Parameter(zeros.copy(), name=f"{name}.quant.tau_w"),
    )


def rbd_weight_quantize(w, q: RbdWeightQuantizer, channel_axis=0):
    """Returns (codes int32, dequant float32, trace) for the current state.

    Codes are (S-1)/2 in {-2^(b-1), ..., 2^(b-1)-1}; dequant = codes * v_w.
    The trace carries the per-bit pre-activations and residuals for backward.
    """
    w = np.asarray(w, np.float32)
    nch = w.shape[channel_axis]
    v = q.v_w.data.reshape((nch,) + (1,) * (w.ndim - 1))
    v = np.moveaxis(v, 0, channel_axis)
    t = 2.0 * w / v + 1.0
    s_comp, u_stack, r_stack = _greedy_bits(t, q.bits, q.s.data, q.tau_w.data)
    codes = ((s_comp - 1.0) / 2.0).astype(np.int32)
    dequant = (0.5 * (s_comp - 1.0) * v).astype(np.float32)
    trace = {"u": u_stack, "r": r_stack, "S": s_comp, "v_bcast": v}
    return codes, dequant, trace


def rbd_weight_backward(grad_out, q: RbdWeightQuantizer, trace, channel_axis=0):
    """Surrogate gradients: sign is relaxed to phi_w per bit, and the residual
    chain is detached (higher-bit decisions carry no gradient). Returns
    (grad_w, grad_v_w, grad_s, grad_tau_w)."""
    go = np.asarray(grad_out, np.float32)
    u, r, s_comp, v = trace["u"], trace["r"], trace["S"], trace["v_bcast"]
    bits = q.bits
    pg = phi_w_grad(u)
    grad_w = np.zeros_like(go)
    grad_s = np.empty(bits, np.float32)
    grad_tau = np.empty(bits, np.float32)
    for i in range(bits):
        pow2 = np.float32(2**i)
        grad_w += go * pow2 * np.float32(q.s.data[i]) * pg[i]
        common = go * (0.5 * pow2) * v * pg[i]
        grad_s[i] = np.sum(common * r[i], dtype=np.float32)
        grad_tau[i] = -np.sum(common, dtype=np.float32)
    gv_elem = go * (0.5 * (s_comp - 1.0))
    axes = tuple(a for a in range(go.ndim) if a != channel_axis)
    grad_v = gv_elem.sum(axis=axes, dtype=np.float32)
    return grad_w.astype(np.float32), grad_v, grad_s, grad_tau


# ---------------------------------------------------------------------------
# redistribution activation quantizer


@dataclass
class RbdActQuantizer:
    """Integrated integer quantizer with learnable step v_a and shift tau_a
    (per tensor). calibrated flips once the step has been set from data."""

    bits: int
    v_a: Parameter
    tau_a: Parameter
    calibrated: bool = field(default=False)

    @classmethod
    def create(cls, bits, name=""):
        return cls(
            bits=bits,
            v_a=Parameter(np.ones((), np.float32), name=f"{name}.quant.v_a"),
            tau_a=Parameter(np.zeros((), np.float32), name=f"{name}.quant.tau_a"),
        )

    def calibrate(self, sample):
        """Step from a sample batch: v_a = 2*max|a|/(2^b - 1)."""
        m = float(np.max(np.abs(sample))) if np.asarray(sample).size else 0.0
        v = 2.0 * m / (2.0**self.bits - 1.0) if m > 0 else 1.0
        self.v_a.value.data[()] = np.float32(v)
        self.calibrated = True

    def params(self):
        return [self.v_a, self.tau_a]


def _act_forward(a, q: RbdActQuantizer):
    lo, hi = code_bounds(q.bits)
    v = max(float(q.v_a.data), SCALE_FLOOR)
    z = ((np.asarray(a, np.float32) + np.float32(q.tau_a.data))
         / np.float32(v)).astype(np.float32)
    k_pre = np.rint(z)
    codes = np.clip(k_pre, lo, hi).astype(np.int32)
    dequant = (codes * np.float32(v)).astype(np.float32)
    return codes, dequant, z, k_pre


def _act_backward(grad_out, q: RbdActQuantizer, z, k_pre):
    lo, hi = code_bounds(q.bits)
    go = np.asarray(grad_out, np.float32)
    inside = (k_pre >= lo) & (k_pre <= hi)
    grad_a = np.where(inside, go * phi_a_grad(z), 0.0).astype(np.float32)
    grad_tau = np.sum(grad_a, dtype=np.float32)
    gv_elem = np.where(
        inside, k_pre - z, np.where(k_pre > hi, float(hi), float(lo))
    )
    grad_v = np.sum(go * gv_elem, dtype=np.float32)
    return grad_a, grad_v.reshape(()), grad_tau.reshape(())


def rbd_act_quantize(a, q: RbdActQuantizer):
    """Forward z = (a + tau_a)/v_a; codes clamp(round(z)); dequant codes*v_a."""
    codes, dequant, _, _ = _act_forward(a, q)
    return codes, dequant


def rbd_act_backward(grad_out, a, q: RbdActQuantizer):
    """Backward-only shaping: inside the clamp range the input gradient is
    grad_out * phi_a_grad(z); outside it is zero. The step gradient follows
    the learned-step-size convention (round(z) - z inside, clamp bound when
    saturated); the shift gradient is the summed input gradient."""
    _, _, z, k_pre = _act_forward(a, q)
    return _act_backward(grad_out, q, z, k_pre)


def project_scale_floor(param: Parameter, floor=SCALE_FLOOR):
    """Keep learnable scales positive after optimizer updates."""
    np.maximum(param.value.data, np.float32(floor), out=param.value.data)


# ---------------------------------------------------------------------------
# tape integration (used by the network layers)


def apply_rbd_weight(w: Parameter, q: RbdWeightQuantizer, tape: Tape | None):
    _, deq, trace = rbd_weight_quantize(w.data, q)
    out = Tensor(deq)
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            gw, gv, gs, gtau = rbd_weight_backward(g, q, trace)
            w.value.accumulate(gw)
            q.v_w.value.accumulate(gv)
            q.s.value.accumulate(gs)
            q.tau_w.value.accumulate(gtau)
        tape.record(_backward)
    return out


def apply_rbd_act(x: Tensor, q: RbdActQuantizer, tape: Tape | None):
    _, deq, z, k_pre = _act_forward(x.data, q)
    out = Tensor(deq)
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            ga, gv, gtau = _act_backward(g, q, z, k_pre)
            x.accumulate(ga)
            q.v_a.value.accumulate(gv)
            q.tau_a.value.accumulate(gtau)
        tape.record(_backward)
    return out


def apply_uniform_weight(w: Parameter, bits: int, tape: Tape | None):
    """Vanilla weight path: the step tracks the current weight range."""
    q = UniformQuantizer.from_data(w.data, bits)
    _, deq = uniform_quantize(w.data, q)
    out = Tensor(deq)
    if tape is not None:
        def _backward():
            if out.grad is not None:
                w.value.accumulate(uniform_backward(out.grad, w.data, q))
        tape.record(_backward)
    return out


def apply_uniform_act(x: Tensor, q: UniformQuantizer, tape: Tape | None):
    """Vanilla activation path: fixed step from one-time calibration."""
    _, deq = uniform_quantize(x.data, q)
    out = Tensor(deq)
    if tape is not None:
        def _backward():
            if out.grad is not None:
                x.accumulate(uniform_backward(out.grad, x.data, q))
        tape.record(_backward)
    return out
