"""Bit-packed weight storage and the integer convolution path.

Codes are b-bit two's complement. Widths 1/2/4/8 pack densely (8/b codes per
byte, little-endian within the byte); width 3 is stored one byte per code.
The integer convolution accumulates code products in 64-bit and applies the
activation step and per-output-channel weight scales afterwards, which matches
the dequantized float convolution up to float32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backends
from .quant import code_bounds

PACKABLE_BITS = (1, 2, 3, 4, 8)


@dataclass
class PackedWeights:
    bits: int
    shape: tuple  # (O, I, Kh, Kw)
    packed: np.ndarray  # uint8 payload
    scales: np.ndarray  # float32 (O,)

    @property
    def num_codes(self):
        return int(np.prod(self.shape))


def packed_nbytes(num_codes, bits):
    if bits == 3:
        return num_codes
    return (num_codes * bits + 7) // 8


def pack_weights(codes, scales, bits) -> PackedWeights:
    if bits not in PACKABLE_BITS:
        raise ValueError(f"unsupported packed bit-width {bits}; supported: {PACKABLE_BITS}")
    codes = np.asarray(codes)
    if codes.ndim != 4:
        raise ValueError(f"pack_weights: expected OIKK codes, got {codes.ndim}-d")
    lo, hi = code_bounds(bits)
    flat = codes.reshape(-1).astype(np.int64)
    bad = np.nonzero((flat < lo) | (flat > hi))[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"pack_weights: code {int(flat[i])} at flat index {i} outside "
            f"[{lo}, {hi}] for {bits}-bit"
        )
    scales = np.asarray(scales, np.float32).reshape(-1)
    if scales.shape[0] != codes.shape[0]:
        raise ValueError(
            f"pack_weights: {scales.shape[0]} scales for {codes.shape[0]} output channels"
        )
    twos = (flat & ((1 << bits) - 1)).astype(np.uint8)
    if bits == 3:
        payload = twos
    else:
        per_byte = 8 // bits
        n = flat.size
        padded = np.zeros(packed_nbytes(n, bits) * per_byte, np.uint8)
        padded[:n] = twos
        groups = padded.reshape(-1, per_byte).astype(np.uint16)
        shifts = np.arange(per_byte, dtype=np.uint16) * bits
        payload = (groups << shifts).sum(axis=1).astype(np.uint8)
    return PackedWeights(bits=bits, shape=tuple(codes.shape), packed=payload,
                         scales=scales.copy())


def unpack_weights(pw: PackedWeights):
    """Inverse of pack_weights: returns (codes int32 OIKK, scales)."""
    bits = pw.bits
    n = pw.num_codes
    if bits == 3:
        raw = pw.packed[:n].astype(np.int32)
    else:
        per_byte = 8 // bits
        shifts = np.arange(per_byte, dtype=np.uint8) * bits
        vals = (pw.packed[:, None] >> shifts) & ((1 << bits) - 1)
        raw = vals.reshape(-1)[:n].astype(np.int32)
    # sign extension from b-bit two's complement
    sign_bit = 1 << (bits - 1)
    codes = np.where(raw >= sign_bit, raw - (1 << bits), raw).astype(np.int32)
    return codes.reshape(pw.shape), pw.scales.copy()


def int_conv2d(act_codes, act_scale, pw: PackedWeights):
    """Integer-accumulated convolution, scaled back to float.

    act_codes: int32 NCHW activation codes with step act_scale.
    Returns float32 NOHW equal to the dequantized float convolution.
    """
    act_codes = np.ascontiguousarray(act_codes, dtype=np.int32)
    codes, scales = unpack_weights(pw)
    cin, k = pw.shape[1], pw.shape[2]
    if act_codes.shape[1] != cin:
        raise ValueError(
            f"int_conv2d: activations have {act_codes.shape[1]} channels, "
            f"weights expect {cin}"
        )
    amax = int(np.max(np.abs(act_codes))) if act_codes.size else 0
    wmax = 1 << (pw.bits - 1)
    bound = cin * k * k * max(amax, 1) * wmax
    if bound >= 2**63:
        raise OverflowError(
            f"int_conv2d: accumulator bound {bound} exceeds 64-bit range"
        )
    acc = backends.int_conv2d_fwd(act_codes, codes.astype(np.int8))
    out = acc.astype(np.float32) * np.float32(act_scale) * scales.reshape(1, -1, 1, 1)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# efficiency accounting


def accounting(net, input_hw=(256, 256)):
    """Parameter / storage / MAC report for the deployed (retained) topology.

    Reductions are against the same topology held in FP32. MACs are counted
    once per multiply-accumulate; the effective-op column weights each
    quantized-layer MAC by w_bits/32 so that reductions shrink as bit-width
    grows. PReLU slopes, shortcut scales and quantizer parameters are counted
    in params and storage at FP32.
    """
    w_bits = net.spec.w_bits
    rows = []
    params_total = 0
    params_bits = 0
    storage_bytes = 0
    fp_storage = 0
    ops_mac = 0
    ops_eff = 0.0
    body_params = 0
    body_bytes = 0
    for name, cout, cin, k, h, w, quantized in net.layer_summary(input_hw):
        n_params = cout * cin * k * k
        macs = n_params * h * w
        bits = w_bits if quantized else 32
        if quantized:
            nbytes = packed_nbytes(n_params, w_bits) + 4 * cout  # codes + scales
            body_params += n_params
            body_bytes += nbytes
        else:
            nbytes = 4 * n_params
        rows.append({"name": name, "params": n_params, "macs": macs, "bits": bits})
        params_total += n_params
        params_bits += n_params * bits
        storage_bytes += nbytes
        fp_storage += 4 * n_params
        ops_mac += macs
        ops_eff += macs * (bits / 32.0)
    # Pointwise/scalar parameters of the deployed form: PReLU slopes, shortcut
    # scales, weight scales v_w and activation quantizer state. Per-bit gains
    # and shifts (.quant.s / .quant.tau_w) are training-only and not deployed.
    training_only = (".quant.s", ".quant.tau_w")
    extras = [
        p
        for p in net.parameters()
        if not p.name.endswith(".weight")
        and not p.name.endswith(training_only)
        and not _is_skipped(net, p.name)
    ]
    n_extra = sum(p.data.size for p in extras)
    # v_w bytes already live inside the packed rows as per-channel scales
    n_extra_storage = sum(
        p.data.size for p in extras if not p.name.endswith(".quant.v_w")
    )
    # the FP32 counterpart carries no quantizer state at all
    n_extra_fp = sum(p.data.size for p in extras if ".quant." not in p.name)
    params_total += n_extra
    params_bits += 32 * n_extra
    storage_bytes += 4 * n_extra_storage
    fp_storage += 4 * n_extra_fp
    fp_bits = 32 * params_total
    return {
        "input_hw": tuple(input_hw),
        "params_total": params_total,
        "params_bits": params_bits,
        "storage_bytes": storage_bytes,
        "fp32_storage_bytes": fp_storage,
        "body_params": body_params,
        "body_storage_bytes": body_bytes,
        "ops_mac": ops_mac,
        "ops_effective": ops_eff,
        "reduction_params_pct": 100.0 * (1.0 - params_bits / fp_bits),
        "reduction_storage_pct": 100.0 * (1.0 - storage_bytes / fp_storage),
        "reduction_ops_pct": 100.0 * (1.0 - ops_eff / ops_mac),
        "layers": rows,
    }


def _is_skipped(net, pname):
    if not pname.startswith("block"):
        return False
    idx = pname.split(".", 1)[0][len("block"):]
    return idx.isdigit() and int(idx) not in net.retained


# Published whole-model reductions for the reference SRResNet x4 protocol
# (64 channels, 16 deployed blocks, FP32 head/tail, 3x256x256 input); kept as
# metadata for side-by-side display, not as computed targets.
REFERENCE_REDUCTIONS = {
    (4, 4): {"params_pct": 80.0, "ops_pct": 77.5},
    (2, 2): {"params_pct": 89.4, "ops_pct": 87.9},
}
