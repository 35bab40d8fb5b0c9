"""Deployable artifact: packed low-bit body plus FP32 head/tail.

Export drops skipped blocks entirely and freezes the quantizers' current
codes. Inference runs the body through the integer convolution path (codes
in, 64-bit accumulation, scale-out), which matches the dequantized float
forward to float32 rounding.
"""

from __future__ import annotations

import numpy as np

from . import backends, checkpoint, imaging, intkernel, quant
from .network import NetworkSpec, SrNetwork, build_student
from .tensor import _shuffle


def _conv_codes_scales(qc):
    """Frozen integer codes + per-output-channel scales for a QuantConv2d."""
    if qc.mode == "rbd":
        codes, _, _ = quant.rbd_weight_quantize(qc.weight.data, qc.wq)
        scales = qc.wq.v_w.data.copy()
    else:
        uq = quant.UniformQuantizer.from_data(qc.weight.data, qc.w_bits)
        codes, _ = quant.uniform_quantize(qc.weight.data, uq)
        scales = np.full(qc.weight.data.shape[0], uq.v, np.float32)
    return codes, scales


def export_packed(net: SrNetwork, path):
    """Write the deployable form of a trained student."""
    if net.mode == "none":
        raise ValueError("export_packed: teacher networks have nothing to pack")
    deployed = sorted(net.retained)
    sections = {}
    tensors = {}
    act_q = {}
    for name, qc in net.quant_convs():
        codes, scales = _conv_codes_scales(qc)
        sections[name] = intkernel.pack_weights(codes, scales, qc.w_bits)
        if qc.mode == "rbd":
            act_q[name] = {
                "v_a": float(qc.aq.v_a.data),
                "tau_a": float(qc.aq.tau_a.data),
            }
        else:
            act_q[name] = {"v_a": float(qc.aq.v), "tau_a": 0.0}
    for p in net.parameters():
        base = p.name.split(".", 1)[0]
        if base.startswith("block"):
            idx = int(base[len("block"):])
            if idx not in net.retained:
                continue  # skipped blocks are omitted entirely
            if ".quant." in p.name:
                continue  # training-only redistribution state
            if p.name.endswith(".weight"):
                continue  # packed above
            tensors[p.name] = p.data
        else:
            tensors[p.name] = p.data
    meta = {
        "spec": net.spec.to_dict(),
        "mode": net.mode,
        "deployed_blocks": deployed,
        "act_quant": act_q,
        "a_bits": net.spec.a_bits,
    }
    checkpoint.save_packed(path, meta, sections, tensors)
    return meta


class PackedNetwork:
    """Integer-path executor for an exported artifact."""

    def __init__(self, meta, sections, tensors):
        self.meta = meta
        self.spec = NetworkSpec.from_dict(meta["spec"])
        self.sections = sections
        self.tensors = tensors
        self.deployed = list(meta["deployed_blocks"])
        self.a_bits = meta["a_bits"]
        self.act_quant = meta["act_quant"]

    @classmethod
    def load(cls, path):
        meta, sections, tensors = checkpoint.load_packed(path)
        return cls(meta, sections, tensors)

    def _fconv(self, x, name):
        return backends.conv2d_fwd(x, self.tensors[f"{name}.weight"])

    def _prelu(self, x, name):
        s = self.tensors[f"{name}.slope"].reshape(1, -1, 1, 1)
        return np.where(x > 0, x, s * x).astype(np.float32)

    def _int_conv(self, x, name):
        aq = self.act_quant[name]
        lo, hi = quant.code_bounds(self.a_bits)
        v = max(aq["v_a"], quant.SCALE_FLOOR)
        z = (x + np.float32(aq["tau_a"])) / np.float32(v)
        codes = np.clip(np.rint(z), lo, hi).astype(np.int32)
        return intkernel.int_conv2d(codes, v, self.sections[name])

    def forward(self, img_hwc):
        """LR HWC float image in [0,1] -> SR HWC float image in [0,1]."""
        x = np.ascontiguousarray(
            img_hwc.transpose(2, 0, 1)[None], dtype=np.float32
        )
        h = self._prelu(self._fconv(x, "head"), "head")
        for i in self.deployed:
            name = f"block{i}"
            alpha = np.float32(self.tensors[f"{name}.alpha"])
            t = self._int_conv(h, f"{name}.conv1")
            t = self._prelu(t, f"{name}.act")
            t = self._int_conv(t, f"{name}.conv2")
            h = t + alpha * h
        stages = {2: 1, 4: 2}[self.spec.upscale]
        for s in range(stages):
            h = self._fconv(h, f"tail.up{s}")
            h = np.ascontiguousarray(_shuffle(h, 2))
            h = self._prelu(h, f"tail.up{s}")
        sr = self._fconv(h, "tail.out")
        return np.clip(sr[0].transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def infer_image(packed_path, image_path, output_path):
    net = PackedNetwork.load(packed_path)
    img = imaging.load_png(image_path)
    sr = net.forward(img)
    imaging.save_png(sr, output_path)
    return sr


def skeleton_from_packed(meta) -> SrNetwork:
    """Topology-only student matching a packed artifact (for accounting)."""
    spec = NetworkSpec.from_dict(meta["spec"])
    net = build_student(spec, seed=0, mode=meta["mode"],
                        target_blocks=len(meta["deployed_blocks"]))
    for i in list(net.retained):
        if i not in meta["deployed_blocks"]:
            net.retained.discard(i)
    return net
