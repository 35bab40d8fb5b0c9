"""SRResNet-style backbone with a slimmable quantized body.

Topology: a full-precision head conv (3 -> C) with PReLU, a body of residual
blocks Phi_i(x) = conv2(prelu(conv1(x))) + alpha_i * x whose convolutions are
quantized in the student, and a full-precision tail (conv + pixel-shuffle per
x2 stage, then conv C -> 3). All kernels are 3x3. Skipped blocks pass
features through unchanged and are dropped entirely at export.

Blocks are 1-indexed everywhere a block index crosses a module boundary
(ranking, skipping, distillation masks, logs).
"""

from __future__ import annotations

import numpy as np

from . import quant, tensor
from .tensor import Parameter, Tape, Tensor


class NetworkSpec:
    """Architecture + bit-width description.

    blocks is the student's initial body depth (2N when slimming to N);
    it must be even so that a 50% slimming target exists.
    """

    def __init__(self, channels, blocks, upscale, w_bits=32, a_bits=32):
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        if blocks < 2 or blocks % 2 != 0:
            raise ValueError(f"blocks must be even and >= 2, got {blocks}")
        if upscale not in (2, 4):
            raise ValueError(f"upscale must be 2 or 4, got {upscale}")
        for b, what in ((w_bits, "w_bits"), (a_bits, "a_bits")):
            if not 1 <= b <= 8 and b != 32:
                raise ValueError(f"{what} must be in 1..8 or 32, got {b}")
        self.channels = channels
        self.blocks = blocks
        self.upscale = upscale
        self.w_bits = w_bits
        self.a_bits = a_bits

    def to_dict(self):
        return {
            "channels": self.channels,
            "blocks": self.blocks,
            "upscale": self.upscale,
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _he_init(rng, cout, cin, k):
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)


class Conv2d:
    """Full-precision 3x3 convolution."""

    def __init__(self, rng, cin, cout, name, k=3):
        self.weight = Parameter(_he_init(rng, cout, cin, k), name=f"{name}.weight")
        self.name = name

    def forward(self, x, tape=None):
        return tensor.conv2d(x, self.weight.value, tape)

    def params(self):
        return [self.weight]


class QuantConv2d:
    """Quantized 3x3 convolution: the incoming activations and the latent
    weights both pass through their quantizers before the convolution.

    mode 'rbd' uses the learnable redistribution quantizers; 'uniform' is the
    vanilla baseline (dynamic per-tensor weight step, frozen calibrated
    activation step, plain straight-through gradients).
    """

    def __init__(self, rng, cin, cout, name, mode, w_bits, a_bits, k=3):
        self.weight = Parameter(_he_init(rng, cout, cin, k), name=f"{name}.weight")
        self.name = name
        self.mode = mode
        self.w_bits = w_bits
        self.a_bits = a_bits
        self.wq = None
        if mode == "rbd":
            self.aq = quant.RbdActQuantizer.create(a_bits, name=name)
        else:
            self.aq = quant.UniformQuantizer(bits=a_bits, v=1.0)
        self.aq_calibrated = False

    def init_weight_quantizer(self):
        if self.mode == "rbd":
            self.wq = quant.rbd_weight_init(self.weight.data, self.w_bits, name=self.name)

    def calibrate(self, x: Tensor) -> Tensor:
        """Collect the activation step from x, then run the conv with the
        activation path un-quantized (weights stay quantized)."""
        if self.mode == "rbd":
            self.aq.calibrate(x.data)
        else:
            self.aq = quant.UniformQuantizer.from_data(x.data, self.a_bits)
        self.aq_calibrated = True
        w_deq = self._quantized_weight(None)
        return tensor.conv2d(x, w_deq, None)

    def _quantized_weight(self, tape):
        if self.mode == "rbd":
            return quant.apply_rbd_weight(self.weight, self.wq, tape)
        return quant.apply_uniform_weight(self.weight, self.w_bits, tape)

    def forward(self, x, tape=None):
        if self.mode == "rbd":
            xq = quant.apply_rbd_act(x, self.aq, tape)
        else:
            xq = quant.apply_uniform_act(x, self.aq, tape)
        w_deq = self._quantized_weight(tape)
        return tensor.conv2d(xq, w_deq, tape)

    def params(self):
        out = [self.weight]
        if self.mode == "rbd":
            if self.wq is not None:  # not yet derived during weight copy
                out += self.wq.params()
            out += self.aq.params()
        return out


class PReLU:
    def __init__(self, channels, name, init=0.25):
        self.slope = Parameter(np.full(channels, init, np.float32), name=f"{name}.slope")

    def forward(self, x, tape=None):
        return tensor.prelu(x, self.slope, tape)

    def params(self):
        return [self.slope]


class ResBlock:
    """Phi(x) = conv2(prelu(conv1(x))) + alpha * x."""

    def __init__(self, rng, channels, name, mode, w_bits, a_bits, learn_alpha):
        conv_cls = Conv2d if mode == "none" else QuantConv2d
        kw = {} if mode == "none" else {"mode": mode, "w_bits": w_bits, "a_bits": a_bits}
        self.conv1 = conv_cls(rng, channels, channels, f"{name}.conv1", **kw)
        self.act = PReLU(channels, f"{name}.act")
        self.conv2 = conv_cls(rng, channels, channels, f"{name}.conv2", **kw)
        self.alpha = Parameter(np.ones((), np.float32), name=f"{name}.alpha",
                               trainable=learn_alpha)
        self.name = name

    def forward(self, x, tape=None):
        h = self.conv1.forward(x, tape)
        h = self.act.forward(h, tape)
        h = self.conv2.forward(h, tape)
        return tensor.add_scaled(h, x, self.alpha, tape)

    def params(self):
        return self.conv1.params() + self.act.params() + self.conv2.params() + [self.alpha]

    def freeze(self):
        for p in self.params():
            p.trainable = False


class SrNetwork:
    """Teacher (mode 'none') or quantized student (mode 'rbd'/'uniform')."""

    def __init__(self, spec: NetworkSpec, mode, rng, min_retained=None):
        self.spec = spec
        self.mode = mode
        c = spec.channels
        quantized = mode != "none"
        self.head = Conv2d(rng, 3, c, "head")
        self.head_act = PReLU(c, "head")
        self.blocks = [
            ResBlock(rng, c, f"block{i}", mode, spec.w_bits, spec.a_bits,
                     learn_alpha=quantized)
            for i in range(1, spec.blocks + 1)
        ]
        stages = {2: 1, 4: 2}[spec.upscale]
        self.tail_convs = [
            Conv2d(rng, c, 4 * c, f"tail.up{s}") for s in range(stages)
        ]
        self.tail_acts = [PReLU(c, f"tail.up{s}") for s in range(stages)]
        self.tail_out = Conv2d(rng, c, 3, "tail.out")
        self.retained = set(range(1, spec.blocks + 1))
        self.min_retained = min_retained if min_retained is not None else spec.blocks // 2

    # -- forward ------------------------------------------------------------

    def features(self, x: Tensor, tape=None):
        h = self.head.forward(x, tape)
        return self.head_act.forward(h, tape)

    def forward(self, x: Tensor, tape: Tape | None = None):
        """Returns (sr, block_outputs); block_outputs has one entry per block
        position, recording the passthrough feature at skipped positions."""
        h = self.features(x, tape)
        outs = []
        for i, blk in enumerate(self.blocks, start=1):
            if i in self.retained:
                h = blk.forward(h, tape)
            outs.append(h)
        for conv, act in zip(self.tail_convs, self.tail_acts):
            h = conv.forward(h, tape)
            h = tensor.pixel_shuffle(h, 2, tape)
            h = act.forward(h, tape)
        sr = self.tail_out.forward(h, tape)
        sr.check_finite("network output")
        return sr, outs

    def calibrate_activations(self, x: Tensor):
        """One forward that sets every activation quantizer's step from the
        full-precision features reaching it (weights already quantized)."""
        if self.mode == "none":
            return
        h = self.features(x, None)
        for i, blk in enumerate(self.blocks, start=1):
            if i not in self.retained:
                continue
            t = blk.conv1.calibrate(h)
            t = blk.act.forward(t, None)
            t = blk.conv2.calibrate(t)
            h = tensor.add_scaled(t, h, blk.alpha, None)

    # -- structure ----------------------------------------------------------

    def modules(self):
        mods = [self.head, self.head_act]
        for blk in self.blocks:
            mods.append(blk)
        mods += self.tail_convs + self.tail_acts + [self.tail_out]
        return mods

    def parameters(self):
        out = self.head.params() + self.head_act.params()
        for blk in self.blocks:
            out += blk.params()
        for conv in self.tail_convs:
            out += conv.params()
        for act in self.tail_acts:
            out += act.params()
        out += self.tail_out.params()
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def quant_convs(self):
        """(name, QuantConv2d) pairs for retained blocks, forward order."""
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            if i in self.retained and isinstance(blk.conv1, QuantConv2d):
                out.append((blk.conv1.name, blk.conv1))
                out.append((blk.conv2.name, blk.conv2))
        return out

    def init_weight_quantizers(self):
        for _, qc in self.quant_convs():
            qc.init_weight_quantizer()

    # -- slimming -----------------------------------------------------------

    def rank_alpha(self):
        """Retained block indices by descending alpha; ties keep index order."""
        if not self.retained:
            raise ValueError("rank_alpha: no retained blocks")
        items = sorted(self.retained)
        return sorted(items, key=lambda i: (-float(self.blocks[i - 1].alpha.data), i))

    def apply_skip(self, index):
        """Remove a block from the retained set and freeze its parameters."""
        if index not in self.retained:
            raise ValueError(f"apply_skip: block {index} is not retained")
        if len(self.retained) - 1 < self.min_retained:
            raise ValueError(
                f"apply_skip: would drop below the target of {self.min_retained} blocks"
            )
        self.retained.discard(index)
        self.blocks[index - 1].freeze()

    # -- summaries ----------------------------------------------------------

    def layer_summary(self, input_hw=(256, 256)):
        """Per-conv (name, cout, cin, k, h, w, quantized) at a given LR input
        size, covering only the deployed (retained) topology."""
        h, w = input_hw
        c = self.spec.channels
        rows = [("head", c, 3, 3, h, w, False)]
        for i in sorted(self.retained):
            rows.append((f"block{i}.conv1", c, c, 3, h, w, self.mode != "none"))
            rows.append((f"block{i}.conv2", c, c, 3, h, w, self.mode != "none"))
        hh, ww = h, w
        for s in range(len(self.tail_convs)):
            rows.append((f"tail.up{s}", 4 * c, c, 3, hh, ww, False))
            hh, ww = hh * 2, ww * 2
        rows.append(("tail.out", 3, c, 3, hh, ww, False))
        return rows


def build_teacher(spec: NetworkSpec, seed=0, blocks=None) -> SrNetwork:
    """Full-precision reference network with alpha fixed at 1."""
    nb = spec.blocks if blocks is None else blocks
    fp = NetworkSpec(spec.channels, nb, spec.upscale, 32, 32)
    rng = np.random.default_rng(seed)
    return SrNetwork(fp, "none", rng, min_retained=fp.blocks)


def build_student(spec: NetworkSpec, seed=0, mode="rbd", teacher=None,
                  target_blocks=None) -> SrNetwork:
    """Quantized network, optionally warm-started from a teacher of the same
    depth (weights are copied before the weight quantizers are derived).
    Activation quantizers still need calibrate_activations on a sample batch.
    """
    if mode not in ("rbd", "uniform"):
        raise ValueError(f"build_student: mode must be rbd or uniform, got {mode!r}")
    target = target_blocks if target_blocks is not None else spec.blocks // 2
    if not 1 <= target <= spec.blocks:
        raise ValueError(
            f"target_blocks must be in 1..{spec.blocks}, got {target}")
    rng = np.random.default_rng(seed)
    net = SrNetwork(spec, mode, rng, min_retained=target)
    if teacher is not None:
        if teacher.spec.blocks != spec.blocks or teacher.spec.channels != spec.channels:
            raise ValueError(
                f"teacher topology {teacher.spec.blocks}x{teacher.spec.channels}ch does "
                f"not match student {spec.blocks}x{spec.channels}ch")
        copy_weights(teacher, net)
    net.init_weight_quantizers()
    return net


def copy_weights(src: SrNetwork, dst: SrNetwork):
    """Copy every identically named parameter value (conv weights, slopes)."""
    by_name = {p.name: p for p in src.parameters()}
    for p in dst.parameters():
        other = by_name.get(p.name)
        if other is not None and other.data.shape == p.data.shape:
            p.value.data[...] = other.data


def reference_forward(net: SrNetwork, x: Tensor):
    """Literal bracketed composition: every block position contributes
    [retained]*Phi_i(x) + [skipped]*x. Used as the equivalence oracle."""
    h = net.features(x, None)
    outs = []
    for i, blk in enumerate(net.blocks, start=1):
        kept = 1.0 if i in net.retained else 0.0
        phi = blk.forward(h, None)
        h = Tensor(np.float32(kept) * phi.data + np.float32(1.0 - kept) * h.data)
        outs.append(h)
    for conv, act in zip(net.tail_convs, net.tail_acts):
        h = conv.forward(h, None)
        h = tensor.pixel_shuffle(h, 2, None)
        h = act.forward(h, None)
    return net.tail_out.forward(h, None), outs
