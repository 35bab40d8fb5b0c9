"""Quantization-aware training loop.

One code path trains both the full-precision teacher (no quantizers, no
distillation, no slimming) and the quantized student. Determinism contract:
given (seed, config, dataset) the metric log is identical across runs, and a
run interrupted at any iteration and resumed from its checkpoint reproduces
the uninterrupted log bit for bit. RNG streams are split per purpose (weight
init / patch sampling / augmentation / calibration) so ablation variants see
the same data order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint, distill, imaging
from .network import NetworkSpec, SrNetwork, build_student, build_teacher
from .quant import project_scale_floor
from .slimming import FINALIZE, SLIM, MetricHistory, SlimmingSchedule
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    spec: NetworkSpec
    total_iters: int = 2000
    batch_size: int = 4
    patch_size: int = 16  # LR pixels
    lr_init: float = 2e-4
    lr_halve_frac: float = 250.0 / 300.0
    lam: float = 1e-4
    seed: int = 0
    eval_interval: int = 0  # 0 -> derived below
    target_blocks: int = 0  # 0 -> spec.blocks // 2
    rbd: bool = True
    qsa: bool = True
    sfd: bool = True

    def __post_init__(self):
        for name in ("total_iters", "batch_size", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lr_init <= 0 or not 0 < self.lr_halve_frac <= 1:
            raise ValueError("TrainConfig: bad learning-rate schedule")
        if self.lam < 0:
            raise ValueError("TrainConfig.lam must be >= 0")
        if self.target_blocks == 0:
            self.target_blocks = self.spec.blocks // 2
        if not 1 <= self.target_blocks <= self.spec.blocks:
            raise ValueError("TrainConfig.target_blocks out of range")
        if not self.qsa and self.target_blocks % 2 != 0:
            raise ValueError(
                "TrainConfig: without slimming the student is built directly at "
                "target_blocks, which must be even")

    @property
    def initial_blocks(self):
        """Student depth at iteration 0: the over-parameterized size under
        slimming, the deployed size otherwise."""
        return self.spec.blocks if self.qsa else self.target_blocks

    def derived_eval_interval(self):
        if self.eval_interval > 0:
            return self.eval_interval
        if self.qsa:
            cap = int(round(0.8 * self.total_iters / self.target_blocks))
            return max(1, cap // 10)
        return max(1, self.total_iters // 10)

    def to_dict(self):
        d = self.__dict__.copy()
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["spec"] = NetworkSpec.from_dict(d["spec"])
        return cls(**d)


def lr_at(iteration, config: TrainConfig):
    """Step schedule: lr_init up to the halving point, half afterwards."""
    halve_iter = int(round(config.lr_halve_frac * config.total_iters))
    return config.lr_init / 2.0 if iteration > halve_iter else config.lr_init


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a fixed parameter list; parameters whose
    trainable flag is cleared mid-run (frozen blocks) stop being updated but
    keep their moment state."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value.data -= (lr * update).astype(np.float32)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(params, grads, state: Adam, lr):
    """Single functional-style step: writes grads onto params then updates."""
    for p, g in zip(params, grads):
        p.value.grad = np.asarray(g, np.float32)
    state.step(lr)
    state.zero_grad()


# ---------------------------------------------------------------------------
# data plumbing


class PairDataset:
    """HR PNG directory with LR counterparts, read from a sibling LR_x{s}
    directory when present and generated bicubically otherwise."""

    def __init__(self, hr_dir, scale):
        self.scale = scale
        names = sorted(
            n for n in os.listdir(hr_dir) if n.lower().endswith(".png")
        )
        if not names:
            raise ValueError(f"no PNG images under {hr_dir}")
        lr_dir = os.path.join(os.path.dirname(os.path.abspath(hr_dir)), f"LR_x{scale}")
        self.pairs = []
        for n in names:
            hr = imaging.modcrop(imaging.load_png(os.path.join(hr_dir, n)), scale)
            lr_path = os.path.join(lr_dir, n)
            if os.path.isfile(lr_path):
                lr = imaging.load_png(lr_path)
            else:
                lr = imaging.bicubic_resize(hr, 1.0 / scale)
            self.pairs.append((lr, hr, n))

    def __len__(self):
        return len(self.pairs)


def _to_nchw(images):
    return np.ascontiguousarray(
        np.stack([im.transpose(2, 0, 1) for im in images]), dtype=np.float32
    )


def sample_batch(dataset: PairDataset, patch, batch, rng_sample, rng_aug):
    lrs, hrs = [], []
    for _ in range(batch):
        lr, hr, _ = dataset.pairs[int(rng_sample.integers(0, len(dataset)))]
        pair = imaging.sample_patch(hr, dataset.scale, patch, rng_sample, lr_img=lr)
        pair = imaging.augment(pair, rng_aug)
        lrs.append(pair.lr)
        hrs.append(pair.hr)
    return Tensor(_to_nchw(lrs)), Tensor(_to_nchw(hrs))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(net: SrNetwork, val_pairs, shave=None, with_ssim=True):
    """Mean Y-channel PSNR/SSIM over (lr, hr) pairs; no parameter mutation.
    The training loop polls with with_ssim=False (recovery only needs PSNR)."""
    if not val_pairs:
        raise ValueError("evaluate: empty validation set")
    shave = net.spec.upscale if shave is None else shave
    psnrs, ssims = [], []
    for lr, hr in val_pairs:
        sr, _ = net.forward(Tensor(_to_nchw([lr])), None)
        sr_img = np.clip(sr.data[0].transpose(1, 2, 0), 0.0, 1.0)
        psnrs.append(imaging.psnr(sr_img, hr, shave))
        if with_ssim:
            ssims.append(imaging.ssim(sr_img, hr, shave))
    out = {"psnr_db": float(np.mean(psnrs))}
    out["ssim"] = float(np.mean(ssims)) if with_ssim else float("nan")
    return out


# ---------------------------------------------------------------------------
# training state (everything a resume needs)


@dataclass
class TrainState:
    config: TrainConfig
    net: SrNetwork
    teacher: SrNetwork | None
    adam: Adam
    schedule: SlimmingSchedule | None
    history: MetricHistory
    rng_sample: np.random.Generator
    rng_aug: np.random.Generator
    iteration: int = 0
    metrics_rows: list = field(default_factory=list)
    event_rows: list = field(default_factory=list)
    distill_rows: list = field(default_factory=list)  # (iter, per-term values)
    kind: str = "student"


def _rng_streams(seed):
    ss = np.random.SeedSequence(seed)
    init_s, sample_s, aug_s, calib_s = ss.spawn(4)
    return (
        init_s.generate_state(1)[0],
        np.random.default_rng(sample_s),
        np.random.default_rng(aug_s),
        np.random.default_rng(calib_s),
    )


def init_teacher_training(config: TrainConfig, dataset: PairDataset) -> TrainState:
    init_seed, rng_sample, rng_aug, _ = _rng_streams(config.seed)
    net = build_teacher(config.spec, seed=init_seed, blocks=config.initial_blocks)
    adam = Adam(net.trainable_parameters())
    cfg = replace(config, qsa=False, sfd=False, lam=0.0,
                  target_blocks=config.initial_blocks)
    return TrainState(config=cfg, net=net, teacher=None, adam=adam, schedule=None,
                      history=MetricHistory(), rng_sample=rng_sample,
                      rng_aug=rng_aug, kind="teacher")


def init_student_training(config: TrainConfig, dataset: PairDataset,
                          teacher: SrNetwork | None) -> TrainState:
    if config.sfd and teacher is None:
        raise ValueError("distillation is enabled but no teacher was given")
    init_seed, rng_sample, rng_aug, rng_calib = _rng_streams(config.seed)
    spec = NetworkSpec(config.spec.channels, config.initial_blocks,
                       config.spec.upscale, config.spec.w_bits, config.spec.a_bits)
    mode = "rbd" if config.rbd else "uniform"
    net = build_student(spec, seed=init_seed, mode=mode, teacher=teacher,
                        target_blocks=config.target_blocks)
    calib_lr, _ = sample_batch(dataset, config.patch_size, config.batch_size,
                               rng_calib, rng_calib)
    net.calibrate_activations(calib_lr)
    for _, qc in net.quant_convs():
        qc.aq_calibrated = True
    adam = Adam(net.trainable_parameters())
    schedule = None
    if config.qsa and config.initial_blocks > config.target_blocks:
        schedule = SlimmingSchedule(config.total_iters, config.initial_blocks,
                                    config.target_blocks)
    use_teacher = teacher if config.sfd else None
    return TrainState(config=config, net=net, teacher=use_teacher, adam=adam,
                      schedule=schedule, history=MetricHistory(),
                      rng_sample=rng_sample, rng_aug=rng_aug, kind="student")


# ---------------------------------------------------------------------------
# the loop


def _param_norms(net, limit=6):
    norms = [
        f"{p.name}={float(np.linalg.norm(p.data)):.3e}" for p in net.parameters()
    ]
    return ", ".join(norms[:limit]) + (" ..." if len(norms) > limit else "")


def train_step(state: TrainState, lr_batch: Tensor, hr_batch: Tensor):
    """One forward/backward/update. Returns {loss, l_pix, l_sfd}."""
    cfg = state.config
    tape = Tape()
    sr, student_outs = state.net.forward(lr_batch, tape)
    l_sfd = None
    sfd_terms = []
    if state.teacher is not None and cfg.lam > 0:
        _, teacher_outs = state.teacher.forward(lr_batch, None)
        mask = distill.sfd_mask(state.net.retained, len(state.net.blocks))
        l_sfd, sfd_terms = distill.sfd_loss_terms(teacher_outs, student_outs, mask, tape)
    total, l_pix = distill.total_loss(sr, hr_batch, l_sfd, cfg.lam, tape)
    loss_val = float(total.data)
    if not np.isfinite(loss_val):
        raise RuntimeError(
            f"non-finite loss at iteration {state.iteration}: "
            f"param norms {_param_norms(state.net)}"
        )
    tape.backward(total)
    state.adam.step(lr_at(state.iteration, cfg))
    state.adam.zero_grad()
    for _, qc in state.net.quant_convs():
        if qc.mode == "rbd":
            project_scale_floor(qc.wq.v_w)
            project_scale_floor(qc.aq.v_a)
    return {
        "loss": loss_val,
        "l_pix": float(l_pix.data),
        "l_sfd": float(l_sfd.data) if l_sfd is not None else 0.0,
        "sfd_terms": sfd_terms,
    }


def run_training(state: TrainState, dataset: PairDataset, val_pairs,
                 stop_after=None, log_fn=None):
    """Advance training to total_iters (or stop_after). Mutates state."""
    cfg = state.config
    eval_interval = cfg.derived_eval_interval()
    end = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
    while state.iteration < end:
        state.iteration += 1
        it = state.iteration
        lr_batch, hr_batch = sample_batch(
            dataset, cfg.patch_size, cfg.batch_size, state.rng_sample, state.rng_aug
        )
        metrics = train_step(state, lr_batch, hr_batch)
        psnr_now = None
        if it % eval_interval == 0 or it == cfg.total_iters:
            psnr_now = evaluate(state.net, val_pairs, with_ssim=False)["psnr_db"]
            state.history.add(it, psnr_now)
            if metrics["sfd_terms"]:
                state.distill_rows.append((it, metrics["sfd_terms"]))
        event = ""
        if state.schedule is not None:
            action = state.schedule.tick(it, state.history)
            if action == SLIM:
                if psnr_now is None:
                    psnr_now = evaluate(state.net, val_pairs, with_ssim=False)["psnr_db"]
                    state.history.add(it, psnr_now)
                state.schedule.record_pre_slim(psnr_now)
                block = state.net.rank_alpha()[0]
                alpha = float(state.net.blocks[block - 1].alpha.data)
                state.net.apply_skip(block)
                state.schedule.on_slim(it)
                event = f"slim:block{block}"
                state.event_rows.append((it, "slim", block, alpha, psnr_now))
            elif action == FINALIZE:
                event = "finalize"
                state.event_rows.append((it, "finalize", 0, 0.0, psnr_now or 0.0))
        state.metrics_rows.append((
            it, lr_at(it, cfg), metrics["loss"], metrics["l_pix"],
            metrics["l_sfd"], psnr_now if psnr_now is not None else "", event,
        ))
        if log_fn is not None:
            log_fn(state.metrics_rows[-1])
    return state


METRICS_HEADER = "iter,lr,loss,l_pix,l_sfd,psnr,event"


def write_metrics_csv(path, rows):
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in rows:
            f.write(",".join(str(x) for x in r) + "\n")


def write_events_log(path, rows):
    with open(path, "w") as f:
        for it, event, block, alpha, psnr_v in rows:
            f.write(f"{it},{event},{block},{alpha:.6g},{psnr_v:.6g}\n")


def write_distill_log(path, rows):
    """Per-term distillation losses at each evaluation interval."""
    with open(path, "w") as f:
        for it, terms in rows:
            f.write(f"{it}," + ",".join(f"{t:.6g}" for t in terms) + "\n")


# ---------------------------------------------------------------------------
# checkpointing


def save_training_checkpoint(state: TrainState, path):
    tensors = {}
    for p in state.net.parameters():
        tensors[f"param.{p.name}"] = p.data
    for p, m, v in zip(state.adam.params, state.adam.m, state.adam.v):
        tensors[f"adam.m.{p.name}"] = m
        tensors[f"adam.v.{p.name}"] = v
    for _, qc in state.net.quant_convs():
        if qc.mode == "uniform":
            tensors[f"extra.{qc.name}.uniform_va"] = np.float32(qc.aq.v)
    meta = {
        "kind": state.kind,
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "retained": sorted(state.net.retained),
        "min_retained": state.net.min_retained,
        "schedule": state.schedule.to_dict() if state.schedule else None,
        "history": state.history.entries,
        "metrics_rows": [list(r) for r in state.metrics_rows],
        "event_rows": [list(r) for r in state.event_rows],
        "distill_rows": [[it, list(t)] for it, t in state.distill_rows],
        "rng_sample": state.rng_sample.bit_generator.state,
        "rng_aug": state.rng_aug.bit_generator.state,
    }
    checkpoint.save_checkpoint(path, meta, tensors)


def _restore_net_params(net, tensors):
    for p in net.parameters():
        key = f"param.{p.name}"
        if key not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint missing tensor {key}")
        p.value.data[...] = tensors[key].astype(np.float32).reshape(p.data.shape)


def load_teacher(path) -> SrNetwork:
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta["kind"] != "teacher":
        raise checkpoint.CheckpointError(f"{path} is a {meta['kind']} checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    net = build_teacher(cfg.spec, seed=0, blocks=cfg.initial_blocks)
    _restore_net_params(net, tensors)
    return net


def load_student(path):
    """Rebuilds the student network (topology + parameters) for evaluation,
    export, or resume. Returns (net, meta, tensors)."""
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta["kind"] != "student":
        raise checkpoint.CheckpointError(f"{path} is a {meta['kind']} checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    spec = NetworkSpec(cfg.spec.channels, cfg.initial_blocks, cfg.spec.upscale,
                       cfg.spec.w_bits, cfg.spec.a_bits)
    mode = "rbd" if cfg.rbd else "uniform"
    net = build_student(spec, seed=0, mode=mode, target_blocks=cfg.target_blocks)
    retained = set(meta["retained"])
    for i in range(1, spec.blocks + 1):
        if i not in retained and i in net.retained:
            net.retained.discard(i)
            net.blocks[i - 1].freeze()
    _restore_net_params(net, tensors)
    for _, qc in net.quant_convs():
        qc.aq_calibrated = True
        if qc.mode == "uniform":
            key = f"extra.{qc.name}.uniform_va"
            if key in tensors:
                qc.aq.v = float(tensors[key])
    return net, meta, tensors


def resume_student_training(path, dataset: PairDataset,
                            teacher: SrNetwork | None = None) -> TrainState:
    net, meta, tensors = load_student(path)
    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.sfd and teacher is None:
        raise ValueError("checkpoint was trained with distillation; pass the teacher")
    adam = Adam(net.trainable_parameters())
    # the trainable set shrinks as blocks freeze; adam state is keyed by name
    by_name = {p.name: i for i, p in enumerate(adam.params)}
    for name, arr in tensors.items():
        for prefix, store in (("adam.m.", adam.m), ("adam.v.", adam.v)):
            if name.startswith(prefix) and name[len(prefix):] in by_name:
                store[by_name[name[len(prefix):]]][...] = arr
    adam.t = meta["adam_t"]
    schedule = SlimmingSchedule.from_dict(meta["schedule"]) if meta["schedule"] else None
    history = MetricHistory([tuple(e) for e in meta["history"]])
    rng_sample = np.random.default_rng()
    rng_sample.bit_generator.state = meta["rng_sample"]
    rng_aug = np.random.default_rng()
    rng_aug.bit_generator.state = meta["rng_aug"]
    use_teacher = teacher if cfg.sfd else None
    state = TrainState(config=cfg, net=net, teacher=use_teacher, adam=adam,
                       schedule=schedule, history=history,
                       rng_sample=rng_sample, rng_aug=rng_aug,
                       iteration=meta["iteration"],
                       metrics_rows=[tuple(r) for r in meta["metrics_rows"]],
                       event_rows=[tuple(r) for r in meta["event_rows"]],
                       distill_rows=[(it, list(t)) for it, t in meta["distill_rows"]],
                       kind="student")
    return state
