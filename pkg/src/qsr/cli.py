"""Command-line entry point.

Subcommands: train-teacher, train, eval, export, infer, report.
Exit codes: 0 ok, 1 usage/config error, 2 runtime error.
QSR_LOG=debug|info|quiet controls verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import deploy, intkernel, train
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, to_train_config
from .imaging import ImageError

log = logging.getLogger("qsr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}.get(
        os.environ.get("QSR_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(message)s")


def _parse_overrides(pairs, args):
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag in ("rbd", "qsa", "sfd"):
        if getattr(args, f"no_{flag}", False):
            overrides[flag] = False
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    return overrides


def _add_config_args(p):
    p.add_argument("-c", "--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--no-rbd", action="store_true", help="vanilla uniform+STE quantizers")
    p.add_argument("--no-qsa", action="store_true", help="fixed-depth student, no slimming")
    p.add_argument("--no-sfd", action="store_true", help="disable feature distillation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")


def _datasets(cfg):
    if not cfg["train_hr_dir"] or not cfg["val_hr_dir"]:
        raise ConfigError("train_hr_dir and val_hr_dir must be set for training")
    ds = train.PairDataset(cfg["train_hr_dir"], cfg["upscale"])
    val_ds = train.PairDataset(cfg["val_hr_dir"], cfg["upscale"])
    val_pairs = [(lr, hr) for lr, hr, _ in val_ds.pairs]
    return ds, val_pairs


def cmd_train_teacher(args):
    cfg = load_config(args.config, _parse_overrides(args.set, args))
    tc = to_train_config(cfg)
    if cfg["teacher_iters"] > 0:
        tc = dataclasses.replace(tc, total_iters=cfg["teacher_iters"])
    ds, val_pairs = _datasets(cfg)
    state = train.init_teacher_training(tc, ds)
    log.info("training teacher: %d blocks, %d iters", tc.initial_blocks,
             tc.total_iters)
    train.run_training(state, ds, val_pairs)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    ckpt = os.path.join(cfg["out_dir"], "teacher.ckpt")
    train.save_training_checkpoint(state, ckpt)
    train.write_metrics_csv(os.path.join(cfg["out_dir"], "metrics_teacher.csv"),
                            state.metrics_rows)
    final = train.evaluate(state.net, val_pairs)
    log.info("teacher done: PSNR %.3f dB, SSIM %.4f -> %s",
             final["psnr_db"], final["ssim"], ckpt)
    print(ckpt)
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _parse_overrides(args.set, args))
    tc = to_train_config(cfg)
    ds, val_pairs = _datasets(cfg)
    teacher = train.load_teacher(args.teacher) if args.teacher else None
    if args.resume:
        state = train.resume_student_training(args.resume, ds, teacher)
    else:
        state = train.init_student_training(tc, ds, teacher)
    log.info("training student: %d->%d blocks, w%d/a%d, rbd=%s qsa=%s sfd=%s",
             tc.initial_blocks, tc.target_blocks, tc.spec.w_bits,
             tc.spec.a_bits, tc.rbd, tc.qsa, tc.sfd)
    train.run_training(state, ds, val_pairs, stop_after=args.stop_after)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    ckpt = os.path.join(cfg["out_dir"], "student.ckpt")
    train.save_training_checkpoint(state, ckpt)
    train.write_metrics_csv(os.path.join(cfg["out_dir"], "metrics.csv"),
                            state.metrics_rows)
    train.write_events_log(os.path.join(cfg["out_dir"], "events.log"),
                           state.event_rows)
    if state.distill_rows:
        train.write_distill_log(os.path.join(cfg["out_dir"], "distill.log"),
                                state.distill_rows)
    final = train.evaluate(state.net, val_pairs)
    log.info("student done at iter %d: PSNR %.3f dB, SSIM %.4f -> %s",
             state.iteration, final["psnr_db"], final["ssim"], ckpt)
    print(ckpt)
    return 0


def _load_any_net(path):
    from . import checkpoint as ckpt_mod

    meta, _ = ckpt_mod.load_checkpoint(path)
    if meta.get("kind") == "teacher":
        return train.load_teacher(path)
    net, _, _ = train.load_student(path)
    return net


def cmd_eval(args):
    net = _load_any_net(args.ckpt)
    ds = train.PairDataset(args.hr_dir, net.spec.upscale)
    shave = args.shave if args.shave is not None else net.spec.upscale
    rows = []
    for lr, hr, name in ds.pairs:
        m = train.evaluate(net, [(lr, hr)], shave=shave)
        rows.append((name, m["psnr_db"], m["ssim"]))
    print(f"{'image':<28}{'PSNR(dB)':>10}{'SSIM':>9}")
    for name, p, s in rows:
        print(f"{name:<28}{p:>10.3f}{s:>9.4f}")
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    print(f"{'mean':<28}{mean_p:>10.3f}{mean_s:>9.4f}")
    return 0


def cmd_export(args):
    net, _, _ = train.load_student(args.ckpt)
    out = args.out or (os.path.splitext(args.ckpt)[0] + ".qsrpack")
    meta = deploy.export_packed(net, out)
    log.info("exported %d blocks at w%d/a%d -> %s",
             len(meta["deployed_blocks"]), net.spec.w_bits, net.spec.a_bits, out)
    print(out)
    return 0


def cmd_infer(args):
    deploy.infer_image(args.model, args.input, args.output)
    print(args.output)
    return 0


def _print_report(rep, w_bits, a_bits):
    print(f"input size            3x{rep['input_hw'][0]}x{rep['input_hw'][1]}")
    print(f"params (total)        {rep['params_total']:,}")
    print(f"param bits            {rep['params_bits']:,}")
    print(f"storage (packed)      {rep['storage_bytes']:,} B")
    print(f"storage (FP32)        {rep['fp32_storage_bytes']:,} B")
    print(f"body params           {rep['body_params']:,}")
    print(f"body storage          {rep['body_storage_bytes']:,} B")
    print(f"ops (MAC)             {rep['ops_mac']:,}")
    print(f"ops (effective)       {rep['ops_effective']:,.0f}")
    print(f"reduction: params     {rep['reduction_params_pct']:.1f}%")
    print(f"reduction: storage    {rep['reduction_storage_pct']:.1f}%")
    print(f"reduction: ops        {rep['reduction_ops_pct']:.1f}%")
    ref = intkernel.REFERENCE_REDUCTIONS.get((w_bits, a_bits))
    if ref is not None:
        print(f"published reference   params {ref['params_pct']:.1f}% / "
              f"ops {ref['ops_pct']:.1f}% (SRResNet x4 protocol)")


def cmd_report(args):
    size = (args.input_size, args.input_size)
    if args.model:
        packed = deploy.PackedNetwork.load(args.model)
        net = deploy.skeleton_from_packed(packed.meta)
    else:
        net, _, _ = train.load_student(args.ckpt)
    rep = intkernel.accounting(net, size)
    _print_report(rep, net.spec.w_bits, net.spec.a_bits)
    return 0


def build_parser():
    p = _Parser(prog="qsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train-teacher", help="train the full-precision teacher")
    _add_config_args(pt)
    pt.set_defaults(fn=cmd_train_teacher)

    ps = sub.add_parser("train", help="quantization-aware student training")
    _add_config_args(ps)
    ps.add_argument("--teacher", help="teacher checkpoint (weights init + distillation)")
    ps.add_argument("--resume", help="resume from a student checkpoint")
    ps.add_argument("--stop-after", type=int, help="stop early at this iteration")
    ps.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="PSNR/SSIM table over a dataset")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--hr-dir", required=True)
    pe.add_argument("--shave", type=int)
    pe.set_defaults(fn=cmd_eval)

    px = sub.add_parser("export", help="pack a student into the deployable form")
    px.add_argument("--ckpt", required=True)
    px.add_argument("--out")
    px.set_defaults(fn=cmd_export)

    pi = sub.add_parser("infer", help="super-resolve an image via the integer path")
    pi.add_argument("--model", required=True, help="packed artifact (.qsrpack)")
    pi.add_argument("--input", required=True)
    pi.add_argument("--output", required=True)
    pi.set_defaults(fn=cmd_infer)

    pr = sub.add_parser("report", help="params/storage/ops accounting")
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--model")
    pr.add_argument("--input-size", type=int, default=256)
    pr.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return 1
    except (CheckpointError, ImageError, FileNotFoundError, NotADirectoryError,
            RuntimeError, OverflowError, ValueError) as e:
        log.error("error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
