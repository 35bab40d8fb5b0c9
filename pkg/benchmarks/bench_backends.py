"""Benchmark the compiled kernels against the NumPy fallback.

Usage: python benchmarks/bench_backends.py [--reps N]

Times the patch gather (the backend-specific hot kernel), the assembled conv
forward/backward, the integer-code convolution, and one full training step at
the desk-scale shape. The GEMMs inside forward/backward are identical BLAS
calls in both backends, so the gap isolates the gather and packing costs.
"""

import argparse
import time

import numpy as np

from qsr import backends


def timeit(fn, reps):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


SHAPES = [
    ("train desk (4x16x16x16)", (4, 16, 16, 16, 16)),
    ("eval desk  (1x16x48x48)", (1, 16, 48, 48, 16)),
    ("train full (8x64x24x24)", (8, 64, 24, 24, 64)),
    ("infer full (1x64x64x64)", (1, 64, 64, 64, 64)),
]


def bench_kernels(reps):
    names = backends.available_backends()
    ops = {n: backends.ops_for(n) for n in names}
    rng = np.random.default_rng(0)
    print(f"available backends: {', '.join(names)} (default: {backends.NAME})")
    header = f"{'shape':<26}{'kernel':<12}" + "".join(f"{n:>12}" for n in names)
    print(header)
    print("-" * len(header))
    for label, (n, c, h, w, o) in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        go = rng.standard_normal((n, o, h, w)).astype(np.float32)
        cols = {name: ops[name]["im2col_t"](x, 3) for name in names}
        act = rng.integers(-8, 8, (n, c, h, w)).astype(np.int32)
        wc = rng.integers(-8, 8, (o, c, 3, 3)).astype(np.int8)
        rows = [
            ("im2col", lambda nm: ops[nm]["im2col_t"](x, 3)),
            ("conv fwd", lambda nm: ops[nm]["conv2d_fwd"](x, wt)),
            ("bwd input", lambda nm: ops[nm]["conv2d_bwd_input"](go, wt)),
            ("bwd weight", lambda nm: ops[nm]["conv2d_bwd_weight_ctx"](go, cols[nm], 3)),
            ("int conv", lambda nm: ops[nm]["int_conv2d_fwd"](act, wc)),
        ]
        for kname, make in rows:
            cells = "".join(
                f"{timeit(lambda nm=name: make(nm), reps):>10.3f}ms" for name in names
            )
            print(f"{label:<26}{kname:<12}{cells}")
        print()


def bench_train_step(reps):
    """One optimizer step at the desk-scale config under each backend."""
    import importlib
    import os

    from qsr import imaging

    results = {}
    for name in backends.available_backends():
        os.environ["QSR_BACKEND"] = name
        import qsr.backends as b

        importlib.reload(b)
        import qsr.tensor, qsr.quant, qsr.network, qsr.train  # noqa

        importlib.reload(qsr.tensor)
        importlib.reload(qsr.quant)
        importlib.reload(qsr.network)
        importlib.reload(qsr.train)
        from qsr.network import NetworkSpec
        from qsr.train import TrainConfig, init_student_training, init_teacher_training, train_step

        rng = np.random.default_rng(0)
        import tempfile

        d = tempfile.mkdtemp()
        os.makedirs(d + "/hr")
        for i in range(2):
            imaging.save_png(rng.random((64, 64, 3)).astype(np.float32), f"{d}/hr/{i}.png")
        from qsr.train import PairDataset, sample_batch

        spec = NetworkSpec(16, 8, 2, w_bits=2, a_bits=2)
        cfg = TrainConfig(spec=spec, total_iters=100, batch_size=4, patch_size=16)
        ds = PairDataset(d + "/hr", 2)
        tstate = init_teacher_training(cfg, ds)
        sstate = init_student_training(cfg, ds, tstate.net)
        lr_b, hr_b = sample_batch(ds, 16, 4, np.random.default_rng(1), np.random.default_rng(2))

        def step():
            sstate.iteration += 1
            train_step(sstate, lr_b, hr_b)

        results[name] = timeit(step, reps)
    os.environ.pop("QSR_BACKEND", None)
    print("full training step (student, 8 blocks, distillation on):")
    for name, ms in results.items():
        print(f"  {name:<8}{ms:8.2f} ms/iter")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()
    bench_kernels(args.reps)
    bench_train_step(max(10, args.reps // 2))


if __name__ == "__main__":
    main()
