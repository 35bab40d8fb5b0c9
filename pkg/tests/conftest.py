import os

import numpy as np
import pytest

from qsr import imaging


def finite_diff(f, x0, eps=1e-3):
    """Central finite difference of a scalar function of a scalar."""
    return (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)


def grad_check(f, x, eps=1e-3):
    """Central finite-difference gradient of scalar f over an ndarray x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        dn = f(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def naive_conv2d(x, w):
    """Independent float64 direct-summation 'same' zero-padded correlation."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p : p + h, p : p + wd] = x
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for hi in range(h):
                for wi in range(wd):
                    acc = 0.0
                    for ci in range(c):
                        for kh in range(k):
                            for kw in range(k):
                                acc += w[oi, ci, kh, kw] * xp[ni, ci, hi + kh, wi + kw]
                    out[ni, oi, hi, wi] = acc
    return out


def make_texture(rng, size=96, components=6):
    """Smooth random texture with edges: learnable SR content."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    img = np.zeros((size, size, 3), np.float32)
    for _ in range(components):
        fx, fy = rng.uniform(0.5, 7.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.25, 3).astype(np.float32)
        img += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase).astype(np.float32)[..., None] * amp
    # a soft diagonal edge adds non-stationary structure
    edge = 1.0 / (1.0 + np.exp(-24.0 * (xx - yy + rng.uniform(-0.3, 0.3))))
    img += 0.3 * edge.astype(np.float32)[..., None]
    img = 0.5 + 0.5 * (img - img.mean()) / (3.0 * img.std() + 1e-9)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@pytest.fixture(scope="session")
def dataset_dirs(tmp_path_factory):
    """8 training textures + 2 held-out, written as PNGs."""
    root = tmp_path_factory.mktemp("data")
    train_dir = root / "train_hr"
    val_dir = root / "val_hr"
    os.makedirs(train_dir)
    os.makedirs(val_dir)
    rng = np.random.default_rng(20240817)
    for i in range(8):
        imaging.save_png(make_texture(rng, 96), train_dir / f"t{i}.png")
    for i in range(2):
        imaging.save_png(make_texture(rng, 96), val_dir / f"v{i}.png")
    return str(train_dir), str(val_dir)
