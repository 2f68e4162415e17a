"""Rasterizer throughput: compiled kernel vs. the numpy fallback.

Renders a random cloud of 10 000 Gaussians at 256x256 and reports frames per
second for each available backend, forward only and forward + backward.

    python3 benchmarks/bench_render.py [--gaussians N] [--size S] [--repeats R]

The 76.4 FPS figure published for the original GPU system is printed for
reference only.  It was measured on a GPU at 512x512 with ~60k Gaussians and
is not comparable with these single-core CPU numbers.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gausshead import autodiff as ad
from gausshead.autodiff import Tensor
from gausshead.camera import Camera
from gausshead.render import backend, render
from gausshead.rig import GlobalGaussians
from gausshead.rotation import quat_to_matrix

REFERENCE_FPS = 76.4


def make_cloud(n: int, seed: int = 0, requires_grad: bool = False) -> GlobalGaussians:
    rng = np.random.default_rng(seed)
    # points on a head-sized ellipsoid shell in front of the camera
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    mu = d * [0.9, 1.1, 0.9] + [0.0, 0.0, 3.5]

    def t(x):
        return Tensor(x, requires_grad=requires_grad)

    return GlobalGaussians(mu=t(mu), rotmat=t(quat_to_matrix(rng.normal(size=(n, 4)))),
                           scale=t(np.exp(rng.normal(size=(n, 3)) * 0.2 - 3.6)),
                           alpha=t(rng.uniform(0.3, 0.95, n)), sh=t(rng.normal(size=(n, 1, 3)) * 0.5))


def bench(n: int, size: int, repeats: int) -> list[dict]:
    cam = Camera(fx=1.1 * size, fy=1.1 * size, cx=size / 2, cy=size / 2, width=size, height=size)
    rows = []
    for name in backend.available():
        backend.use(name)
        glob = make_cloud(n)
        render(glob, cam)  # warm-up
        t0 = time.perf_counter()
        for _ in range(repeats):
            render(glob, cam)
        fwd = (time.perf_counter() - t0) / repeats
        glob = make_cloud(n, requires_grad=True)
        params = {k: getattr(glob, k) for k in ("mu", "rotmat", "scale", "alpha", "sh")}
        t0 = time.perf_counter()
        for _ in range(repeats):
            out = render(glob, cam)
            ad.backward(ad.sum_(out.color), params)
        both = (time.perf_counter() - t0) / repeats
        rows.append({"backend": name, "forward_fps": 1.0 / fwd, "train_fps": 1.0 / both,
                     "forward_ms": 1e3 * fwd, "train_ms": 1e3 * both})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=10_000)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    prev = backend.name()
    try:
        rows = bench(args.gaussians, args.size, args.repeats)
    finally:
        backend.use(prev)
    print(f"{args.gaussians} Gaussians, {args.size}x{args.size}, {args.repeats} repeats, single thread")
    print(f"{'backend':<10}{'fwd FPS':>10}{'fwd ms':>10}{'fwd+bwd FPS':>14}{'fwd+bwd ms':>12}")
    for r in rows:
        print(f"{r['backend']:<10}{r['forward_fps']:>10.2f}{r['forward_ms']:>10.1f}"
              f"{r['train_fps']:>14.2f}{r['train_ms']:>12.1f}")
    if len(rows) == 2:
        print(f"compiled speed-up: forward {rows[1]['forward_fps'] / rows[0]['forward_fps']:.1f}x, "
              f"fwd+bwd {rows[1]['train_fps'] / rows[0]['train_fps']:.1f}x")
    print(f"published reference: {REFERENCE_FPS} FPS (GPU, full scale) -- NOT comparable with these numbers")
    return rows


if __name__ == "__main__":
    main()
