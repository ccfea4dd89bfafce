#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy fallback.

Times the four data-movement kernels on each layer shape of the default
64px architecture, plus a full forward/backward pass through the
embedding network on both backends. Results are bit-identical between
backends, so the only difference worth reporting is speed.

Usage: python benchmarks/bench_kernels.py [--batch 80] [--repeats 7]
"""

import argparse
import os
import time

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np

from stepmetric import kernels
from stepmetric.kernels import _numpy as numpy_backend


def best_of(f, repeats):
    f()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        f()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(batch, repeats):
    if not kernels.HAVE_COMPILED:
        print("compiled backend not built; nothing to compare")
        return
    compiled = kernels.compiled_backend
    rng = np.random.default_rng(0)
    layer_shapes = [(batch, 64, 64, 3), (batch, 32, 32, 8), (batch, 16, 16, 16), (batch, 8, 8, 32)]

    print(f"{'kernel':<22}{'shape':<20}{'numpy':>10}{'compiled':>10}{'speedup':>9}")
    for shape in layer_shapes:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = compiled.im2col3x3(x)
        grad_cols = rng.standard_normal(cols.shape).astype(np.float32)
        pooled, idx = compiled.maxpool2x2(x)
        grad_pool = rng.standard_normal(pooled.shape).astype(np.float32)
        cases = [
            ("im2col3x3", lambda b: b.im2col3x3(x)),
            ("col2im3x3", lambda b: b.col2im3x3(grad_cols)),
            ("maxpool2x2", lambda b: b.maxpool2x2(x)),
            ("maxpool2x2_backward", lambda b: b.maxpool2x2_backward(grad_pool, idx)),
        ]
        for name, call in cases:
            t_np = best_of(lambda: call(numpy_backend), repeats)
            t_cy = best_of(lambda: call(compiled), repeats)
            print(f"{name:<22}{str(shape):<20}{1e3 * t_np:>8.1f}ms{1e3 * t_cy:>8.1f}ms{t_np / t_cy:>8.1f}x")


def bench_end_to_end(batch, repeats):
    from stepmetric.embednet import ArchSpec, init_network, tuple_batch_gradients
    from stepmetric.labels import LabeledImage
    from stepmetric.loss import LossConfig
    from stepmetric.sampler import QuadrupletTuple
    from stepmetric.kernels import _numpy as knp

    rng = np.random.default_rng(1)
    arch = ArchSpec(input_size=64, conv_channels=(8, 16, 32, 64), embed_dim=32)
    params = init_network(arch, 0)
    cfg = LossConfig(anomaly_start_epoch=5, total_epochs=10)
    n_tuples = max(batch // 5, 1)
    images = [
        LabeledImage(rng.random((64, 64, 3), dtype=np.float32), "step_01", f"i{k}")
        for k in range(5 * n_tuples)
    ]
    tuples = [QuadrupletTuple(*images[5 * i : 5 * i + 5], (2, 2, 1, 3, 4)) for i in range(n_tuples)]

    def run():
        tuple_batch_gradients(params, tuples, cfg, 0.5, dtype=np.float32)

    results = {}
    originals = {name: getattr(kernels, name) for name in
                 ("im2col3x3", "col2im3x3", "maxpool2x2", "maxpool2x2_backward")}
    for backend_name, backend in (("numpy", knp), ("compiled", kernels.compiled_backend)):
        for name in originals:
            setattr(kernels, name, getattr(backend, name))
        results[backend_name] = best_of(run, repeats)
    for name, fn in originals.items():
        setattr(kernels, name, fn)

    print(f"\nforward+backward, {n_tuples} quadruplet tuples ({5 * n_tuples} images, 64px):")
    print(f"  numpy    {1e3 * results['numpy']:8.1f} ms")
    print(f"  compiled {1e3 * results['compiled']:8.1f} ms  ({results['numpy'] / results['compiled']:.2f}x)")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=80, help="images per kernel call")
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}\n")
    bench_kernels(args.batch, args.repeats)
    bench_end_to_end(args.batch, args.repeats)
