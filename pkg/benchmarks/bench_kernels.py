"""Time the numba and numpy kernel backends on MNIST-shaped workloads.

    python benchmarks/bench_kernels.py [--repeats 20]

Reports per-kernel medians and one end-to-end per-example gradient pass
over a 256-example lot, for each backend, and checks the outputs agree
bit for bit.
"""

import argparse
import time

import numpy as np

from tempered_dp import _kernels, nn
from tempered_dp.tensor import RngStream


def _median_time(fn, repeats):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def kernel_cases(rng):
    # first MNIST conv: 28x28x1 padded to 34x34, k=8, stride 2 -> 14x14
    x1 = rng.random((256, 34, 34, 1), dtype=np.float32)
    # first pool: 14x14x16, k=2, stride 2 -> 7x7
    p1 = rng.random((256, 14, 14, 16), dtype=np.float32)
    d1 = rng.random((256, 196, 64), dtype=np.float32)
    count = np.full((7, 7), 4.0, dtype=np.float32)
    return {
        "im2col": lambda k: k["im2col"](x1, 8, 2, 14, 14),
        "col2im": lambda k: k["col2im"](d1, 34, 34, 1, 8, 2, 14, 14),
        "maxpool": lambda k: k["maxpool"](p1, 2, 2, 7, 7),
        "avgpool": lambda k: k["avgpool"](p1, count, 2, 2, 7, 7),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    backends = {name: _kernels.kernels(name) for name in ("numpy", "numba")}
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  identical")
    for name, run in kernel_cases(rng).items():
        t = {b: _median_time(lambda: run(k), args.repeats) for b, k in backends.items()}
        a, b = run(backends["numpy"]), run(backends["numba"])
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        same = all(np.array_equal(u, v) for u, v in zip(a, b))
        print(f"{name:<12} {t['numpy'] * 1e3:>10.2f} {t['numba'] * 1e3:>10.2f} "
              f"{t['numpy'] / t['numba']:>8.2f}  {same}")

    # end to end: swap the module-level kernels the layers call into
    net = nn.build_mnist_net(nn.TANH)
    theta = nn.init_params(net, RngStream(0))
    x = rng.random((256, 28, 28, 1), dtype=np.float32)
    y = rng.integers(0, 10, 256)
    grads, times = {}, {}
    for name, table in backends.items():
        for key, fn in table.items():
            setattr(_kernels, key, fn)
        times[name] = _median_time(lambda: nn.per_example_gradients(net, theta, x, y),
                                   max(3, args.repeats // 4))
        grads[name] = nn.per_example_gradients(net, theta, x, y)
    print(f"{'lot grads':<12} {times['numpy'] * 1e3:>10.2f} {times['numba'] * 1e3:>10.2f} "
          f"{times['numpy'] / times['numba']:>8.2f}  {np.array_equal(grads['numpy'], grads['numba'])}")


if __name__ == "__main__":
    main()
