"""Compare the compiled and pure-numpy convolution backends.

Times the im2col/col2im hot path at the geometries the network actually
hits, then whole-model work built on top of them, once per available
backend. Outputs are checked bit-identical across backends before any
timing is reported, since interchangeability is the whole point of the
fallback.

Usage:
    python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import sys
import time

import numpy as np

from hffn import tensor as T
from hffn import _kernels
from hffn.autodiff import Tape, backward
from hffn.network import ModelConfig, build


def _best_of(fn, repeats):
    fn()  # warmup: first call may pay import/allocation costs
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases():
    """(label, callable) pairs; each callable returns an ndarray to compare."""
    rng = np.random.default_rng(0)

    # raw kernel calls at the trunk's hot geometry (C=48 features, 3x3)
    x_im = rng.standard_normal((1, 48, 48, 48))
    cols = _kernels.im2col(x_im, 3, 3, 1, 1).copy()

    def run_im2col():
        return _kernels.im2col(x_im, 3, 3, 1, 1)

    def run_col2im():
        return _kernels.col2im(cols, 48, 48, 3, 3, 1, 1)

    # single convolutions as the network uses them
    x3 = T.Tensor(rng.standard_normal((1, 48, 48, 48)))
    w3 = T.Tensor(rng.standard_normal((48, 48, 3, 3)) * 0.05)
    b3 = T.Tensor(rng.standard_normal((1, 48, 1, 1)))
    xw = T.Tensor(rng.standard_normal((1, 288, 48, 48)))
    w1 = T.Tensor(rng.standard_normal((48, 288, 1, 1)) * 0.05)

    def run_conv3x3():
        return T.conv2d(x3, w3, b3, padding=1).data

    def run_conv1x1_wide():
        return T.conv2d(xw, w1).data

    # full default x4 model on a 48x48 input
    model = build(ModelConfig(), seed=0)
    x_model = T.Tensor(rng.uniform(0, 1, (1, 3, 48, 48)))

    def run_model_forward():
        return model.forward(x_model).data

    # taped forward + backward on a training-size miniature
    mini = build(ModelConfig(scale=2, channels=16, n_groups=1, m_blocks=2), seed=0)
    x_mini = T.Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))

    def run_train_step_core():
        tape = Tape()
        out = mini.forward(tape.leaf("x", x_mini), engine=tape)
        grads = backward(tape, tape.mean_all(out))
        return grads["x"].data

    return [
        ("im2col  1x48x48x48 k3 s1 p1", run_im2col),
        ("col2im  matching geometry", run_col2im),
        ("conv2d  3x3 48->48 @ 48x48", run_conv3x3),
        ("conv2d  1x1 288->48 @ 48x48", run_conv1x1_wide),
        ("model forward  x4 default @ 48x48", run_model_forward),
        ("forward+backward  C16 n1 m2 @ 32x32", run_train_step_core),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per case; best is reported")
    args = parser.parse_args(argv)

    backends = _kernels.available_backends()
    print(f"available backends: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled backend not built; run: python3 setup.py build_ext --inplace")
        return 1
    original = _kernels.get_backend()

    cases = _cases()
    results = {}
    try:
        for name in backends:
            _kernels.set_backend(name)
            for label, fn in cases:
                results[name, label] = (_best_of(fn, args.repeats), fn())
    finally:
        _kernels.set_backend(original)

    mismatched = [
        label
        for label, _ in cases
        if not np.array_equal(results["numpy", label][1], results["cython", label][1])
    ]
    if mismatched:
        print("BACKENDS DISAGREE on: " + ", ".join(mismatched))
        return 1
    print("outputs bit-identical across backends for every case")
    print()

    width = max(len(label) for label, _ in cases)
    print(f"{'case':<{width}}  {'numpy':>10}  {'cython':>10}  {'speedup':>7}")
    for label, _ in cases:
        t_np = results["numpy", label][0]
        t_cy = results["cython", label][0]
        print(
            f"{label:<{width}}  {t_np * 1e3:>8.2f}ms  {t_cy * 1e3:>8.2f}ms"
            f"  {t_np / t_cy:>6.2f}x"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
