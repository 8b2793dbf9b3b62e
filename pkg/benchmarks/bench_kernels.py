"""Compiled vs pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel at shapes the model actually uses, checks that both
backends agree, and prints one CSV row per (kernel, shape).
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from favor import _pykernels

try:
    from favor import _ckernels
except ImportError:
    sys.exit("compiled extension not built; run `pip install --no-build-isolation -e .` first")


def _best(fn, repeat: int) -> float:
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def softmax_cases(rng):
    # (rows, cols, mask rows): Q-Former causal layer, cross-attention, decoder self-attention
    for rows, cols, mrows in ((16 * 4 * 40, 40, 40), (16 * 4 * 8, 40, 1), (16 * 4 * 36, 36, 36)):
        x = rng.standard_normal((rows, cols))
        frame = np.arange(cols) // 4
        mask = (frame[None, :] <= frame[:mrows, None]).astype(np.uint8) if mrows > 1 else np.ones((1, cols), np.uint8)
        yield f"{rows}x{cols}", x, mask


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print("kernel,shape,python_us,cython_us,speedup")

    def row(name, shape, fp, fc):
        tp, tc = _best(fp, args.repeat), _best(fc, args.repeat)
        print(f"{name},{shape},{tp * 1e6:.1f},{tc * 1e6:.1f},{tp / tc:.2f}")

    for shape, x, mask in softmax_cases(rng):
        yp = _pykernels.masked_softmax_forward(x, mask)
        yc = _ckernels.masked_softmax_forward(x, mask)
        assert np.allclose(yp, yc, rtol=0, atol=1e-14)
        row("softmax_fwd", shape, lambda: _pykernels.masked_softmax_forward(x, mask),
            lambda: _ckernels.masked_softmax_forward(x, mask))
        g = rng.standard_normal(x.shape)
        assert np.allclose(_pykernels.masked_softmax_backward(yp, g), _ckernels.masked_softmax_backward(yp, g),
                           rtol=0, atol=1e-13)
        row("softmax_bwd", shape, lambda: _pykernels.masked_softmax_backward(yp, g),
            lambda: _ckernels.masked_softmax_backward(yp, g))

    for n in (10, 40, 160):
        ref = rng.integers(0, 24, n).astype(np.int64)
        hyp = ref.copy()
        hyp[rng.random(n) < 0.2] = 0
        hyp = np.delete(hyp, rng.choice(n, n // 10, replace=False))
        assert _pykernels.edit_ops(ref, hyp) == tuple(_ckernels.edit_ops(ref, hyp))
        row("edit_ops", f"{n}", lambda: _pykernels.edit_ops(ref, hyp), lambda: _ckernels.edit_ops(ref, hyp))


if __name__ == "__main__":
    main()
