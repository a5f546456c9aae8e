"""Compare the compiled kernels against the numpy fallback.

Each backend runs in its own subprocess (the backend is picked at import
time), so ``python benchmarks/bench_kernels.py`` prints one row per kernel
with both timings and the speedup.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

SHAPES = {"batch": 64, "length": 60, "hidden": 64, "rows": 64 * 60, "width": 64}


def measure(repeat):
    import numpy as np

    from osacost.autodiff import kernels

    rng = np.random.default_rng(0)
    B, L, H = SHAPES["batch"], SHAPES["length"], SHAPES["hidden"]
    n, m = SHAPES["rows"], SHAPES["width"]
    f32 = np.float32
    x = rng.normal(size=(n, m)).astype(f32)
    g = rng.normal(size=(n, m)).astype(f32)
    gamma, beta = np.ones(m, f32), np.zeros(m, f32)
    y = kernels.softmax_forward(x)
    _, xhat, rstd = kernels.layernorm_forward(x, gamma, beta, 1e-5)
    xw = rng.normal(size=(B, L, 4 * H)).astype(f32)
    wh = (0.1 * rng.normal(size=(H, 4 * H))).astype(f32)
    mask = (rng.random((B, L)) > 0.1).astype(f32)
    h0 = np.zeros((B, H), f32)
    hs, cs, acts, tc = kernels.lstm_forward(xw, wh, mask, h0, h0)
    ghs = rng.normal(size=(B, L, H)).astype(f32)
    cases = {
        "softmax_forward": lambda: kernels.softmax_forward(x),
        "softmax_backward": lambda: kernels.softmax_backward(y, g),
        "layernorm_forward": lambda: kernels.layernorm_forward(x, gamma, beta, 1e-5),
        "layernorm_backward": lambda: kernels.layernorm_backward(g, xhat, rstd, gamma),
        "lstm_forward": lambda: kernels.lstm_forward(xw, wh, mask, h0, h0),
        "lstm_backward": lambda: kernels.lstm_backward(ghs, acts, tc, hs, cs, mask, wh, h0, h0),
    }
    out = {}
    for name, fn in cases.items():
        fn()
        out[name] = min(timeit.repeat(fn, number=5, repeat=repeat)) / 5
    return {"backend": kernels.BACKEND, "seconds": out}


def run_backend(pure, repeat):
    env = dict(os.environ)
    env["OSACOST_PURE_PYTHON"] = "1" if pure else "0"
    cmd = [sys.executable, __file__, "--worker", "--repeat", str(repeat)]
    return json.loads(subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(measure(args.repeat)))
        return 0
    fast, slow = run_backend(False, args.repeat), run_backend(True, args.repeat)
    if fast["backend"] != "cython":
        print("compiled extension not available; both rows use numpy", file=sys.stderr)
    print(f"shapes: {SHAPES}")
    print(f"{'kernel':<20} {fast['backend'] + ' ms':>12} {'numpy ms':>10} {'speedup':>8}")
    for name, t_fast in fast["seconds"].items():
        t_slow = slow["seconds"][name]
        print(f"{name:<20} {1e3 * t_fast:>12.3f} {1e3 * t_slow:>10.3f} {t_slow / t_fast:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
