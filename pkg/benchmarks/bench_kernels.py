"""Compare the compiled and numpy kernel backends.

Run: python3 benchmarks/bench_kernels.py [--edges N] [--channels C] [--repeat R]
"""

import argparse
import importlib
import timeit

import numpy as np


def backends():
    out = {"numpy": importlib.import_module("mcgcn._kernels_py")}
    try:
        out["cython"] = importlib.import_module("mcgcn._kernels")
    except ImportError:
        print("compiled extension not built; only the numpy backend is timed")
    return out


def workload(edges, channels, nodes, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(edges, channels))
    segments = np.sort(rng.integers(0, nodes, size=edges))
    grad = rng.normal(size=(nodes, channels))
    return values, segments, grad


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=20000)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--nodes", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    values, seg, grad = workload(args.edges, args.channels, args.nodes)
    ref = None
    rows = []
    for name, k in backends().items():
        out, w = k.segment_softmax_forward(values, seg, args.nodes, 1.0)
        if ref is None:
            ref = out
        else:
            assert np.allclose(out, ref, rtol=1e-12, atol=1e-12), "backends disagree"
        cases = {
            "segment_sum": lambda: k.segment_sum(values, seg, args.nodes),
            "softmax_forward": lambda: k.segment_softmax_forward(values, seg, args.nodes, 1.0),
            "softmax_backward": lambda: k.segment_softmax_backward(grad, values, w, out, seg, 1.0),
            "gather_rows": lambda: k.gather_rows(grad, seg),
        }
        for case, fn in cases.items():
            t = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            rows.append((case, name, t))
    print(f"edges={args.edges} channels={args.channels} nodes={args.nodes}")
    print(f"{'kernel':<18}{'backend':<8}{'best ms':>10}")
    for case, name, t in sorted(rows):
        print(f"{case:<18}{name:<8}{1e3 * t:>10.3f}")
    by = {(c, n): t for c, n, t in rows}
    if any(n == "cython" for _, n, _ in rows):
        print("speedup (numpy / cython):")
        for case in sorted({c for c, _, _ in rows}):
            print(f"  {case:<18}{by[(case, 'numpy')] / by[(case, 'cython')]:.1f}x")


if __name__ == "__main__":
    main()
