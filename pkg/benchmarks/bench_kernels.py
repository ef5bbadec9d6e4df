"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from tactalign import _kernels_py

try:
    from tactalign import _kernels_c
except ImportError:
    _kernels_c = None


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cases(rng):
    for b, d in ((16, 64), (64, 64), (256, 512), (1024, 512)):
        q, k = _unit(rng.normal(size=(b, d))), _unit(rng.normal(size=(b, d)))
        yield f"info_nce B={b} d={d}", lambda m, q=q, k=k: m.info_nce_loss(q, k, 0.07)
    for n, c, kk in ((402, 402, 1), (402, 402, 5), (2000, 800, 5)):
        sim = rng.normal(size=(n, c))
        correct = rng.random((n, c)) < 0.01
        yield f"topk_hits {n}x{c} k={kk}", lambda m, s=sim, cr=correct, kk=kk: m.topk_hits(s, cr, kk)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"numpy": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled core not built; timing the numpy fallback only")
    print(f"{'case':<28}" + "".join(f"{name:>14}" for name in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)):
        times = {}
        for bname, mod in backends.items():
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(mod), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            times[bname] = best
        row = f"{name:<28}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times.values())
        if len(times) == 2:
            row += f"   {times['numpy'] / times['cython']:>6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
