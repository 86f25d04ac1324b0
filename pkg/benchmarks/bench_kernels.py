"""Compare the compiled n-gram kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--pairs 2000] [--repeat 5]

Prints per-kernel timings for both backends and the speedup. Both backends
must return identical results on the benchmark inputs; the script exits
non-zero otherwise.
"""
from __future__ import annotations

import argparse
import random
import sys
import timeit

from itmeval import _kernels_py

try:
    from itmeval import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

WORDS = ("a", "red", "car", "parked", "next", "to", "blue", "bus", "two", "dogs", "running", "on", "beach",
         "golden", "flower", "woman", "holding", "three", "apples", "bowl")


def make_pairs(n: int, seed: int) -> list[tuple[str, str]]:
    rng = random.Random(seed)

    def phrase():
        return "".join(rng.choice(WORDS) for _ in range(rng.randint(1, 8)))

    return [(phrase(), phrase()) for _ in range(n)]


def run_stats(mod, pairs):
    return [mod.ngram_stats(a, b, 6) for a, b in pairs]


def run_cosine(mod, pairs):
    return [mod.ngram_cosine_terms(a, b, 3) for a, b in pairs]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    pairs = make_pairs(args.pairs, args.seed)
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    else:
        print("compiled extension not available; timing the Python fallback only")

    results = {}
    for kernel, fn in (("ngram_stats(n=6)", run_stats), ("ngram_cosine_terms(n=3)", run_cosine)):
        outputs = {}
        for name, mod in backends.items():
            t = min(timeit.repeat(lambda: fn(mod, pairs), number=1, repeat=args.repeat))
            results[(kernel, name)] = t
            outputs[name] = fn(mod, pairs)
        if len({repr(v) for v in outputs.values()}) != 1:
            print(f"{kernel}: backends disagree", file=sys.stderr)
            return 1

    print(f"{args.pairs} phrase pairs, best of {args.repeat}")
    print(f"{'kernel':26s} {'backend':8s} {'seconds':>9s} {'us/pair':>9s}")
    for (kernel, name), t in results.items():
        print(f"{kernel:26s} {name:8s} {t:9.4f} {1e6 * t / args.pairs:9.2f}")
    if "cython" in backends:
        for kernel in ("ngram_stats(n=6)", "ngram_cosine_terms(n=3)"):
            print(f"speedup {kernel}: {results[(kernel, 'python')] / results[(kernel, 'cython')]:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
