"""Compare the compiled and numpy deposit/gather kernels.

    python benchmarks/bench_core.py [--particles 2048] [--n 128] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from fracpme import _kernels_py
from fracpme.kernels import bump_constant

try:
    from fracpme import _core
except ImportError:
    _core = None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--particles", type=int, default=2048)
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--beta", type=float, default=0.86)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    L, d = 8.0, 2
    pos = np.random.default_rng(0).normal(scale=0.5, size=(args.particles, d))
    scale = bump_constant(d) / args.beta**d / args.particles
    field = np.random.default_rng(1).random(args.n**d)

    impls = {"numpy": _kernels_py}
    if _core is not None:
        impls["compiled"] = _core
    else:
        print("compiled core not built; timing numpy only")
    print(f"N={args.particles} n={args.n} beta={args.beta}")
    print(f"{'backend':<10}{'deposit [s]':>14}{'gather [s]':>14}")
    ref = None
    for name, mod in impls.items():
        dep = min(timeit.repeat(lambda: mod.deposit_bump(pos, args.beta, L, args.n, scale), number=1, repeat=args.repeat))
        gat = min(timeit.repeat(lambda: mod.gather_linear(field, args.n, L, pos), number=1, repeat=args.repeat))
        print(f"{name:<10}{dep:>14.5f}{gat:>14.5f}")
        out = mod.deposit_bump(pos, args.beta, L, args.n, scale)
        if ref is None:
            ref = out
        else:
            print(f"max deposit difference vs numpy: {np.max(np.abs(out - ref)):.3e}")


if __name__ == "__main__":
    main()
