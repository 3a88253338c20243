"""Compare the compiled routing kernel against the pure-Python fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeat N]

Both backends consume the same uniforms, so their results must agree
exactly; the script checks that before reporting timings.
"""
import argparse
import timeit

import numpy as np

from specmoe import _kernels_py
from specmoe.cost_model import model_preset

try:
    from specmoe import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

CASES = [
    ("mixtral k=3", "mixtral", 4, 0.1),
    ("mixtral k=7", "mixtral", 8, 0.1),
    ("olmoe k=7", "olmoe", 8, 0.6),
    ("deepseek k=3", "deepseek", 4, 0.3),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=200, help="kernel calls per timing (default: 200)")
    args = parser.parse_args()
    if _kernels_c is None:
        print("compiled extension not built; only the Python fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<14} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for label, preset, tokens, affinity in CASES:
        cfg = model_preset(preset)
        u = rng.random(cfg.num_layers * tokens * (cfg.top_k + 1))
        argv = (u, cfg.num_layers, tokens, cfg.routed_experts, cfg.top_k, affinity)
        t_py = timeit.timeit(lambda: _kernels_py.mean_routed_active(*argv), number=args.repeat) / args.repeat
        if _kernels_c is None:
            print(f"{label:<14} {t_py * 1e6:>10.1f} {'-':>10} {'-':>8}")
            continue
        assert _kernels_c.mean_routed_active(*argv) == _kernels_py.mean_routed_active(*argv)
        t_c = timeit.timeit(lambda: _kernels_c.mean_routed_active(*argv), number=args.repeat) / args.repeat
        print(f"{label:<14} {t_py * 1e6:>10.1f} {t_c * 1e6:>10.1f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
