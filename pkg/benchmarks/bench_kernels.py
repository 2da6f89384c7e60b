"""Compare the numba kernels with the numpy / pure-Python fallbacks.

Each backend runs in its own interpreter, because the backend is chosen at
import time from ``SRMKIT_DISABLE_NUMBA``::

    python3 benchmarks/bench_kernels.py            # both backends, side by side
    python3 benchmarks/bench_kernels.py --child    # current backend only (JSON)
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit


def _cases(quick: bool):
    import numpy as np

    from srmkit import gridworld as gw
    from srmkit import kernels as K

    rng = np.random.default_rng(0)
    T = 20_000 if quick else 200_000
    events = rng.integers(0, 64, T).astype(np.int64)
    rewards = rng.normal(size=T)
    values = rng.normal(size=T)
    ends = rng.random(T) < 0.01
    ends[-1] = True
    inverse = rng.integers(0, 5000, T).astype(np.int64)
    G = rng.normal(size=(T, 7))

    config = gw.GridConfig(size=6)
    logits = np.zeros((config.n_states, 7))
    m = 16 if quick else 64

    def do_rollout():
        gw.rollout(config, logits, m, np.random.default_rng(1))

    return {
        "counter_trace": lambda: K.counter_trace(events, 1, 16),
        "gae": lambda: K.gae(rewards, values, ends, 0.99, 0.95),
        "scatter_rows": lambda: K.scatter_rows(inverse, G, 5000),
        "rollout": do_rollout,
    }


def child(quick: bool, repeat: int) -> dict:
    from srmkit import kernels as K

    out = {"backend": K.backend()}
    for name, fn in _cases(quick).items():
        fn()  # compile / warm caches
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--child", action="store_true")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if args.child:
        print(json.dumps(child(args.quick, args.repeat)))
        return
    results = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, SRMKIT_DISABLE_NUMBA=flag)
        cmd = [sys.executable, __file__, "--child", "--repeat", str(args.repeat)] + (["--quick"] if args.quick else [])
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results[label] = json.loads(proc.stdout.strip().splitlines()[-1])
    print(f"{'kernel':<16}{'numba [ms]':>12}{'fallback [ms]':>15}{'speedup':>10}")
    for name in ("counter_trace", "gae", "scatter_rows", "rollout"):
        a, b = results["numba"][name], results["numpy"][name]
        print(f"{name:<16}{a * 1e3:>12.2f}{b * 1e3:>15.2f}{b / a:>9.1f}x")
    print(f"backends: {results['numba']['backend']} / {results['numpy']['backend']}")


if __name__ == "__main__":
    main()
