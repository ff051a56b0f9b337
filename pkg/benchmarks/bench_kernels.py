"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Also times one end-to-end gate batch with each backend by re-importing the
package under ``OOKGATE_DISABLE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ookgate import _kernels


def cases(rng, scale):
    q, n, k = int(2000 * scale), int(20000 * scale), 32
    sims = rng.uniform(-1, 1, (q, n))
    id_rank = rng.permutation(n).astype(np.int64)
    pools = np.sort(rng.standard_normal((k, 5000)), axis=1)
    values = rng.standard_normal((int(20000 * scale), k))
    sample = np.sort(rng.standard_normal(200000))
    probes = rng.standard_normal(int(500000 * scale))
    a, b = np.sort(rng.standard_normal(100000)), np.sort(rng.standard_normal(80000) + 0.1)
    ranks_in = np.round(rng.standard_normal(int(1000000 * scale)), 2)
    return {
        "topk_rows": lambda impl: impl.topk_rows(sims, id_rank, k),
        "count_le_rows": lambda impl: impl.count_le_rows(pools, values),
        "count_le": lambda impl: impl.count_le(sample, probes),
        "ks_sup": lambda impl: impl.ks_sup(a, b),
        "average_ranks": lambda impl: impl.average_ranks(ranks_in),
    }


GATE_SNIPPET = """
import time, numpy as np
from ookgate import _kernels
from ookgate.calibration import build_calibration, gate_batch
from ookgate.statistics import StatisticKind
from ookgate.synthetic import make_cluster_pair
from ookgate.vecstore import build_index
rng = np.random.default_rng(0)
pair = make_cluster_pair(rng, 64, 0.2, 4.0)
index = build_index(pair.draw_a(rng, 20000), [f"d{i}" for i in range(20000)])
cal = build_calibration(index, pair.draw_a(rng, 1000), StatisticKind("fisher", k=32))
q = pair.draw_a(rng, 2000)
gate_batch(cal, index, q[:10], 0.05)
t = time.perf_counter(); gate_batch(cal, index, q, 0.05); print(_kernels.BACKEND, time.perf_counter() - t)
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases(rng, args.scale).items():
        fn(_kernels.numba_impl)  # compile outside the timed region
        np_res, nb_res = fn(_kernels.numpy_impl), fn(_kernels.numba_impl)
        if not np.array_equal(np.asarray(np_res), np.asarray(nb_res)):
            sys.exit(f"{name}: backends disagree")
        t_np = min(timeit.repeat(lambda: fn(_kernels.numpy_impl), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_kernels.numba_impl), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")

    print("\nend-to-end fisher gate, 2000 queries over 20000 docs:")
    for flag in ("1", "0"):
        env = dict(os.environ, OOKGATE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", GATE_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:<8}{float(secs) * 1e3:>10.1f} ms")


if __name__ == "__main__":
    main()
