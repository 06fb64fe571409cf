"""Throughput and run-to-run determinism of a full-size ensemble."""
import argparse
import hashlib
import os
import time

import numpy as np

from nmsa._kernel import set_threads
from nmsa.config import default_config
from nmsa.ensemble import iter_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=160000)
    ap.add_argument("--window", type=float, default=100e-6, help="recorded time span in seconds")
    ap.add_argument("--repeats", type=int, default=2)
    ap.add_argument("--threads", type=int, default=0)
    args = ap.parse_args()

    set_threads(args.threads)
    tau2 = 1.8e-6
    half = (args.window - tau2) / 2
    cfg = default_config().with_overrides(protocol={"pre": half, "post": half})
    p = cfg.sim_params()
    for r in range(args.repeats):
        t = time.perf_counter()
        h = hashlib.sha256()
        for chunk in iter_ensemble(p, cfg.schedule(), args.n, cfg.ensemble.master_seed):
            h.update(np.ascontiguousarray(chunk.z, "<f8").tobytes())
        dt = time.perf_counter() - t
        print(f"run {r}: {args.n} x {chunk.n_samples} samples in {dt:.1f} s "
              f"({os.cpu_count()} cpus) sha256={h.hexdigest()[:16]}")


if __name__ == "__main__":
    main()
