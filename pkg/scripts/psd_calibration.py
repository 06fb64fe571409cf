"""PSD calibration accuracy on synthetic equilibrium records."""
import argparse
import math
import time

import numpy as np

from nmsa.dynamics import Kind, PhaseState, PotentialSpec, SimParams, Stage
from nmsa.ensemble import evolve_trajectory, psd_calibrate
from nmsa.protocol import ProtocolSchedule

FS = 9.76e6


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, nargs="+", default=[10**6, 2**23])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--linewidth", type=float, default=2e3, help="gamma / 2pi in Hz")
    args = ap.parse_args()

    p = SimParams(gamma=2 * math.pi * args.linewidth, duffing_xi=0.0)
    s = math.sqrt(p.theta_zz)
    print(f"{'samples':>9s} {'seed':>4s} {'Omega err':>10s} {'theta_zz err':>12s} {'gamma err':>10s} {'s':>6s}")
    for n in args.samples:
        sched = ProtocolSchedule((Stage(PotentialSpec(Kind.PP, p.omega_c), (n - 1) / FS),), 0.0, 0.0,
                                 step2_index=0, step2_offset=0.0)
        for seed in args.seeds:
            t = time.perf_counter()
            r = np.random.default_rng(seed)
            init = PhaseState(s * r.standard_normal(), p.omega_c * s * r.standard_normal())
            cal = psd_calibrate(evolve_trajectory(init, sched, p, FS, seed=seed))
            print(f"{n:9d} {seed:4d} {100 * (cal.omega / p.omega_c - 1):+9.3f}% "
                  f"{100 * (cal.var_z / p.theta_zz - 1):+11.2f}% {100 * (cal.linewidth / p.gamma - 1):+9.1f}% "
                  f"{time.perf_counter() - t:6.1f}")


if __name__ == "__main__":
    main()
