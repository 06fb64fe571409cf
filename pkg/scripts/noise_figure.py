"""Noise-figure sweep with a known reheating level injected through the damping rate."""
import argparse
import csv
import math
import warnings

from scipy.optimize import brentq

from nmsa.dynamics import SimParams
from nmsa.ensemble import Calibration, generate_ensemble
from nmsa.pipeline import amplify
from nmsa.postselect import CoverageWarning
from nmsa.protocol import build_schedule, linear_moments, optimal_timings
from nmsa.tuning import scan_timing

TAU2 = 1.8e-6


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--added", type=float, default=0.14, help="target normalized added noise")
    ap.add_argument("--n", type=int, default=160000)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", default="nf_sweep.csv")
    args = ap.parse_args()

    base = SimParams(duffing_xi=0.0)
    t1, t3 = optimal_timings(base.omega_c, base.omega_i, TAU2)["position"]

    def injected(g, a=t1, b=t3):
        q = SimParams(gamma=g, duffing_xi=0.0)
        return linear_moments(build_schedule(a, TAU2, b, q.omega_c, q.omega_i, pre=0, post=0).stages, q)[1][0, 0]

    gamma = brentq(lambda g: injected(g) - args.added, 1.0, 1e6)
    p = SimParams(gamma=gamma, duffing_xi=0.0)
    print(f"gamma = {gamma:.1f} 1/s (gamma/2pi = {gamma / (2 * math.pi):.1f} Hz)")
    ens = generate_ensemble(p, build_schedule(0, TAU2, 0, p.omega_c, p.omega_i, pre=12e-6, post=12e-6),
                            args.n, args.seed)
    cal = Calibration.empirical(ens, p.omega_c)
    m = scan_timing(ens, TAU2, cal=cal).best["position"]
    dt = ens.sample_interval
    k0 = int(round((ens.switch_time - m.tau1) / dt))
    k3 = int(round((ens.switch_time + TAU2 + m.tau3) / dt))
    truth = injected(gamma, ens.switch_time - ens.t[k0], ens.t[k3] - ens.switch_time - TAU2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        res = amplify(ens, cal, k0, k3, "position", with_pdfs=False)
    print(f"G_zz = {res.G:.4f}, injected N_a = {truth:.4f}, fitted N_a = {res.added_noise:.4f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta0", "survivors", "theta_in_zz", "theta_out_zz", "NF", "NF_model"])
        for pt in res.sweep:
            model = 1 + truth / (res.G**2 * pt.theta_in[0, 0])
            w.writerow([pt.theta0, pt.n, pt.theta_in[0, 0], pt.theta_out[0, 0], pt.nf, model])
            print(f"  theta0={pt.theta0:<6} n={pt.n:<7d} NF={pt.nf:.4f} model={model:.4f}")


if __name__ == "__main__":
    main()
