"""State harmonic distortion of all four operating points with the anharmonic trap."""
import argparse

from nmsa.config import default_config
from nmsa.ensemble import Calibration, generate_ensemble
from nmsa.estimation import shd
from nmsa.pipeline import shd_curve
from nmsa.tuning import scan_timing


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--radius", type=float, default=1.5)
    ap.add_argument("--xi-scale", type=float, default=1.0, help="multiplier on the Duffing coefficient")
    args = ap.parse_args()

    cfg = default_config()
    cfg = cfg.with_overrides(sim={"noiseless": True, "duffing_xi": cfg.sim.duffing_xi * args.xi_scale},
                             protocol={"pre": 12e-6, "post": 12e-6})
    p = cfg.sim_params()
    ens = generate_ensemble(p, cfg.schedule(), args.n, args.seed)
    cal = Calibration.empirical(ens, p.omega_c)
    scan = scan_timing(ens, cfg.protocol.tau2, cal=cal)
    print(f"{'mode':20s} {'G_zz':>8s} {'G_vv':>8s} {'SHD(z)':>8s} {'SHD(v)':>8s}")
    for mode, m in sorted(scan.best.items()):
        phi, fin = shd_curve(ens, cal, int(round(scan.t0_index[m.i])), int(round(scan.t3_index[m.j])),
                             args.radius, 48)
        print(f"{mode:20s} {m.G[0, 0]:+8.4f} {m.G[1, 1]:+8.4f} {100 * shd(phi, fin[:, 0]):7.2f}% "
              f"{100 * shd(phi, fin[:, 1]):7.2f}%")


if __name__ == "__main__":
    main()
