"""Compiled inner loop of the splitting integrator (see dynamics.sde_step)."""
import numba

# the bundled TBB is too old; avoid probing it
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"


@numba.njit(parallel=True, cache=True)
def integrate(coeffs, seg_row, seg_len, seg_sample, z0, v0, noise, use_noise, out, record, zf, vf):
    n = z0.shape[0]
    n_seg = seg_row.shape[0]
    for p in numba.prange(n):
        z = z0[p]
        v = v0[p]
        if record:
            out[p, 0] = z
        step = 0
        for j in range(n_seg):
            r = seg_row[j]
            a11 = coeffs[r, 0]
            a12 = coeffs[r, 1]
            a21 = coeffs[r, 2]
            a22 = coeffs[r, 3]
            b1 = coeffs[r, 4]
            b2 = coeffs[r, 5]
            kick = coeffs[r, 6]
            c = coeffs[r, 7]
            decay = coeffs[r, 8]
            sigma = coeffs[r, 9]
            for _ in range(seg_len[j]):
                if kick != 0.0:
                    u = z - c
                    v = v - kick * u * u * u
                zn = a11 * z + a12 * v + b1
                v = a21 * z + a22 * v + b2
                z = zn
                v = decay * v
                if use_noise:
                    v = v + sigma * noise[p, step]
                zn = a11 * z + a12 * v + b1
                v = a21 * z + a22 * v + b2
                z = zn
                if kick != 0.0:
                    u = z - c
                    v = v - kick * u * u * u
                step += 1
            s = seg_sample[j]
            if record and s >= 0:
                out[p, s] = z
        zf[p] = z
        vf[p] = v


def set_threads(n: int) -> None:
    """Limit the integrator's worker threads; 0 keeps numba's default."""
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))

