"""Fused elementwise loops for the per-iteration hot path.

Plain numpy spends most of a full-size iteration allocating temporaries for
complex elementwise updates; these loops touch each entry once. All inputs
must be C-contiguous and of identical shape.
"""

import numba as nb
import numpy as np

VAR_MIN = 1e-12
VAR_MAX = 1e12


@nb.njit(cache=True)
def input_update(h, xhs, a2ts, theta, damping, h_out, gamma_out, r_out, taur_out, dof_out):
    """tau_r = 1/sum|X|^2 tau_s; r = h + tau_r X^H s; Gaussian-prior posterior of h.

    Arrays are (B, n); ``dof_out[b]`` receives sum_n (1 - gamma/theta) for the
    EM noise update.
    """
    B, n_el = h.shape
    for b in range(B):
        dof = 0.0
        for n in range(n_el):
            d = min(max(a2ts[b, n], 1.0 / VAR_MAX), 1.0 / VAR_MIN)
            tr = 1.0 / d
            th = min(max(theta[b, n], VAR_MIN), VAR_MAX)
            r = h[b, n] + tr * xhs[b, n]
            shrink = th / (th + tr)
            hn = shrink * r
            if damping != 0.0:
                hn = (1.0 - damping) * hn + damping * h[b, n]
            g = min(max(shrink * tr, VAR_MIN), VAR_MAX)
            h_out[b, n] = hn
            gamma_out[b, n] = g
            r_out[b, n] = r
            taur_out[b, n] = tr
            dof += 1.0 - g / th
        dof_out[b] = dof


@nb.njit(cache=True)
def second_moment(h, gamma, literal, out):
    h = h.ravel()
    gamma = gamma.ravel()
    out = out.ravel()
    for n in range(h.size):
        g = gamma[n] * gamma[n] if literal else gamma[n]
        out[n] = h[n].real * h[n].real + h[n].imag * h[n].imag + g


@nb.njit(cache=True)
def correlate3(field, weights, sign, out):
    """out[b, i, j] = sum_{p,q} w[p, q] field[b, i + sign*p, j + sign*q], zero outside.

    Taps are visited in row-major order of the field offset (sign*p, sign*q), so a
    symmetric ``weights`` gives bit-identical results for both signs. Zero taps skipped.
    """
    B, R, C = field.shape
    dx = weights.shape[0] // 2
    dy = weights.shape[1] // 2
    out[:] = 0.0
    for sp in range(-dx, dx + 1):
        i_lo = max(0, -sp)
        i_hi = min(R, R - sp)
        for sq in range(-dy, dy + 1):
            w = weights[sign * sp + dx, sign * sq + dy]
            if w == 0.0:
                continue
            j_lo = max(0, -sq)
            j_hi = min(C, C - sq)
            for b in range(B):
                for i in range(i_lo, i_hi):
                    for j in range(j_lo, j_hi):
                        out[b, i, j] += w * field[b, i + sp, j + sq]


def correlate(field: np.ndarray, weights: np.ndarray, sign: int) -> np.ndarray:
    field = np.ascontiguousarray(field, dtype=float)
    shape = field.shape
    f3 = field.reshape((-1,) + shape[-2:])
    out = np.empty_like(f3)
    correlate3(f3, np.ascontiguousarray(weights, dtype=float), sign, out)
    return out.reshape(shape)
