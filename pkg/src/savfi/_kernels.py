"""Compiled inner loops for echo synthesis and delay-and-sum.

Both loops accumulate in a fixed order (scatterers in cloud order, elements
in index order) so results are bit-reproducible.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def echo_train(pos_x, pos_z, d_tx, weight, elem_x, t0, rate, lead, n_up, c, tan_dir):
    """Two-tap impulse trains ``[n_el, n_up]`` on the oversampled time grid."""
    n_el = elem_x.shape[0]
    n_s = pos_x.shape[0]
    out = np.zeros((n_el, n_up))
    for e in range(n_el):
        xe = elem_x[e]
        for s in range(n_s):
            w = weight[s]
            if w == 0.0:
                continue
            dx = pos_x[s] - xe
            z = pos_z[s]
            if abs(dx) > tan_dir * z:
                continue
            tau = (d_tx[s] + math.sqrt(dx * dx + z * z)) / c
            k = (tau - t0) * rate + lead
            if k < 0.0 or k >= n_up - 1:
                continue
            k0 = int(math.floor(k))
            f = k - k0
            out[e, k0] += w * (1.0 - f)
            out[e, k0 + 1] += w * f
    return out


@njit(cache=True)
def das_complex(base_re, base_im, tx_idx, tx_ph_re, tx_ph_im, rx_idx, rx_ph_re, rx_ph_im,
                rx_weight, elements, offset):
    """Baseband DAS: sum over elements of weight * interp(base) * phase."""
    n_act, n_pix = rx_idx.shape
    n_t = base_re.shape[1]
    out_re = np.zeros(n_pix)
    out_im = np.zeros(n_pix)
    for p in range(n_pix):
        acc_re = 0.0
        acc_im = 0.0
        tr = tx_ph_re[p]
        ti = tx_ph_im[p]
        for a in range(n_act):
            w = rx_weight[a, p]
            if w == 0.0:
                continue
            idx = tx_idx[p] + rx_idx[a, p] - offset
            i0 = int(math.floor(idx))
            if i0 < 0 or i0 >= n_t - 1:
                continue
            f = idx - i0
            e = elements[a]
            vr = base_re[e, i0] * (1.0 - f) + base_re[e, i0 + 1] * f
            vi = base_im[e, i0] * (1.0 - f) + base_im[e, i0 + 1] * f
            # total phase = tx phase * rx phase
            pr = tr * rx_ph_re[a, p] - ti * rx_ph_im[a, p]
            pi = tr * rx_ph_im[a, p] + ti * rx_ph_re[a, p]
            acc_re += w * (vr * pr - vi * pi)
            acc_im += w * (vr * pi + vi * pr)
        out_re[p] = acc_re
        out_im[p] = acc_im
    return out_re, out_im


@njit(cache=True)
def das_real(data, tx_idx, rx_idx, rx_weight, elements, offset):
    n_act, n_pix = rx_idx.shape
    n_t = data.shape[1]
    out = np.zeros(n_pix)
    for p in range(n_pix):
        acc = 0.0
        for a in range(n_act):
            w = rx_weight[a, p]
            if w == 0.0:
                continue
            idx = tx_idx[p] + rx_idx[a, p] - offset
            i0 = int(math.floor(idx))
            if i0 < 0 or i0 >= n_t - 1:
                continue
            f = idx - i0
            e = elements[a]
            acc += w * (data[e, i0] * (1.0 - f) + data[e, i0 + 1] * f)
        out[p] = acc
    return out
