"""Batched transmission-sampling kernels for the reconstruction hot path.

Semantics are identical to :func:`lauefocus.mask.effective_transmission`;
that numpy implementation is the readable reference and the property tests
assert agreement.  The numba path exists only because offset recovery
evaluates millions of window transmissions per pose.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _window_transmission_np(u_entry0, u_exit0, du_dsigma, sigma, prefix,
                            coeff, bar_width, t_lo, t_hi):
    n_bits = coeff.size
    total = prefix[n_bits]
    ue = u_entry0[:, None, :] + sigma[None, :, None] * du_dsigma[:, None, :]
    ux = u_exit0[:, None, :] + sigma[None, :, None] * du_dsigma[:, None, :]
    lo = np.minimum(ue, ux)
    hi = np.maximum(ue, ux)
    i_lo = np.floor_divide(lo, bar_width).astype(np.int64)
    i_hi = np.floor_divide(hi, bar_width).astype(np.int64)
    c_lo = coeff[i_lo % n_bits]
    c_hi = coeff[i_hi % n_bits]
    q_hi, r_hi = np.divmod(i_hi, n_bits)
    q_lo, r_lo = np.divmod(i_lo + 1, n_bits)
    interior = (q_hi - q_lo) * total + prefix[r_hi] - prefix[r_lo]
    piece = (c_lo * ((i_lo + 1) * bar_width - lo)
             + c_hi * (hi - i_hi * bar_width) + interior)
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = piece / (hi - lo)
    return np.where(i_lo == i_hi, c_lo, np.clip(avg, t_lo, t_hi))


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _window_transmission_nb(u_entry0, u_exit0, du_dsigma, sigma, prefix,
                                coeff, bar_width, t_lo, t_hi):
        n_cand, n_depth = u_entry0.shape
        n_step = sigma.size
        n_bits = coeff.size
        total = prefix[n_bits]
        out = np.empty((n_cand, n_step, n_depth))
        for k in range(n_cand):
            for n in range(n_depth):
                ue0 = u_entry0[k, n]
                ux0 = u_exit0[k, n]
                du = du_dsigma[k, n]
                for m in range(n_step):
                    shift = sigma[m] * du
                    a = ue0 + shift
                    b = ux0 + shift
                    if a <= b:
                        lo, hi = a, b
                    else:
                        lo, hi = b, a
                    # floor(x / w) matches the numpy reference bit for bit
                    i_lo = int(np.floor(lo / bar_width))
                    i_hi = int(np.floor(hi / bar_width))
                    c_lo = coeff[i_lo % n_bits]
                    if i_lo == i_hi:
                        out[k, m, n] = c_lo
                        continue
                    c_hi = coeff[i_hi % n_bits]
                    interior = ((i_hi // n_bits - (i_lo + 1) // n_bits) * total
                                + prefix[i_hi % n_bits]
                                - prefix[(i_lo + 1) % n_bits])
                    piece = (c_lo * ((i_lo + 1) * bar_width - lo)
                             + c_hi * (hi - i_hi * bar_width) + interior)
                    avg = piece / (hi - lo)
                    if avg < t_lo:
                        avg = t_lo
                    elif avg > t_hi:
                        avg = t_hi
                    out[k, m, n] = avg
        return out

    def window_transmission(u_entry0, u_exit0, du_dsigma, sigma, prefix,
                            coeff, bar_width, t_lo, t_hi):
        return _window_transmission_nb(
            np.ascontiguousarray(u_entry0), np.ascontiguousarray(u_exit0),
            np.ascontiguousarray(du_dsigma), np.ascontiguousarray(sigma),
            prefix, coeff, float(bar_width), float(t_lo), float(t_hi))

else:

    window_transmission = _window_transmission_np


def window_transmission_reference(u_entry0, u_exit0, du_dsigma, sigma, prefix,
                                  coeff, bar_width, t_lo, t_hi):
    """Pure-numpy twin of :func:`window_transmission`, for cross-checks."""
    return _window_transmission_np(u_entry0, u_exit0, du_dsigma, sigma,
                                   prefix, coeff, bar_width, t_lo, t_hi)
