"""Per-pixel recovery: aperture offset search, nonnegative depth signal, medians.

The recovery solves, for one detector pixel, the joint problem of which
aperture window encoded the data (offset search on a scan-step grid) and
what nonnegative depth signal produced it (active-set nonnegative least
squares).  Each candidate offset carries its own ray-traced depth axis, so
the winning signal comes back registered to beam-axis depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .encoding import ApertureMissError, CodingMatrix, ScanPlan
from .geometry import (DEFAULT_STANDOFF_UM, DetectorGeometry, Pose6DOF,
                       aperture_position_to_depth, slab_trace)
from .mask import ApertureMask

__all__ = [
    "DepthSignal",
    "ConvergenceError",
    "EmptySignalError",
    "nnls_solve",
    "recover_offset_and_signal",
    "median_position",
    "fwhm",
    "smoothed_boxcar",
]


class ConvergenceError(RuntimeError):
    """Iteration cap exceeded; carries the best iterate found in ``best``."""

    def __init__(self, message: str, best: np.ndarray):
        super().__init__(message)
        self.best = best


class EmptySignalError(ValueError):
    """Signal has no mass, so it has no median position."""


@dataclass
class DepthSignal:
    """Recovered nonnegative depth signal with its aperture offset.

    ``offset_p`` is the pattern coordinate (micrometers along the pattern
    axis) registered to the first depth bin at scan offset zero.
    """

    offset_p: float
    signal: np.ndarray
    depth_axis: np.ndarray
    residual: float

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.depth_axis = np.asarray(self.depth_axis, dtype=np.float64)
        if self.signal.shape != self.depth_axis.shape:
            raise ValueError("signal and depth_axis must have equal length")
        if (self.signal < 0).any():
            raise ValueError("signal must be nonnegative")
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")
        if not (np.diff(self.depth_axis) > 0).all():
            raise ValueError("depth_axis must be strictly increasing")

    def to_dict(self, pixel=None) -> dict:
        return {
            "pixel": list(pixel) if pixel is not None else None,
            "offset_um": self.offset_p,
            "residual": self.residual,
            "depth_um": self.depth_axis.tolist(),
            "signal": self.signal.tolist(),
        }


def _solve_pd(G, b):
    """Solve a (near) positive-definite system, falling back to lstsq."""
    try:
        c = np.linalg.cholesky(G)
        y = np.linalg.solve(c, b)
        return np.linalg.solve(c.T, y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(G, b, rcond=None)[0]


def _nnls_gram(G: np.ndarray, b: np.ndarray, x0=None, max_iter=None,
               kkt_tol: float = 1e-8):
    """Lawson-Hanson active-set NNLS on the normal equations.

    Minimizes ``s^T G s - 2 b^T s`` over ``s >= 0`` (the least-squares
    objective up to the constant ``d^T d``).  Returns the solution; raises
    :class:`ConvergenceError` with the best iterate if the cap is reached.
    """
    n = b.size
    if max_iter is None:
        max_iter = max(3 * n, 30)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)

    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        start = x0 > 0
        if start.any():
            z = _solve_pd(G[np.ix_(start, start)], b[start])
            if (z > 0).all():
                passive = start
                x[passive] = z

    iters = 0
    while True:
        w = b - G @ x  # negative gradient of the half-objective
        active = ~passive
        if not active.any() or w[active].max() <= kkt_tol:
            return x
        j = np.flatnonzero(active)[np.argmax(w[active])]
        passive[j] = True
        while True:
            iters += 1
            if iters > max_iter:
                raise ConvergenceError(
                    f"NNLS did not converge within {max_iter} iterations", x)
            idx = np.flatnonzero(passive)
            z_sub = _solve_pd(G[np.ix_(idx, idx)], b[idx])
            if (z_sub > 0).all():
                x = np.zeros(n)
                x[idx] = z_sub
                break
            z = np.zeros(n)
            z[idx] = z_sub
            shrink = passive & (z <= 0)
            ratios = x[shrink] / (x[shrink] - z[shrink])
            alpha = ratios.min()
            x = x + alpha * (z - x)
            passive &= x > 0
            x[~passive] = 0.0


def nnls_solve(A, d, *, x0=None, max_iter=None, kkt_tol: float = 1e-8) -> np.ndarray:
    """Solve ``argmin_{s >= 0} ||A s - d||_2`` by active-set iteration.

    Satisfies the KKT conditions with the gradient taken as
    ``A^T (A s - d)``: active (zero) coordinates have gradient
    ``>= -kkt_tol`` and free coordinates have ``|gradient| <= kkt_tol``.
    An optional ``x0`` seeds the initial passive set.
    """
    A = np.asarray(A, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if A.ndim != 2 or d.ndim != 1 or A.shape[0] != d.size:
        raise ValueError("A must be (M, N) with d of length M")
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"need M >= N, got {A.shape[0]}x{A.shape[1]}")
    if not np.isfinite(A).all() or not np.isfinite(d).all():
        raise ValueError("inputs must be finite")
    return _nnls_gram(A.T @ A, A.T @ d, x0=x0, max_iter=max_iter,
                      kkt_tol=kkt_tol)


def smoothed_boxcar(depth_axis, thickness_um: float) -> np.ndarray:
    """Boxcar over the given thickness centered on zero depth, softened by a
    3-bin triangular kernel; used to seed the signal solve."""
    depth_axis = np.asarray(depth_axis, dtype=np.float64)
    box = (np.abs(depth_axis) <= thickness_um / 2.0).astype(np.float64)
    kernel = np.array([0.25, 0.5, 0.25])
    return np.convolve(box, kernel, mode="same")


def median_position(sig: DepthSignal) -> float:
    """Depth at which the cumulative signal reaches half its total mass.

    Each bin's mass is spread uniformly over the bin's extent (edges halfway
    between neighboring depth samples), and the half-mass crossing is found
    by linear interpolation on the resulting cumulative polyline.  A single
    occupied bin therefore returns that bin's depth exactly.
    """
    s = sig.signal
    total = s.sum()
    if total <= 0:
        raise EmptySignalError("signal has zero total mass")
    d = sig.depth_axis
    if d.size == 1:
        return float(d[0])
    mid = 0.5 * (d[1:] + d[:-1])
    edges = np.concatenate(([d[0] - (mid[0] - d[0])], mid,
                            [d[-1] + (d[-1] - mid[-1])]))
    cum = np.concatenate(([0.0], np.cumsum(s)))
    half = 0.5 * total
    k = int(np.searchsorted(cum, half))
    k = min(max(k, 1), d.size)
    frac = (half - cum[k - 1]) / (cum[k] - cum[k - 1])
    return float(edges[k - 1] + frac * (edges[k] - edges[k - 1]))


def fwhm(values, axis) -> float:
    """Full width at half maximum of a sampled profile.

    Uses the outermost half-maximum crossings, linearly interpolated
    between samples.
    """
    v = np.asarray(values, dtype=np.float64)
    x = np.asarray(axis, dtype=np.float64)
    if v.max() <= 0:
        raise EmptySignalError("profile has no positive values")
    half = v.max() / 2.0
    above = v >= half
    idx = np.flatnonzero(above)
    i0, i1 = idx[0], idx[-1]
    if i0 == 0:
        left = x[0]
    else:
        f = (half - v[i0 - 1]) / (v[i0] - v[i0 - 1])
        left = x[i0 - 1] + f * (x[i0] - x[i0 - 1])
    if i1 == v.size - 1:
        right = x[-1]
    else:
        f = (half - v[i1 + 1]) / (v[i1] - v[i1 + 1])
        right = x[i1 + 1] - f * (x[i1 + 1] - x[i1])
    return float(right - left)


_SCAN_ROWS = 64
# Safety slack when pruning candidates by their scan-phase bound: the bound
# (unconstrained least-squares residual on a row subset) can never exceed
# the full NNLS residual, so a candidate whose bound already exceeds the
# best NNLS residual (plus this slack for the regularized solve) cannot win.
_PRUNE_SLACK_REL = 1e-9
_SPLINE_POINTS = 257


def _candidate_depth_axes(mask, pose, det, pixel, u_nominal, deltas,
                          standoff_um):
    """Depth axes for all candidate offsets by inverting the u -> depth map.

    The map is solved exactly on a coarse grid of pattern coordinates and
    interpolated for the (many) candidate targets; it is nearly affine, so
    the interpolation error is far below the registration tolerances.
    """
    targets = u_nominal[None, :] + deltas[:, None]
    u_lo, u_hi = targets.min(), targets.max()
    pad = 1e-6 + 0.01 * (u_hi - u_lo)
    grid = np.linspace(u_lo - pad, u_hi + pad, _SPLINE_POINTS)
    d_grid = aperture_position_to_depth(mask, pose, det, pixel, grid,
                                        standoff_um=standoff_um)
    flat = np.interp(targets.ravel(), grid, d_grid)
    return flat.reshape(targets.shape)


def recover_offset_and_signal(mask: ApertureMask, pose: Pose6DOF,
                              det: DetectorGeometry, pixel: tuple[int, int],
                              plan: ScanPlan, d, *, depth_axis,
                              scan_origin_um: float = 0.0,
                              standoff_um: float = DEFAULT_STANDOFF_UM,
                              init=None,
                              offset_halfwidth_um: float | None = None) -> DepthSignal:
    """Recover the aperture offset and depth signal for one pixel's series.

    Exhaustively searches window offsets on the scan-step grid (by default
    every window placement that keeps all traced rays on the mask; a
    half-width restricts the search symmetrically when the caller can bound
    the misalignment), solving NNLS for each candidate and keeping the
    offset of smallest residual, ties broken toward the smallest offset.
    Candidates whose unconstrained least-squares residual already exceeds
    the best NNLS residual are skipped; the bound is exact, so the result
    matches the full scan.

    ``d`` is the normalized intensity series; ``depth_axis`` is the nominal
    depth grid whose ray-traced window slides during the search.  The
    returned signal's ``depth_axis`` is the winning candidate's registered
    axis, and ``offset_p`` the pattern coordinate of its first depth bin at
    scan offset zero.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (plan.n_steps,):
        raise ValueError(f"series length {d.shape} != n_steps {plan.n_steps}")
    depth_axis = np.asarray(depth_axis, dtype=np.float64)
    n_depth = depth_axis.size
    if plan.n_steps < n_depth:
        raise ValueError("need n_steps >= depth bins")

    target = det.pixel_center(pixel)
    sigma = plan.offsets(scan_origin_um)
    length = mask.length_um
    step = plan.step_size

    # nominal window position and span, used to enumerate candidate offsets
    origins = np.zeros((n_depth, 3))
    origins[:, 2] = depth_axis
    dirs = target[None, :] - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tr0 = slab_trace(mask, pose, origins, dirs, standoff_um=standoff_um,
                     scan_direction=plan.direction)
    if not tr0.valid.all():
        raise ApertureMissError(f"rays from pixel {pixel} run parallel to mask")
    u_nominal = tr0.u_mid0

    u_lo = np.minimum.reduce([
        (tr0.u_entry0 + s * tr0.du_dsigma).min() for s in (sigma[0], sigma[-1])
    ] + [(tr0.u_exit0 + s * tr0.du_dsigma).min() for s in (sigma[0], sigma[-1])])
    u_hi = np.maximum.reduce([
        (tr0.u_entry0 + s * tr0.du_dsigma).max() for s in (sigma[0], sigma[-1])
    ] + [(tr0.u_exit0 + s * tr0.du_dsigma).max() for s in (sigma[0], sigma[-1])])

    if mask.cyclic:
        k_lo, k_hi = 0, int(np.floor(length / step)) - 1
    else:
        k_lo = int(np.ceil((-u_lo) / step - 1e-9)) - 1
        k_hi = int(np.floor((length - u_hi) / step + 1e-9)) + 1
    if offset_halfwidth_um is not None:
        k_lo = max(k_lo, int(np.ceil(-offset_halfwidth_um / step)))
        k_hi = min(k_hi, int(np.floor(offset_halfwidth_um / step)))
    if k_hi < k_lo:
        raise ApertureMissError(
            f"no candidate aperture window for pixel {pixel}")
    deltas = np.arange(k_lo, k_hi + 1) * step

    x0 = None
    if init is not None:
        x0 = np.asarray(init, dtype=np.float64)
        if x0.shape != (n_depth,):
            raise ValueError("init must match the depth axis length")

    dd = float(d @ d)
    slack = _PRUNE_SLACK_REL * max(dd, 1.0)

    depth_rows = _candidate_depth_axes(mask, pose, det, pixel, u_nominal,
                                       deltas, standoff_um)
    n_cand = deltas.size

    # trace every candidate window once
    org = np.zeros((n_cand, n_depth, 3))
    org[:, :, 2] = depth_rows
    dv = target[None, None, :] - org
    dv /= np.linalg.norm(dv, axis=2, keepdims=True)
    tr = slab_trace(mask, pose, org, dv, standoff_um=standoff_um,
                    scan_direction=plan.direction)
    u_entry0, u_exit0, du_dsigma = tr.u_entry0, tr.u_exit0, tr.du_dsigma
    sig_ends = np.array([sigma[0], sigma[-1]])
    ok = tr.valid.all(axis=1)
    t_ends = tr.t_mid0[:, :, None] + tr.dt_dsigma[:, :, None] \
        * sig_ends[None, None, :]
    ok &= (t_ends >= -1e-9).all(axis=(1, 2))
    if not mask.cyclic:
        for face in (u_entry0, u_exit0):
            ends = face[:, :, None] + du_dsigma[:, :, None] \
                * sig_ends[None, None, :]
            ok &= (ends >= 0.0).all(axis=(1, 2))
            ok &= (ends <= length).all(axis=(1, 2))
    if not ok.any():
        raise ApertureMissError(
            f"no candidate aperture window stays on the mask for pixel {pixel}")

    # scan phase: unconstrained residual on a row subset lower-bounds every
    # candidate's full NNLS residual (subset of the squared-error terms)
    stride = max(1, plan.n_steps // _SCAN_ROWS)
    if plan.n_steps // stride < n_depth:
        stride = 1
    sub = np.arange(0, plan.n_steps, stride)
    sigma_sub = sigma[sub]
    d_sub = d[sub]
    dd_sub = float(d_sub @ d_sub)
    eye = np.eye(n_depth)
    A_scan = _kernels.window_transmission(
        u_entry0, u_exit0, du_dsigma, sigma_sub,
        mask._prefix, mask._coeff, mask.bar_width,
        mask.transmission_one, mask.transmission_zero)
    gram = np.matmul(A_scan.transpose(0, 2, 1), A_scan)
    rhs = A_scan.transpose(0, 2, 1) @ d_sub
    jitter = 1e-13 * np.trace(gram, axis1=1, axis2=2) / n_depth + 1e-300
    gram_j = gram + jitter[:, None, None] * eye[None]
    try:
        sol = np.linalg.solve(gram_j, rhs[..., None])[..., 0]
        raw_bound = dd_sub - np.einsum("kn,kn->k", rhs, sol)
    except np.linalg.LinAlgError:
        raw_bound = np.zeros(n_cand)  # no pruning information
    bound = np.where(ok, np.maximum(raw_bound, 0.0), np.inf)

    # resolve phase: full-length NNLS in ascending-bound order; once the
    # bound reaches the best residual no later candidate can win
    order = np.lexsort((deltas, bound))
    best = None  # (residual_sq, delta, signal, depth_row, A)
    for k in order:
        if not ok[k]:
            continue
        if best is not None and bound[k] >= best[0] + slack:
            break
        A = _kernels.window_transmission(
            u_entry0[k:k + 1], u_exit0[k:k + 1], du_dsigma[k:k + 1], sigma,
            mask._prefix, mask._coeff, mask.bar_width,
            mask.transmission_one, mask.transmission_zero)[0]
        gram = A.T @ A
        rhs = A.T @ d
        try:
            x = _nnls_gram(gram, rhs, x0=x0)
        except ConvergenceError as err:
            x = err.best
        res_sq = float(dd - 2.0 * rhs @ x + x @ gram @ x)
        if (best is None or res_sq < best[0]
                or (res_sq == best[0] and deltas[k] < best[1])):
            best = (res_sq, deltas[k], x, depth_rows[k], A)

    if best is None:
        raise ApertureMissError(
            f"no candidate aperture window stays on the mask for pixel {pixel}")

    res_sq, delta, x, depth_row, A_best = best
    residual = float(np.linalg.norm(A_best @ x - d))
    return DepthSignal(offset_p=float(u_nominal[0] + delta), signal=x,
                       depth_axis=depth_row, residual=residual)


def matrix_for_offset(mask, pose, det, pixel, plan, depth_axis, delta_um, *,
                      scan_origin_um: float = 0.0,
                      standoff_um: float = DEFAULT_STANDOFF_UM) -> CodingMatrix:
    """Coding matrix of the candidate window shifted by ``delta_um``.

    Exposes the matrix the offset search scores for one candidate; useful
    for diagnostics and tests.
    """
    from .encoding import assemble_coding_matrix

    depth_axis = np.asarray(depth_axis, dtype=np.float64)
    origins = np.zeros((depth_axis.size, 3))
    origins[:, 2] = depth_axis
    target = det.pixel_center(pixel)
    dirs = target[None, :] - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tr = slab_trace(mask, pose, origins, dirs, standoff_um=standoff_um,
                    scan_direction=plan.direction)
    shifted = aperture_position_to_depth(
        mask, pose, det, pixel, tr.u_mid0 + delta_um, standoff_um=standoff_um)
    return assemble_coding_matrix(mask, pose, det, pixel, plan, shifted,
                                  scan_origin_um=scan_origin_um,
                                  standoff_um=standoff_um)
