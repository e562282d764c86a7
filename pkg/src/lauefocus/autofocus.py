"""Digital autofocus: variance-of-positions cost over selected pixels,
minimized by cyclic coordinate descent with a boundary-comparison binary
line search per pose coordinate.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import (DegenerateContrastError, ScanDataset,
                       normalize_measurements)
from .geometry import (COORDINATE_NAMES, DEFAULT_STANDOFF_UM,
                       DetectorGeometry, Pose6DOF)
from .mask import ApertureMask
from .recon import median_position, recover_offset_and_signal

__all__ = [
    "FocusProblem",
    "FocusTrace",
    "CycleRecord",
    "NoSignalError",
    "NoPixelsError",
    "FocusAbortError",
    "focus_cost",
    "cost_from_positions",
    "binary_line_search",
    "coordinate_descent",
    "select_pixels",
    "bin_scan",
    "sweep_coordinate",
]

ANGLE_COORDINATES = ("yaw", "pitch", "roll")
DEFAULT_COORDINATE_ORDER = ("pitch", "yaw", "surge", "heave", "roll", "sway")
DEFAULT_BOUNDS = {
    "surge": (-300.0, 300.0), "sway": (-300.0, 300.0), "heave": (-300.0, 300.0),
    "yaw": (-3.0, 3.0), "pitch": (-3.0, 3.0), "roll": (-3.0, 3.0),
}


class NoSignalError(RuntimeError):
    """Every candidate pixel series was degenerate; nothing to focus."""


class NoPixelsError(RuntimeError):
    """Pixel selection produced an empty list."""


class FocusAbortError(RuntimeError):
    """Cost evaluation failed mid-descent; carries the trace so far."""

    def __init__(self, message: str, trace: "FocusTrace"):
        super().__init__(message)
        self.trace = trace


def select_pixels(frames, min_snr: float, *,
                  saturation_value: int = 2**16 - 1):
    """Select high signal-to-noise pixels from an image stack.

    ``frames`` is (n_frames, rows, cols) or (n_frames, n_pixels).  Per-pixel
    SNR is ``peak / sqrt(peak)`` (Poisson counting); saturated pixels
    (peak >= saturation_value) are excluded.  Returns ``(pixels, snr)``
    sorted by decreasing SNR, where pixels are (row, col) tuples for image
    stacks and column indices for flat stacks.
    """
    stack = np.asarray(frames, dtype=np.float64)
    if stack.ndim not in (2, 3):
        raise ValueError("frames must be (S, H, W) or (S, P)")
    if (stack < 0).any():
        raise ValueError("frames must be nonnegative")
    peak = stack.max(axis=0)
    with np.errstate(invalid="ignore"):
        snr = np.sqrt(peak)
    keep = (snr >= min_snr) & (peak < saturation_value) & (peak > 0)
    flat_idx = np.flatnonzero(keep.ravel())
    if flat_idx.size == 0:
        raise NoPixelsError(f"no pixels with SNR >= {min_snr}")
    order = np.argsort(-snr.ravel()[flat_idx], kind="stable")
    flat_idx = flat_idx[order]
    snr_sel = snr.ravel()[flat_idx]
    if stack.ndim == 3:
        rows, cols = np.unravel_index(flat_idx, peak.shape)
        pixels = [(int(r), int(c)) for r, c in zip(rows, cols)]
    else:
        pixels = [int(i) for i in flat_idx]
    return pixels, snr_sel


def bin_scan(dataset: ScanDataset, n_bins: int) -> list[ScanDataset]:
    """Split a scan into contiguous equal bins, each keeping its own origin."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if dataset.n_steps % n_bins != 0:
        raise ValueError(
            f"{dataset.n_steps} steps not divisible into {n_bins} bins")
    size = dataset.n_steps // n_bins
    out = []
    for i in range(n_bins):
        rows = dataset.data[i * size:(i + 1) * size]
        out.append(ScanDataset(
            data=rows.copy(), step_size=dataset.step_size,
            pixel_coords=list(dataset.pixel_coords),
            direction=dataset.direction,
            origin_um=dataset.origin_um + i * size * dataset.step_size,
            exposure_meta=dict(dataset.exposure_meta)))
    return out


@dataclass
class FocusProblem:
    """Everything the autofocus cost needs: data bins, geometry, and settings.

    ``pixels`` restricts the analysis to a subset of the dataset's pixel
    coordinates (default: all).  Degenerate-contrast series are dropped at
    construction; if nothing survives, cost evaluation raises
    :class:`NoSignalError`.
    """

    datasets: list[ScanDataset]
    mask: ApertureMask
    det: DetectorGeometry
    depth_axis: np.ndarray
    pixels: list[tuple[int, int]] | None = None
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    tol_rot: float = 0.01
    tol_trans: float = 1.0
    max_cycles: int = 100
    coordinate_order: tuple = DEFAULT_COORDINATE_ORDER
    standoff_um: float = DEFAULT_STANDOFF_UM
    offset_halfwidth_um: float | None = None
    cost_about_origin: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if isinstance(self.datasets, ScanDataset):
            self.datasets = [self.datasets]
        if not self.datasets:
            raise ValueError("need at least one dataset bin")
        self.depth_axis = np.asarray(self.depth_axis, dtype=np.float64)
        if self.tol_rot <= 0 or self.tol_trans <= 0:
            raise ValueError("tolerances must be positive")
        unknown = set(self.coordinate_order) - set(COORDINATE_NAMES)
        if unknown:
            raise ValueError(f"unknown coordinates in order: {unknown}")
        for name in self.coordinate_order:
            if name not in self.bounds:
                raise ValueError(f"missing bounds for coordinate {name!r}")

        if self.pixels is None:
            self.pixels = list(self.datasets[0].pixel_coords)
        self.pixels = [tuple(p) for p in self.pixels]

        # normalize once per (bin, pixel); drop degenerate series
        self._entries = []   # (bin_idx, pixel, normalized series)
        for b, ds in enumerate(self.datasets):
            for pixel in self.pixels:
                col = ds.pixel_coords.index(tuple(pixel))
                try:
                    norm = normalize_measurements(ds.data[:, col])
                except DegenerateContrastError:
                    continue
                self._entries.append((b, tuple(pixel), norm))

    @property
    def n_entries(self) -> int:
        return len(self._entries)

    def tolerance_for(self, coord: str) -> float:
        return self.tol_rot if coord in ANGLE_COORDINATES else self.tol_trans

    def _recover_entry(self, pose: Pose6DOF, entry):
        b, pixel, series = entry
        ds = self.datasets[b]
        sig = recover_offset_and_signal(
            self.mask, pose, self.det, pixel, ds.plan(), series,
            depth_axis=self.depth_axis, scan_origin_um=ds.origin_um,
            standoff_um=self.standoff_um,
            offset_halfwidth_um=self.offset_halfwidth_um)
        return median_position(sig), sig.residual

    def recover_entries(self, pose: Pose6DOF):
        """Median positions and residuals for every usable (pixel, bin) entry.

        Entry order is fixed at construction, so the reduction is
        deterministic no matter how the recoveries are scheduled.
        """
        if not self._entries:
            raise NoSignalError("all pixel series were degenerate")
        if self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                results = list(pool.map(
                    lambda e: self._recover_entry(pose, e), self._entries))
        else:
            results = [self._recover_entry(pose, e) for e in self._entries]
        positions = np.array([r[0] for r in results])
        residuals = np.array([r[1] for r in results])
        return positions, residuals

    def recover_positions(self, pose: Pose6DOF) -> np.ndarray:
        return self.recover_entries(pose)[0]


def cost_from_positions(positions, about_origin: bool = True) -> float:
    """Spread statistic of recovered positions: mean squared distance from
    the origin (default), or variance about the mean."""
    p = np.asarray(positions, dtype=np.float64)
    if p.size == 0:
        raise NoSignalError("no recovered positions")
    if about_origin:
        return float(np.mean(p**2))
    return float(np.var(p))


def focus_cost(pose: Pose6DOF, problem: FocusProblem) -> float:
    """Autofocus cost at a pose: recover every selected (pixel, bin) entry,
    register the median positions to beam-axis depths, and return their
    mean squared distance from the origin."""
    positions = problem.recover_positions(pose)
    return cost_from_positions(positions, problem.cost_about_origin)


_AMBIGUITY_TOL = 1e-12


def _line_search_with_value(f, lo: float, hi: float, tol: float):
    """Interval-halving line search returning the best evaluated point.

    Implements the boundary-comparison rule: the midpoint value is compared
    against the two boundary values and the half adjacent to the farther
    boundary value (where the minimum of a unimodal function cannot lie) is
    discarded; boundary values carry forward so each halving costs one new
    evaluation.  When the comparison is ambiguous within 1e-12 the two
    quarter points decide, ties shrinking toward the lower half.  Stops when
    the interval is no wider than ``tol``.

    Returns ``(x, f(x), trace)`` where ``x`` is the best evaluated point
    (for a unimodal function it lies within ``tol`` of the true minimizer)
    and ``trace`` is the list of brackets after each halving.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    f_lo = f(lo)
    f_hi = f(hi)
    best_x, best_f = (lo, f_lo) if f_lo <= f_hi else (hi, f_hi)
    trace = [(lo, hi)]
    while (hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid < best_f:
            best_x, best_f = mid, f_mid
        d_lo = abs(f_mid - f_lo)
        d_hi = abs(f_mid - f_hi)
        if abs(d_lo - d_hi) <= _AMBIGUITY_TOL:
            f_ql = f(0.5 * (lo + mid))
            f_qr = f(0.5 * (mid + hi))
            if f_ql < best_f:
                best_x, best_f = 0.5 * (lo + mid), f_ql
            if f_qr < best_f:
                best_x, best_f = 0.5 * (mid + hi), f_qr
            keep_low = f_ql <= f_qr
        else:
            keep_low = d_lo < d_hi
        if keep_low:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
        trace.append((lo, hi))
    return best_x, best_f, trace


def binary_line_search(f, lo: float, hi: float, tol: float,
                       return_trace: bool = False):
    """Minimize a unimodal scalar function by interval halving.

    Returns an ``x`` within ``tol`` of the minimizer (the bracket shrinks to
    at most ``tol`` and always contains it).  With ``return_trace`` the
    sequence of brackets after each halving is returned as well.
    """
    x, _, trace = _line_search_with_value(f, lo, hi, tol)
    return (x, trace) if return_trace else x


@dataclass
class CycleRecord:
    cycle: int
    pose: Pose6DOF
    cost: float
    changes: dict
    changes_rel: dict

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "pose": self.pose.to_dict(),
            "cost": self.cost,
            "changes": dict(self.changes),
            "changes_rel": dict(self.changes_rel),
        }


@dataclass
class FocusTrace:
    """Per-cycle record of a coordinate-descent run plus the final summary."""

    cycles: list[CycleRecord]
    converged: bool
    final_pose: Pose6DOF
    positions: np.ndarray
    n_cost_evals: int

    @property
    def costs(self) -> np.ndarray:
        return np.array([c.cost for c in self.cycles])

    @property
    def positions_mean(self) -> float:
        return float(np.mean(self.positions))

    @property
    def positions_std(self) -> float:
        return float(np.std(self.positions))

    def to_json_lines(self) -> str:
        lines = [json.dumps(c.to_dict()) for c in self.cycles]
        lines.append(json.dumps({
            "summary": True,
            "converged": self.converged,
            "pose": self.final_pose.to_dict(),
            "n_cost_evals": self.n_cost_evals,
            "positions_um": self.positions.tolist(),
            "positions_mean_um": self.positions_mean,
            "positions_std_um": self.positions_std,
        }))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json_lines())


def coordinate_descent(problem: FocusProblem, init: Pose6DOF) -> FocusTrace:
    """Cyclic coordinate descent over the six pose coordinates.

    Each coordinate is minimized within its bounds by
    :func:`binary_line_search` at the coordinate's tolerance; a move is
    accepted only if it strictly lowers the cost, so the per-cycle cost
    sequence is non-increasing.  Terminates when every coordinate's change
    within a cycle falls below its tolerance, or after ``max_cycles``.
    """
    for name in problem.coordinate_order:
        lo, hi = problem.bounds[name]
        v = init.coordinate(name)
        if not lo <= v <= hi:
            raise ValueError(
                f"initial {name}={v} outside bounds [{lo}, {hi}]")

    evals = 0

    def cost(pose: Pose6DOF) -> float:
        nonlocal evals
        evals += 1
        return focus_cost(pose, problem)

    cycles: list[CycleRecord] = []
    pose = init

    def abort(exc: Exception):
        partial = FocusTrace(cycles=cycles, converged=False, final_pose=pose,
                             positions=np.array([]), n_cost_evals=evals)
        raise FocusAbortError(f"cost evaluation failed: {exc}", partial) from exc

    try:
        current = cost(pose)
    except (RuntimeError, ValueError) as exc:
        abort(exc)

    converged = False
    for cycle in range(1, problem.max_cycles + 1):
        changes = {}
        try:
            for name in problem.coordinate_order:
                lo, hi = problem.bounds[name]
                tol = problem.tolerance_for(name)
                old = pose.coordinate(name)

                def f(x, _name=name):
                    return cost(pose.replace(**{_name: x}))

                x_new, c_new, _ = _line_search_with_value(f, lo, hi, tol)
                if c_new < current:
                    pose = pose.replace(**{name: x_new})
                    current = c_new
                    changes[name] = abs(x_new - old)
                else:
                    changes[name] = 0.0
        except (RuntimeError, ValueError) as exc:
            abort(exc)
        rel = {n: changes[n] / problem.tolerance_for(n) for n in changes}
        cycles.append(CycleRecord(cycle=cycle, pose=pose, cost=current,
                                  changes=changes, changes_rel=rel))
        if all(changes[n] <= problem.tolerance_for(n)
               for n in problem.coordinate_order):
            converged = True
            break

    positions = problem.recover_positions(pose)
    return FocusTrace(cycles=cycles, converged=converged, final_pose=pose,
                      positions=positions, n_cost_evals=evals)


def sweep_coordinate(problem: FocusProblem, pose: Pose6DOF, coordinate: str,
                     values) -> np.ndarray:
    """Evaluate data fidelity and signal fidelity along one pose coordinate.

    Returns an array of rows ``(value, data_fidelity, signal_fidelity)``
    where data fidelity is the summed squared recovery residual over all
    entries and signal fidelity is the autofocus cost.
    """
    if coordinate not in COORDINATE_NAMES:
        raise ValueError(f"unknown coordinate {coordinate!r}")
    rows = []
    for v in np.asarray(values, dtype=np.float64):
        positions, residuals = problem.recover_entries(
            pose.replace(**{coordinate: float(v)}))
        rows.append((float(v), float(np.sum(residuals**2)),
                     cost_from_positions(positions, problem.cost_about_origin)))
    return np.array(rows)
