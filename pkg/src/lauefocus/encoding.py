"""Scan plans, scan datasets, coding-matrix assembly, and normalization.

The coding matrix for one detector pixel maps a depth signal to the
intensity series recorded while the aperture scans: entry ``(m, n)`` is the
effective transmission along the ray from beam-axis depth ``depth_axis[n]``
to the pixel, with the aperture displaced by ``m`` scan steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (DEFAULT_STANDOFF_UM, DetectorGeometry, Pose6DOF,
                       slab_trace)
from .mask import ApertureMask, effective_transmission

__all__ = [
    "ScanPlan",
    "ScanDataset",
    "CodingMatrix",
    "ApertureMissError",
    "DegenerateContrastError",
    "assemble_coding_matrix",
    "normalize_measurements",
]


class ApertureMissError(RuntimeError):
    """A ray required by matrix assembly does not intersect the mask."""


class DegenerateContrastError(ValueError):
    """Scan series has too little modulation contrast to normalize."""


@dataclass(frozen=True)
class ScanPlan:
    """Aperture scan: number of steps, step size, and direction in the xz-plane."""

    n_steps: int
    step_size: float = 1.0
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,) or abs(d[1]) > 1e-12:
            raise ValueError("direction must be a 3-vector in the xz-plane")
        norm = np.linalg.norm(d)
        if not np.isclose(norm, 1.0, atol=1e-9):
            raise ValueError("direction must have unit norm")
        object.__setattr__(self, "direction", tuple(float(x) for x in d))

    def offsets(self, origin_um: float = 0.0) -> np.ndarray:
        """Scan offsets of all steps, micrometers along the scan direction."""
        return origin_um + np.arange(self.n_steps) * self.step_size

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "step_size_um": self.step_size,
                "direction": list(self.direction)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScanPlan":
        return cls(n_steps=int(d["n_steps"]),
                   step_size=float(d["step_size_um"]),
                   direction=tuple(d.get("direction", (0.0, 0.0, 1.0))))


@dataclass
class ScanDataset:
    """Per-pixel intensity series over scan steps (rows = steps, cols = pixels)."""

    data: np.ndarray
    step_size: float
    pixel_coords: list[tuple[int, int]]
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    origin_um: float = 0.0
    exposure_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("data must be 2-D (steps x pixels)")
        if self.data.shape[1] != len(self.pixel_coords):
            raise ValueError("pixel_coords length must match data columns")
        self.pixel_coords = [tuple(int(v) for v in p) for p in self.pixel_coords]

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[1]

    def series(self, column: int) -> np.ndarray:
        return self.data[:, column]

    def plan(self) -> ScanPlan:
        return ScanPlan(n_steps=self.n_steps, step_size=self.step_size,
                        direction=self.direction)

    def save(self, csv_path: str | Path) -> Path:
        """Write the data matrix as CSV plus a JSON sidecar next to it."""
        csv_path = Path(csv_path)
        if np.issubdtype(self.data.dtype, np.integer):
            np.savetxt(csv_path, self.data, fmt="%d", delimiter=",")
        else:
            np.savetxt(csv_path, self.data, fmt="%.12g", delimiter=",")
        meta = dict(self.exposure_meta)
        meta.setdefault("origin_um", self.origin_um)
        sidecar = {
            "step_size_um": self.step_size,
            "direction": list(self.direction),
            "pixel_coords": [list(p) for p in self.pixel_coords],
            "exposure_meta": meta,
        }
        sidecar_path = csv_path.with_suffix(".json")
        sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n")
        return sidecar_path

    @classmethod
    def load(cls, csv_path: str | Path) -> "ScanDataset":
        csv_path = Path(csv_path)
        sidecar = json.loads(csv_path.with_suffix(".json").read_text())
        data = np.loadtxt(csv_path, delimiter=",", ndmin=2)
        if np.allclose(data, np.round(data)):
            data = data.astype(np.int64)
        meta = dict(sidecar.get("exposure_meta", {}))
        origin = float(meta.get("origin_um", 0.0))
        return cls(
            data=data,
            step_size=float(sidecar["step_size_um"]),
            pixel_coords=[tuple(p) for p in sidecar["pixel_coords"]],
            direction=tuple(sidecar.get("direction", (0.0, 0.0, 1.0))),
            origin_um=origin,
            exposure_meta=meta,
        )


@dataclass
class CodingMatrix:
    """Per-pixel encoding operator: rows = scan steps, columns = depth bins."""

    entries: np.ndarray
    depth_axis: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        self.depth_axis = np.asarray(self.depth_axis, dtype=np.float64)
        m, n = self.entries.shape
        if m < n:
            raise ValueError(f"matrix must be overdetermined, got {m}x{n}")
        if self.depth_axis.shape != (n,):
            raise ValueError("depth_axis length must match matrix columns")
        if not (np.diff(self.depth_axis) > 0).all():
            raise ValueError("depth_axis must be strictly increasing")
        if self.entries.min() < -1e-12 or self.entries.max() > 1 + 1e-12:
            raise ValueError("matrix entries must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def _trace_pixel_depths(mask, pose, det, pixel, depths, standoff_um):
    """Slab trace for the rays from each beam-axis depth to one pixel."""
    target = det.pixel_center(pixel)
    origins = np.zeros((len(depths), 3))
    origins[:, 2] = depths
    dirs = target[None, :] - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return slab_trace(mask, pose, origins, dirs, standoff_um=standoff_um)


def assemble_coding_matrix(mask: ApertureMask, pose: Pose6DOF,
                           det: DetectorGeometry, pixel: tuple[int, int],
                           plan: ScanPlan, depth_axis, *,
                           scan_origin_um: float = 0.0,
                           standoff_um: float = DEFAULT_STANDOFF_UM) -> CodingMatrix:
    """Assemble the coding matrix for one pixel from mask, pose, and scan plan.

    Entry ``(m, n)`` is the thickness-averaged transmission along the ray
    from ``(0, 0, depth_axis[n])`` to the pixel center with the aperture at
    scan offset ``scan_origin_um + m * step_size``.  Raises
    :class:`ApertureMissError` naming the first offending step/depth if any
    ray misses the mask.
    """
    depth_axis = np.asarray(depth_axis, dtype=np.float64)
    if depth_axis.ndim != 1 or not (np.diff(depth_axis) > 0).all():
        raise ValueError("depth_axis must be 1-D strictly increasing")
    if plan.n_steps < depth_axis.size:
        raise ValueError(
            f"need n_steps >= depth bins, got {plan.n_steps} < {depth_axis.size}")

    tr = _trace_pixel_depths(mask, pose, det, pixel, depth_axis, standoff_um)
    sigma = plan.offsets(scan_origin_um)
    t_mid = tr.t_mid0[None, :] + sigma[:, None] * tr.dt_dsigma[None, :]
    bad = ~tr.valid[None, :] | (t_mid < -1e-9)

    u_en = tr.u_entry0[None, :] + sigma[:, None] * tr.du_dsigma[None, :]
    u_ex = tr.u_exit0[None, :] + sigma[:, None] * tr.du_dsigma[None, :]
    if not mask.cyclic:
        lo = np.minimum(u_en, u_ex)
        hi = np.maximum(u_en, u_ex)
        bad |= (lo < 0.0) | (hi > mask.length_um)
    if bad.any():
        m_idx, n_idx = np.argwhere(bad)[0]
        raise ApertureMissError(
            f"ray misses mask at scan step {m_idx} "
            f"(offset {sigma[m_idx]:.3f} um), depth {depth_axis[n_idx]:.3f} um")

    entries = effective_transmission(mask, u_en, u_ex)
    return CodingMatrix(entries=entries, depth_axis=depth_axis)


def normalize_measurements(d_raw) -> np.ndarray:
    """Normalize a raw intensity series to the coding matrix's [0, 1] range.

    Uses ``(d_raw - mu0) / (mu1 - mu0)`` with ``mu0 = d_min + 2 sqrt(d_min)``
    and ``mu1 = d_max - 2 sqrt(d_max)``, estimating the mean fully-blocked
    and fully-open intensities from the extremes (the 2-sqrt terms back off
    two standard deviations of counting noise).  Values are not clamped;
    noise may push them slightly outside [0, 1].

    Raises :class:`DegenerateContrastError` when the contrast is too small
    for the estimate (``mu1 <= mu0``), which marks the pixel unusable.
    """
    d = np.asarray(d_raw, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("d_raw must be a 1-D series of at least 2 samples")
    if not np.isfinite(d).all() or (d < 0).any():
        raise ValueError("d_raw must be finite and nonnegative")
    d_min, d_max = d.min(), d.max()
    mu0 = d_min + 2.0 * np.sqrt(d_min)
    mu1 = d_max - 2.0 * np.sqrt(d_max)
    if not mu1 > mu0:
        raise DegenerateContrastError(
            f"insufficient modulation contrast (mu0={mu0:.3f}, mu1={mu1:.3f})")
    return (d - mu0) / (mu1 - mu0)
