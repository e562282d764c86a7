"""Forward models: coded-aperture scans with counting noise, and a scanned
opaque-wire (differential-aperture) baseline for cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from .encoding import ScanDataset, ScanPlan, assemble_coding_matrix
from .geometry import DEFAULT_STANDOFF_UM, DetectorGeometry, Pose6DOF
from .mask import ApertureMask

__all__ = [
    "SampleModel",
    "SATURATION_COUNTS",
    "simulate_scan",
    "simulate_differential_aperture",
    "recover_differential",
]

SATURATION_COUNTS = 2**16 - 1


@dataclass
class SampleModel:
    """Scatterers (one per detector pixel) with depth profiles on a shared axis."""

    depth_axis: np.ndarray
    pixels: list[tuple[int, int]]
    profiles: np.ndarray            # (n_pixels, n_depths), nonnegative
    peak_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.depth_axis = np.asarray(self.depth_axis, dtype=np.float64)
        self.profiles = np.atleast_2d(np.asarray(self.profiles, dtype=np.float64))
        self.pixels = [tuple(int(v) for v in p) for p in self.pixels]
        if self.profiles.shape != (len(self.pixels), self.depth_axis.size):
            raise ValueError("profiles must be (n_pixels, n_depths)")
        if (self.profiles < 0).any():
            raise ValueError("profiles must be nonnegative")
        if self.peak_counts is None:
            self.peak_counts = np.full(len(self.pixels), 10000.0)
        else:
            self.peak_counts = np.broadcast_to(
                np.asarray(self.peak_counts, dtype=np.float64),
                (len(self.pixels),)).copy()

    @classmethod
    def calibration(cls, pixels, depth_axis, thickness_um: float = 10.0,
                    peak_counts: float = 10000.0) -> "SampleModel":
        """Uniform thin-slab preset: a unit-mass boxcar of the given thickness
        centered at the origin, identical on every pixel."""
        depth_axis = np.asarray(depth_axis, dtype=np.float64)
        box = (np.abs(depth_axis) <= thickness_um / 2.0).astype(np.float64)
        if box.sum() == 0:
            raise ValueError("calibration thickness smaller than one depth bin")
        box /= box.sum()
        profiles = np.tile(box, (len(pixels), 1))
        return cls(depth_axis=depth_axis, pixels=list(pixels),
                   profiles=profiles, peak_counts=peak_counts)

    def to_dict(self) -> dict:
        return {
            "depth_axis_um": self.depth_axis.tolist(),
            "pixels": [list(p) for p in self.pixels],
            "profiles": self.profiles.tolist(),
            "peak_counts": self.peak_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleModel":
        return cls(depth_axis=np.asarray(d["depth_axis_um"], dtype=np.float64),
                   pixels=[tuple(p) for p in d["pixels"]],
                   profiles=np.asarray(d["profiles"], dtype=np.float64),
                   peak_counts=np.asarray(d["peak_counts"], dtype=np.float64))


def _sample_counts(lam: np.ndarray, seed, pixel_index: int) -> np.ndarray:
    """Poisson counts via the inverse CDF on a per-pixel substream.

    The substream is derived from (seed, pixel index) so concurrent or
    reordered pixel simulation cannot change the data.
    """
    rng = np.random.default_rng([int(seed), int(pixel_index)])
    u = rng.random(lam.shape)
    return poisson.ppf(u, lam).astype(np.int64)


def simulate_scan(sample: SampleModel, mask: ApertureMask, pose: Pose6DOF,
                  det: DetectorGeometry, plan: ScanPlan,
                  noise_seed: int | None = None,
                  background: float = 10.0, *,
                  scan_origin_um: float = 0.0,
                  standoff_um: float = DEFAULT_STANDOFF_UM) -> ScanDataset:
    """Simulate a coded-aperture scan; returns raw counts per step and pixel.

    Expected counts per pixel are ``background + peak * (A @ profile)`` with
    ``A`` the pixel's coding matrix at the given pose.  ``noise_seed=None``
    disables counting noise (the expectation is returned); otherwise Poisson
    counts are drawn reproducibly per pixel.  Output saturates at 16 bits.
    """
    if background < 0:
        raise ValueError("background must be nonnegative")
    columns = []
    for idx, pixel in enumerate(sample.pixels):
        matrix = assemble_coding_matrix(
            mask, pose, det, pixel, plan, sample.depth_axis,
            scan_origin_um=scan_origin_um, standoff_um=standoff_um)
        lam = background + sample.peak_counts[idx] * (
            matrix.entries @ sample.profiles[idx])
        if noise_seed is None:
            columns.append(np.minimum(lam, SATURATION_COUNTS))
        else:
            counts = _sample_counts(lam, noise_seed, idx)
            columns.append(np.minimum(counts, SATURATION_COUNTS))
    data = np.column_stack(columns)
    meta = {
        "origin_um": scan_origin_um,
        "background": background,
        "noise_seed": noise_seed,
        "standoff_um": standoff_um,
        "kind": "coded_aperture",
    }
    return ScanDataset(data=data, step_size=plan.step_size,
                       pixel_coords=list(sample.pixels),
                       direction=plan.direction, origin_um=scan_origin_um,
                       exposure_meta=meta)


def _pierce_z(det: DetectorGeometry, pixel, depths: np.ndarray,
              standoff_um: float) -> np.ndarray:
    """z where the straight depth->pixel ray crosses the wire plane."""
    target = det.pixel_center(pixel)
    f = standoff_um / det.distance_above_sample
    return depths + f * (target[2] - depths)


def simulate_differential_aperture(sample: SampleModel, det: DetectorGeometry,
                                   plan: ScanPlan, *,
                                   wire_width_um: float = 100.0,
                                   wire_start_um: float | None = None,
                                   background: float = 10.0,
                                   noise_seed: int | None = None,
                                   standoff_um: float = DEFAULT_STANDOFF_UM) -> ScanDataset:
    """Simulate the scanned-opaque-wire baseline at the same standoff.

    The wire is a thin fully-absorbing interval of the given width in the
    plane ``y = standoff``, swept along +z; no pose freedom.  By default the
    wire starts with its leading (high-z) edge just below every ray so the
    sweep occludes each scatterer exactly once.
    """
    zs = [_pierce_z(det, p, sample.depth_axis, standoff_um)
          for p in sample.pixels]
    z_min = min(z.min() for z in zs)
    if wire_start_um is None:
        wire_start_um = z_min - wire_width_um - 2.0 * plan.step_size

    columns = []
    offsets = plan.offsets(0.0)
    for idx, pixel in enumerate(sample.pixels):
        z = zs[idx]
        lo = wire_start_um + offsets
        occluded = (z[None, :] >= lo[:, None]) & \
                   (z[None, :] <= (lo + wire_width_um)[:, None])
        lam = background + sample.peak_counts[idx] * (
            (~occluded) @ sample.profiles[idx])
        if noise_seed is None:
            columns.append(np.minimum(lam, SATURATION_COUNTS))
        else:
            counts = _sample_counts(lam, noise_seed, idx)
            columns.append(np.minimum(counts, SATURATION_COUNTS))
    data = np.column_stack(columns)
    meta = {
        "origin_um": 0.0,
        "background": background,
        "noise_seed": noise_seed,
        "standoff_um": standoff_um,
        "wire_start_um": wire_start_um,
        "wire_width_um": wire_width_um,
        "kind": "differential_aperture",
    }
    return ScanDataset(data=data, step_size=plan.step_size,
                       pixel_coords=list(sample.pixels),
                       direction=plan.direction, origin_um=0.0,
                       exposure_meta=meta)


def recover_differential(dataset: ScanDataset, det: DetectorGeometry,
                         depth_axis, *,
                         standoff_um: float | None = None) -> np.ndarray:
    """Depth profiles from a differential-aperture dataset by frame differencing.

    Intensity lost between consecutive frames is attributed to the depth
    whose ray the wire's leading edge newly occluded; accumulated into the
    nearest bin of ``depth_axis``.  Returns an (n_pixels, n_depths) array on
    the same axis convention as the coded recovery.
    """
    depth_axis = np.asarray(depth_axis, dtype=np.float64)
    meta = dataset.exposure_meta
    if standoff_um is None:
        standoff_um = float(meta.get("standoff_um", DEFAULT_STANDOFF_UM))
    wire_start = float(meta["wire_start_um"])
    wire_width = float(meta["wire_width_um"])

    step = dataset.step_size
    offsets = dataset.origin_um + np.arange(dataset.n_steps) * step
    # leading-edge position at the midpoint of each frame-to-frame step
    edge_z = wire_start + wire_width + offsets[:-1] + step / 2.0

    f = standoff_um / det.distance_above_sample
    profiles = np.zeros((dataset.n_pixels, depth_axis.size))
    bin_width = np.median(np.diff(depth_axis)) if depth_axis.size > 1 else step
    for idx in range(dataset.n_pixels):
        pixel = dataset.pixel_coords[idx]
        target_z = det.pixel_center(pixel)[2]
        series = dataset.data[:, idx].astype(np.float64)
        drops = series[:-1] - series[1:]
        depths = (edge_z - f * target_z) / (1.0 - f)
        bins = np.rint((depths - depth_axis[0]) / bin_width).astype(np.int64)
        valid = (bins >= 0) & (bins < depth_axis.size)
        np.add.at(profiles[idx], bins[valid], drops[valid])
    return np.clip(profiles, 0.0, None)
