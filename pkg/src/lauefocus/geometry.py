"""Laboratory frame, detector, aperture pose, and ray tracing.

Conventions (laboratory frame): the illumination path runs along the z axis
with the sample at the origin, the detector hangs face-down above the sample
(plane normal along y), and x is transverse.  A source point at depth ``d``
sits at ``(0, 0, d)``.  The aperture's nominal plane is ``y = standoff +
heave``; its bars run along x and the pattern axis runs along z before any
rotation is applied.  Pattern coordinate ``u`` of a lab point equals its
coordinate along the (rotated) pattern axis measured from the mask's low
edge, i.e. the mask center maps to ``u = length_um / 2``.

Rotations follow the rigid-body naming of the aperture stage: yaw about the
mask normal (y), pitch about the transverse axis (x), roll about the
longitudinal axis (z).  They compose in the fixed documented order roll,
then pitch, then yaw, about the nominal (unrotated) axes, with the mask's
geometric center at nominal standoff as the rotation center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mask import ApertureMask

__all__ = [
    "Pose6DOF",
    "DetectorGeometry",
    "Ray",
    "COORDINATE_NAMES",
    "rotation_from_angles",
    "pixel_ray",
    "intersect_aperture",
    "depth_to_aperture_position",
    "aperture_position_to_depth",
]

COORDINATE_NAMES = ("surge", "sway", "heave", "yaw", "pitch", "roll")

DEFAULT_STANDOFF_UM = 1000.0


def _wrap_angle(deg: float) -> float:
    """Wrap an angle into (-180, 180]."""
    wrapped = math.fmod(deg + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


@dataclass(frozen=True)
class Pose6DOF:
    """Aperture pose: translations in micrometers, rotations in degrees."""

    surge: float = 0.0  # z translation
    sway: float = 0.0   # x translation
    heave: float = 0.0  # y translation
    yaw: float = 0.0    # about mask normal
    pitch: float = 0.0  # about transverse (bar) axis
    roll: float = 0.0   # about longitudinal (pattern) axis

    def __post_init__(self):
        for name in ("surge", "sway", "heave"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        for name in ("yaw", "pitch", "roll"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, _wrap_angle(v))

    def coordinate(self, name: str) -> float:
        if name not in COORDINATE_NAMES:
            raise ValueError(f"unknown coordinate {name!r}")
        return getattr(self, name)

    def replace(self, **kwargs) -> "Pose6DOF":
        values = {n: getattr(self, n) for n in COORDINATE_NAMES}
        values.update(kwargs)
        return Pose6DOF(**values)

    def to_dict(self) -> dict:
        return {
            "surge_um": self.surge,
            "sway_um": self.sway,
            "heave_um": self.heave,
            "yaw_deg": self.yaw,
            "pitch_deg": self.pitch,
            "roll_deg": self.roll,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6DOF":
        return cls(
            surge=float(d["surge_um"]),
            sway=float(d["sway_um"]),
            heave=float(d["heave_um"]),
            yaw=float(d["yaw_deg"]),
            pitch=float(d["pitch_deg"]),
            roll=float(d["roll_deg"]),
        )


@dataclass(frozen=True)
class DetectorGeometry:
    """Pixel-array detector in 90-degree reflection geometry above the sample."""

    distance_above_sample: float = 510900.0  # um
    side_length: float = 409600.0            # um
    pixels_per_side: int = 2048

    def __post_init__(self):
        if self.distance_above_sample <= 0 or self.side_length <= 0:
            raise ValueError("detector distance and side length must be positive")
        if self.pixels_per_side < 1:
            raise ValueError("pixels_per_side must be >= 1")

    @property
    def pixel_pitch(self) -> float:
        return self.side_length / self.pixels_per_side

    def pixel_center(self, pixel: tuple[int, int]) -> np.ndarray:
        """Lab-frame center of pixel (row, col); row indexes z, col indexes x."""
        row, col = pixel
        n = self.pixels_per_side
        if not (0 <= row < n and 0 <= col < n):
            raise ValueError(
                f"pixel {pixel} outside detector of {n}x{n} pixels")
        pitch = self.pixel_pitch
        x = (col + 0.5 - n / 2) * pitch
        z = (row + 0.5 - n / 2) * pitch
        return np.array([x, self.distance_above_sample, z])

    def to_dict(self) -> dict:
        return {
            "distance_um": self.distance_above_sample,
            "side_length_um": self.side_length,
            "pixels_per_side": self.pixels_per_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorGeometry":
        return cls(
            distance_above_sample=float(d["distance_um"]),
            side_length=float(d["side_length_um"]),
            pixels_per_side=int(d["pixels_per_side"]),
        )


class Ray(NamedTuple):
    """Ray from a point on the beam axis toward a detector pixel."""

    origin: np.ndarray
    direction: np.ndarray

    @classmethod
    def through(cls, origin, target) -> "Ray":
        origin = np.asarray(origin, dtype=np.float64)
        v = np.asarray(target, dtype=np.float64) - origin
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError("ray target coincides with origin")
        return cls(origin, v / norm)


def _axis_rotation(axis: np.ndarray, deg: float) -> np.ndarray:
    """Rotation matrix about a unit axis via the Euler-Rodrigues parameters."""
    half = math.radians(deg) / 2.0
    a = math.cos(half)
    s = math.sin(half)
    b, c, d = s * axis[0], s * axis[1], s * axis[2]
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def rotation_from_angles(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Proper rotation composing roll (z), then pitch (x), then yaw (y)."""
    r_roll = _axis_rotation(np.array([0.0, 0.0, 1.0]), roll)
    r_pitch = _axis_rotation(np.array([1.0, 0.0, 0.0]), pitch)
    r_yaw = _axis_rotation(np.array([0.0, 1.0, 0.0]), yaw)
    return r_yaw @ r_pitch @ r_roll


def pixel_ray(det: DetectorGeometry, pixel: tuple[int, int],
              source_depth: float) -> Ray:
    """Ray from the beam-axis point (0, 0, source_depth) through a pixel center."""
    target = det.pixel_center(pixel)
    return Ray.through(np.array([0.0, 0.0, float(source_depth)]), target)


class MaskFrame(NamedTuple):
    """Posed aperture frame: center at scan offset zero plus rotated axes."""

    center: np.ndarray   # mask center, lab frame, scan offset 0
    e_bar: np.ndarray    # along the bars (nominal x)
    e_normal: np.ndarray  # slab normal / optical axis (nominal y)
    e_pattern: np.ndarray  # pattern axis (nominal z)


def mask_frame(pose: Pose6DOF,
               standoff_um: float = DEFAULT_STANDOFF_UM) -> MaskFrame:
    rot = rotation_from_angles(pose.yaw, pose.pitch, pose.roll)
    center = np.array([pose.sway, standoff_um + pose.heave, pose.surge])
    return MaskFrame(center, rot[:, 0].copy(), rot[:, 1].copy(), rot[:, 2].copy())


class SlabTrace(NamedTuple):
    """Linear-in-scan-offset description of where rays pierce the slab.

    For each ray, the pattern coordinates of the face and mid-plane
    crossings vary affinely with the scan offset sigma:
    ``u_entry(sigma) = u_entry0 + sigma * du_dsigma`` and likewise for
    ``u_exit`` and ``u_mid`` (one shared slope per ray).  ``t_mid0`` and
    ``dt_dsigma`` give the ray parameter of the mid-plane crossing so
    callers can reject intersections behind the ray origin; ``valid``
    flags rays not parallel to the slab.
    """

    u_entry0: np.ndarray
    u_exit0: np.ndarray
    u_mid0: np.ndarray
    du_dsigma: np.ndarray
    t_mid0: np.ndarray
    dt_dsigma: np.ndarray
    valid: np.ndarray


_PARALLEL_TOL = 1e-12


def slab_trace(mask: ApertureMask, pose: Pose6DOF, origins, directions, *,
               standoff_um: float = DEFAULT_STANDOFF_UM,
               scan_direction=(0.0, 0.0, 1.0)) -> SlabTrace:
    """Trace batched rays through the posed slab, parameterized by scan offset.

    ``origins`` and ``directions`` broadcast over leading dimensions with a
    trailing axis of length 3.  The scan displaces the mask center by
    ``sigma * scan_direction`` (a unit vector in the xz-plane).
    """
    frame = mask_frame(pose, standoff_um)
    o = np.asarray(origins, dtype=np.float64)
    v = np.asarray(directions, dtype=np.float64)
    step = np.asarray(scan_direction, dtype=np.float64)

    n_hat = frame.e_normal
    e_u = frame.e_pattern
    half_len = mask.length_um / 2.0
    half_t = mask.thickness / 2.0

    denom = v @ n_hat
    valid = np.abs(denom) > _PARALLEL_TOL
    safe_denom = np.where(valid, denom, 1.0)

    co = frame.center - o                     # (..., 3)
    co_n = co @ n_hat
    co_u = -(co @ e_u)                        # e_u . (o - center)
    v_u = v @ e_u
    step_n = step @ n_hat
    step_u = step @ e_u

    t_mid0 = co_n / safe_denom
    dt_dsigma = step_n / safe_denom
    du_dsigma = dt_dsigma * v_u - step_u

    u_mid0 = co_u + t_mid0 * v_u + half_len
    face_shift = (half_t / safe_denom) * v_u
    # entry = face first crossed along the ray (lower t parameter)
    t_face_shift = half_t / safe_denom
    first_is_minus = t_face_shift >= 0
    u_minus = u_mid0 - face_shift
    u_plus = u_mid0 + face_shift
    u_entry0 = np.where(first_is_minus, u_minus, u_plus)
    u_exit0 = np.where(first_is_minus, u_plus, u_minus)
    return SlabTrace(u_entry0, u_exit0, u_mid0, du_dsigma,
                     t_mid0, dt_dsigma, valid)


_BEHIND_TOL = 1e-9


def intersect_aperture(ray: Ray, pose: Pose6DOF, mask: ApertureMask,
                       scan_offset: float, *,
                       standoff_um: float = DEFAULT_STANDOFF_UM,
                       scan_direction=(0.0, 0.0, 1.0)):
    """Pattern coordinates where a ray pierces the two faces of the slab.

    Returns ``(u_entry, u_exit)`` in micrometers along the pattern axis, or
    ``None`` if the ray runs parallel to the slab, crosses it behind the ray
    origin, or (for a non-cyclic mask) pierces outside the pattern extent.
    """
    tr = slab_trace(mask, pose, ray.origin, ray.direction,
                    standoff_um=standoff_um, scan_direction=scan_direction)
    if not bool(tr.valid):
        return None
    sigma = float(scan_offset)
    t_mid = float(tr.t_mid0 + sigma * tr.dt_dsigma)
    if t_mid < -_BEHIND_TOL:
        return None
    u_entry = float(tr.u_entry0 + sigma * tr.du_dsigma)
    u_exit = float(tr.u_exit0 + sigma * tr.du_dsigma)
    if not mask.cyclic:
        lo, hi = min(u_entry, u_exit), max(u_entry, u_exit)
        if lo < 0.0 or hi > mask.length_um:
            return None
    return u_entry, u_exit


def depth_to_aperture_position(mask: ApertureMask, pose: Pose6DOF,
                               det: DetectorGeometry, pixel: tuple[int, int],
                               depth: float, *,
                               standoff_um: float = DEFAULT_STANDOFF_UM):
    """Mid-slab pattern coordinate pierced by the depth->pixel ray at scan offset 0.

    Returns ``None`` if the ray misses the aperture.
    """
    u = _u_mid_of_depths(mask, pose, det, pixel,
                         np.asarray([float(depth)]), standoff_um)
    if u is None:
        return None
    u_val = float(u[0])
    if not mask.cyclic and not (0.0 <= u_val <= mask.length_um):
        return None
    return u_val


def _u_mid_of_depths(mask, pose, det, pixel, depths: np.ndarray,
                     standoff_um: float):
    """Vectorized mid-slab pattern coordinate for beam-axis source depths."""
    target = det.pixel_center(pixel)
    origins = np.zeros((depths.size, 3))
    origins[:, 2] = depths
    dirs = target[None, :] - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tr = slab_trace(mask, pose, origins, dirs, standoff_um=standoff_um)
    if not tr.valid.all() or (tr.t_mid0 < -_BEHIND_TOL).any():
        return None
    return tr.u_mid0


_NEWTON_STEP = 0.5
_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 60


def aperture_position_to_depth(mask: ApertureMask, pose: Pose6DOF,
                               det: DetectorGeometry, pixel: tuple[int, int],
                               u, *,
                               standoff_um: float = DEFAULT_STANDOFF_UM):
    """Beam-axis depth whose ray pierces the mid-slab plane at pattern coordinate u.

    Inverse of :func:`depth_to_aperture_position`; solved by a vectorized
    Newton iteration on the (smooth, near-affine) forward map.  Accepts a
    scalar or an array of pattern coordinates.
    """
    u_arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    scalar = np.isscalar(u) or np.asarray(u).ndim == 0

    d = np.zeros_like(u_arr)
    h = _NEWTON_STEP
    slope = None
    for it in range(_NEWTON_MAX_ITER):
        f = _u_mid_of_depths(mask, pose, det, pixel, d, standoff_um)
        if f is None:
            raise RuntimeError("ray misses aperture during depth registration")
        err = f - u_arr
        if np.max(np.abs(err)) <= _NEWTON_TOL:
            break
        # the map is near-affine; refresh the finite-difference slope only
        # occasionally and iterate with the frozen value
        if slope is None or it % 8 == 7:
            f_hi = _u_mid_of_depths(mask, pose, det, pixel, d + h, standoff_um)
            f_lo = _u_mid_of_depths(mask, pose, det, pixel, d - h, standoff_um)
            if f_hi is None or f_lo is None:
                raise RuntimeError(
                    "ray misses aperture during depth registration")
            slope = (f_hi - f_lo) / (2.0 * h)
            if np.any(np.abs(slope) < 1e-15):
                raise RuntimeError("degenerate depth-to-pattern slope")
        d = d - err / slope
    else:
        raise RuntimeError("depth registration did not converge")
    return float(d[0]) if scalar else d
