"""Camera model: lens correction, world/pixel projection and table-plane back-projection.

Coordinate frames
-----------------
World:   metric frame of the kitchen table (meters).
Camera:  optical center at the origin, z along the optical axis (meters).
Pixel:   image plane, u to the right, v down (pixels).

The lens polynomial maps a *distorted* (raw) point directly to its corrected
position::

    x_u = x_d (1 + k1 r^2 + k2 r^4 + k3 r^6) + 2 p1 x_d y_d + p2 (r^2 + 2 x_d^2)
    y_u = y_d (1 + k1 r^2 + k2 r^4 + k3 r^6) + p1 (r^2 + 2 y_d^2) + 2 p2 x_d y_d

with ``r^2 = x_d^2 + y_d^2``.  The reverse direction (simulating a raw camera)
has no closed form and is solved numerically by :func:`distort_pixel`.

By default the polynomial acts on raw pixel coordinates, before the inverse
intrinsics are applied.  A model can instead declare ``distortion_frame =
"normalized"``, in which case the same polynomial is evaluated on
``K^-1 [x, y, 1]`` and mapped back through ``K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Literal, Mapping

import numpy as np
import yaml

from vla_kitchen.errors import ParseError, VlaKitchenError

ORTHONORMAL_TOL = 1e-9
INVERSE_TOL = 1e-9
MAX_INVERSE_ITERATIONS = 50

DistortionFrame = Literal["pixel", "normalized"]


class GeometryError(VlaKitchenError):
    pass


class InvariantViolation(GeometryError, ValueError):
    """A camera parameter breaks a model invariant; ``field`` names the culprit."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class SingularIntrinsics(InvariantViolation):
    pass


class NonConvergence(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise InvariantViolation(name, f"non-finite value {v!r}")


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self) -> None:
        _check_finite("PixelPoint", self.x, self.y)

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y))


@dataclass(frozen=True)
class CameraPoint:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite("CameraPoint", self.x, self.y, self.z)

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.z))


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite("WorldPoint", self.x, self.y, self.z)

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.z))

    def distance(self, other: WorldPoint) -> float:
        return math.dist(tuple(self), tuple(other))


Matrix3 = tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]]


def _as_matrix3(name: str, values: Any) -> Matrix3:
    arr = np.asarray(values, dtype=float)
    if arr.shape == (9,):
        arr = arr.reshape(3, 3)
    if arr.shape != (3, 3):
        raise InvariantViolation(name, f"expected a 3x3 matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(name, "non-finite entry")
    return tuple(tuple(float(v) for v in row) for row in arr)  # type: ignore[return-value]


@dataclass(frozen=True)
class Intrinsics:
    """3x3 camera matrix mapping camera coordinates to pixels."""

    k: Matrix3

    def __post_init__(self) -> None:
        k = _as_matrix3("K", self.k)
        object.__setattr__(self, "k", k)
        if k[2][0] != 0.0 or k[2][1] != 0.0 or k[2][2] != 1.0:
            raise InvariantViolation("K", f"bottom row must be [0, 0, 1], got {list(k[2])}")
        if k[0][0] <= 0.0 or k[1][1] <= 0.0:
            raise InvariantViolation("K", "focal lengths must be positive")
        det = k[0][0] * k[1][1] - k[0][1] * k[1][0]
        if abs(det) <= 1e-12 * abs(k[0][0] * k[1][1]):
            raise SingularIntrinsics("K", "matrix is not invertible")

    @classmethod
    def from_focal(cls, fx: float, fy: float, cx: float, cy: float, skew: float = 0.0) -> Intrinsics:
        return cls(((fx, skew, cx), (0.0, fy, cy), (0.0, 0.0, 1.0)))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.k)

    def normalize(self, x: float, y: float) -> tuple[float, float]:
        """Return the first two entries of ``K^-1 [x, y, 1]``."""
        (a, b, c), (d, e, f), _ = self.k
        det = a * e - b * d
        if det == 0.0:
            raise SingularIntrinsics("K", "matrix is not invertible")
        dx, dy = x - c, y - f
        return (e * dx - b * dy) / det, (a * dy - d * dx) / det

    def project(self, xn: float, yn: float) -> tuple[float, float]:
        (a, b, c), (d, e, f), _ = self.k
        return a * xn + b * yn + c, d * xn + e * yn + f


@dataclass(frozen=True)
class DistortionCoefficients:
    """Radial (k1, k2, k3) and tangential (p1, p2) lens coefficients.

    ``y_cross_uses_p1`` swaps the coefficient of the ``x_d y_d`` term in the
    y-equation from p2 to p1, which makes p2 vanish from the y-equation.
    """

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0
    y_cross_uses_p1: bool = False

    def __post_init__(self) -> None:
        _check_finite("dist", self.k1, self.k2, self.p1, self.p2, self.k3)

    @property
    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.p1 == self.p2 == self.k3 == 0.0

    def as_list(self) -> list[float]:
        return [self.k1, self.k2, self.p1, self.p2, self.k3]


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid transform ``c = R w + t``."""

    r: Matrix3
    t: tuple[float, float, float]

    def __post_init__(self) -> None:
        r = _as_matrix3("R", self.r)
        object.__setattr__(self, "r", r)
        t = tuple(float(v) for v in np.asarray(self.t, dtype=float).reshape(-1))
        if len(t) != 3:
            raise InvariantViolation("t", f"expected 3 values, got {len(t)}")
        _check_finite("t", *t)
        object.__setattr__(self, "t", t)
        rm = np.array(r)
        ortho_err = float(np.max(np.abs(rm.T @ rm - np.eye(3))))
        if ortho_err >= ORTHONORMAL_TOL:
            raise InvariantViolation("R", f"not orthonormal (max |R^T R - I| = {ortho_err:.3e})")
        det = float(np.linalg.det(rm))
        if abs(det - 1.0) >= ORTHONORMAL_TOL:
            raise InvariantViolation("R", f"determinant {det:.12g} != +1 (reflection or scale)")

    @classmethod
    def identity(cls) -> Extrinsics:
        return cls(((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (0.0, 0.0, 0.0))

    @property
    def rotation(self) -> np.ndarray:
        return np.array(self.r)

    @property
    def projection(self) -> np.ndarray:
        """The 3x4 matrix ``[R | t]``."""
        return np.hstack([self.rotation, np.array(self.t).reshape(3, 1)])

    @property
    def homogeneous(self) -> np.ndarray:
        """The 4x4 matrix ``[[R, t], [0, 1]]``."""
        return np.vstack([self.projection, [0.0, 0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraModel:
    intrinsics: Intrinsics
    distortion: DistortionCoefficients
    extrinsics: Extrinsics
    table_z_camera: float
    distortion_frame: DistortionFrame = "pixel"

    def __post_init__(self) -> None:
        _check_finite("table_z_camera", self.table_z_camera)
        if self.table_z_camera <= 0.0:
            raise InvariantViolation("table_z_camera", "table plane must lie in front of the camera (> 0)")
        if self.distortion_frame not in ("pixel", "normalized"):
            raise InvariantViolation("distortion_frame", f"unknown frame {self.distortion_frame!r}")

    @classmethod
    def identity(cls, table_z_camera: float = 1.0) -> CameraModel:
        return cls(
            Intrinsics.from_focal(1.0, 1.0, 0.0, 0.0),
            DistortionCoefficients(),
            Extrinsics.identity(),
            table_z_camera,
        )


# -- lens polynomial -----------------------------------------------------------


def _undistort_xy(d: DistortionCoefficients, x: float, y: float) -> tuple[float, float]:
    r2 = x * x + y * y
    radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2
    cross_y = d.p1 if d.y_cross_uses_p1 else d.p2
    xu = x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
    yu = y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * cross_y * x * y
    return xu, yu


def _undistort_jacobian(d: DistortionCoefficients, x: float, y: float) -> tuple[float, float, float, float]:
    r2 = x * x + y * y
    radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2
    dradial = d.k1 + 2.0 * d.k2 * r2 + 3.0 * d.k3 * r2 * r2  # d(radial)/d(r^2)
    cross_y = d.p1 if d.y_cross_uses_p1 else d.p2
    dxx = radial + 2.0 * x * x * dradial + 2.0 * d.p1 * y + 6.0 * d.p2 * x
    dxy = 2.0 * x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y
    dyx = 2.0 * x * y * dradial + 2.0 * d.p1 * x + 2.0 * cross_y * y
    dyy = radial + 2.0 * y * y * dradial + 6.0 * d.p1 * y + 2.0 * cross_y * x
    return dxx, dxy, dyx, dyy


def undistort_pixel(d: DistortionCoefficients, p_distorted: PixelPoint) -> PixelPoint:
    """Correct a raw point with the lens polynomial (direct evaluation)."""
    if d.is_zero:
        return PixelPoint(p_distorted.x, p_distorted.y)
    return PixelPoint(*_undistort_xy(d, p_distorted.x, p_distorted.y))


def distort_pixel(d: DistortionCoefficients, p_undistorted: PixelPoint) -> PixelPoint:
    """Find the raw point whose correction is ``p_undistorted``.

    Newton iteration on ``undistort(p) - target``, started at the target and
    capped at :data:`MAX_INVERSE_ITERATIONS` steps.
    """
    if d.is_zero:
        return PixelPoint(p_undistorted.x, p_undistorted.y)
    tx, ty = p_undistorted.x, p_undistorted.y
    x, y = tx, ty
    residual = math.inf
    good_enough = 1e-13 * max(1.0, abs(tx), abs(ty))
    for _ in range(MAX_INVERSE_ITERATIONS):
        ux, uy = _undistort_xy(d, x, y)
        fx, fy = ux - tx, uy - ty
        residual = max(abs(fx), abs(fy))
        if residual <= good_enough:
            break
        a, b, c, e = _undistort_jacobian(d, x, y)
        det = a * e - b * c
        if det == 0.0 or not math.isfinite(det):
            break
        x -= (e * fx - b * fy) / det
        y -= (a * fy - c * fx) / det
        if not (math.isfinite(x) and math.isfinite(y)):
            break
    else:
        ux, uy = _undistort_xy(d, x, y)
        residual = max(abs(ux - tx), abs(uy - ty))
    if not residual <= INVERSE_TOL:
        raise NonConvergence(
            f"inverse lens correction did not converge for ({tx}, {ty}); residual {residual:.3e}"
        )
    return PixelPoint(x, y)


def remove_lens_distortion(m: CameraModel, p_raw: PixelPoint) -> PixelPoint:
    """Correct a raw pixel in the frame the model's coefficients were fitted in."""
    if m.distortion_frame == "pixel":
        return undistort_pixel(m.distortion, p_raw)
    xn, yn = m.intrinsics.normalize(p_raw.x, p_raw.y)
    un = undistort_pixel(m.distortion, PixelPoint(xn, yn))
    return PixelPoint(*m.intrinsics.project(un.x, un.y))


def apply_lens_distortion(m: CameraModel, p_undistorted: PixelPoint) -> PixelPoint:
    if m.distortion_frame == "pixel":
        return distort_pixel(m.distortion, p_undistorted)
    xn, yn = m.intrinsics.normalize(p_undistorted.x, p_undistorted.y)
    dn = distort_pixel(m.distortion, PixelPoint(xn, yn))
    return PixelPoint(*m.intrinsics.project(dn.x, dn.y))


# -- projection ----------------------------------------------------------------


def pixel_to_camera(k: Intrinsics, p_undistorted: PixelPoint, z_c: float) -> CameraPoint:
    """Back-project a corrected pixel to the camera frame at depth ``z_c``."""
    if not z_c > 0.0:
        raise GeometryError(f"depth must be positive, got {z_c}")
    xn, yn = k.normalize(p_undistorted.x, p_undistorted.y)
    return CameraPoint(xn * z_c, yn * z_c, z_c)


def world_to_camera(e: Extrinsics, w: WorldPoint) -> CameraPoint:
    r, t = e.r, e.t
    return CameraPoint(
        r[0][0] * w.x + r[0][1] * w.y + r[0][2] * w.z + t[0],
        r[1][0] * w.x + r[1][1] * w.y + r[1][2] * w.z + t[1],
        r[2][0] * w.x + r[2][1] * w.y + r[2][2] * w.z + t[2],
    )


def camera_to_world(e: Extrinsics, c: CameraPoint) -> WorldPoint:
    # closed-form inverse of [[R, t], [0, 1]]: w = R^T (c - t)
    r, t = e.r, e.t
    dx, dy, dz = c.x - t[0], c.y - t[1], c.z - t[2]
    return WorldPoint(
        r[0][0] * dx + r[1][0] * dy + r[2][0] * dz,
        r[0][1] * dx + r[1][1] * dy + r[2][1] * dz,
        r[0][2] * dx + r[1][2] * dy + r[2][2] * dz,
    )


def world_to_pixel(m: CameraModel, w: WorldPoint) -> tuple[PixelPoint, float]:
    """Project a world point to its *corrected* pixel and camera depth."""
    c = world_to_camera(m.extrinsics, w)
    if not c.z > 0.0:
        raise BehindCamera(f"point {tuple(w)} has camera depth {c.z} <= 0")
    u, v = m.intrinsics.project(c.x / c.z, c.y / c.z)
    return PixelPoint(u, v), c.z


def pixel_to_world(m: CameraModel, p_raw: PixelPoint) -> WorldPoint:
    """Locate a raw pixel on the table plane.

    Correct the lens error, back-project at the table depth, then move from
    the camera frame into the world frame.
    """
    p_u = remove_lens_distortion(m, p_raw)
    c = pixel_to_camera(m.intrinsics, p_u, m.table_z_camera)
    return camera_to_world(m.extrinsics, c)


def project_raw(m: CameraModel, w: WorldPoint) -> PixelPoint:
    """Where a raw (uncorrected) camera would image ``w``."""
    p_u, _ = world_to_pixel(m, w)
    return apply_lens_distortion(m, p_u)


def table_point(m: CameraModel, p_undistorted: PixelPoint) -> WorldPoint:
    """World point on the table plane seen at a corrected pixel."""
    return camera_to_world(m.extrinsics, pixel_to_camera(m.intrinsics, p_undistorted, m.table_z_camera))


# -- calibration documents -----------------------------------------------------

_REQUIRED_KEYS = ("K", "dist", "R", "t", "table_z_camera")
_OPTIONAL_KEYS = ("distortion_frame", "y_cross_uses_p1")
_DIST_KEYS = ("k1", "k2", "p1", "p2", "k3")


def _reals(doc: Mapping[str, Any], key: str, count: int, source: str | None) -> list[float]:
    raw = doc[key]
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        raw = [raw]
    if not isinstance(raw, list):
        raise ParseError(f"'{key}' must be a list of {count} reals", source)
    flat: list[Any] = []
    for item in raw:
        flat.extend(item if isinstance(item, list) else [item])
    if len(flat) != count:
        raise ParseError(f"'{key}' needs {count} reals, got {len(flat)}", source)
    for v in flat:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"'{key}' contains non-numeric entry {v!r}", source)
    return [float(v) for v in flat]


def _parse_dist(raw: Any, source: str | None) -> list[float]:
    if isinstance(raw, Mapping):
        missing = [k for k in _DIST_KEYS if k not in raw]
        extra = sorted(set(raw) - set(_DIST_KEYS))
        if missing:
            raise ParseError(f"'dist' missing coefficient(s) {', '.join(missing)}", source)
        if extra:
            raise ParseError(f"'dist' has unknown coefficient(s) {', '.join(map(str, extra))}", source)
        raw = [raw[k] for k in _DIST_KEYS]
    return _reals({"dist": raw}, "dist", 5, source)


def calibration_from_dict(doc: Any, source: str | None = None) -> CameraModel:
    if not isinstance(doc, Mapping):
        raise ParseError("calibration document must be a mapping", source)
    unknown = sorted(set(doc) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS))
    if unknown:
        raise ParseError(f"unknown key(s): {', '.join(map(str, unknown))}", source)
    missing = [k for k in _REQUIRED_KEYS if k not in doc]
    if missing:
        raise ParseError(f"missing key(s): {', '.join(missing)}", source)

    k = _reals(doc, "K", 9, source)
    dist = _parse_dist(doc["dist"], source)
    r = _reals(doc, "R", 9, source)
    t = _reals(doc, "t", 3, source)
    (table_z,) = _reals(doc, "table_z_camera", 1, source)
    frame = doc.get("distortion_frame", "pixel")
    cross = doc.get("y_cross_uses_p1", False)
    if not isinstance(cross, bool):
        raise ParseError("'y_cross_uses_p1' must be a boolean", source)

    return CameraModel(
        intrinsics=Intrinsics(tuple(tuple(k[i : i + 3]) for i in (0, 3, 6))),  # type: ignore[arg-type]
        distortion=DistortionCoefficients(*dist, y_cross_uses_p1=cross),
        extrinsics=Extrinsics(tuple(tuple(r[i : i + 3]) for i in (0, 3, 6)), tuple(t)),  # type: ignore[arg-type]
        table_z_camera=table_z,
        distortion_frame=frame,
    )


def load_calibration(source: str | Path | Mapping[str, Any]) -> CameraModel:
    """Load and validate a calibration document (YAML file path or mapping)."""
    if isinstance(source, Mapping):
        return calibration_from_dict(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read calibration: {exc}", str(path)) from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}", str(path)) from exc
    return calibration_from_dict(doc, str(path))


def calibration_to_dict(m: CameraModel) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "K": [v for row in m.intrinsics.k for v in row],
        "dist": m.distortion.as_list(),
        "R": [v for row in m.extrinsics.r for v in row],
        "t": list(m.extrinsics.t),
        "table_z_camera": m.table_z_camera,
    }
    if m.distortion_frame != "pixel":
        doc["distortion_frame"] = m.distortion_frame
    if m.distortion.y_cross_uses_p1:
        doc["y_cross_uses_p1"] = True
    return doc
