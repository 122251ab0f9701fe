"""Calibrated pinhole cameras: pixel+depth <-> robot-base-frame 3D points.

All geometry here is float64. Depth is the camera-frame z coordinate (not
ray length). The pixel-center convention maps integer pixel (row i, col j)
to the continuous image coordinate (x' = j + 0.5, y' = i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Intrinsics", "Extrinsics", "CameraModel",
    "InvalidDepthError", "BehindCameraError", "CalibrationError",
    "unproject", "project", "unproject_map",
    "look_at_extrinsics", "save_rig", "load_rig",
]


class InvalidDepthError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CalibrationError(f"focal lengths must be positive: {self.fx}, {self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsics:
    """Rigid camera-to-base transform, 4x4 homogeneous, meters."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise CalibrationError(f"extrinsics must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise CalibrationError("extrinsic rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise CalibrationError("extrinsic rotation block must have det +1")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise CalibrationError("extrinsics last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> np.ndarray:
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return inv


@dataclass(frozen=True)
class CameraModel:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError("image dimensions must be positive")


def unproject(pixel, depth: float, cam: CameraModel) -> np.ndarray:
    """Lift a continuous pixel coordinate plus depth to the base frame."""
    x, y = float(pixel[0]), float(pixel[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise InvalidDepthError(f"pixel coordinates must be finite, got {pixel}")
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    k = cam.intrinsics
    cam_pt = depth * np.array([(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0])
    return _rigid_apply(cam.extrinsics.matrix, cam_pt[0], cam_pt[1], cam_pt[2])


def _rigid_apply(e: np.ndarray, px, py, pz):
    """Apply a 4x4 rigid transform componentwise.

    Written as explicit multiply-adds (same association for scalars and
    arrays) so unproject and unproject_map agree bit-for-bit.
    """
    out = [px * e[i, 0] + py * e[i, 1] + pz * e[i, 2] + e[i, 3] for i in range(3)]
    return np.stack(out, axis=-1)


def project(point, cam: CameraModel):
    """Base-frame point -> (continuous pixel (x', y'), depth)."""
    p = np.append(np.asarray(point, dtype=np.float64), 1.0)
    q = cam.extrinsics.inverse() @ p
    if q[2] <= 0:
        raise BehindCameraError(f"point {point} is behind the camera (z={q[2]:.4f})")
    k = cam.intrinsics
    return (k.fx * q[0] / q[2] + k.cx, k.fy * q[1] / q[2] + k.cy), q[2]


def unproject_map(depth_image: np.ndarray, cam: CameraModel):
    """Per-pixel unprojection of an H x W depth image.

    Returns (points, valid): points is H x W x 3 in the base frame computed
    at pixel centers, valid marks pixels with depth > 0. Invalid points are
    zero-filled.
    """
    d = np.asarray(depth_image, dtype=np.float64)
    if d.shape != (cam.height, cam.width):
        raise ValueError(
            f"depth image shape {d.shape} does not match camera "
            f"({cam.height}, {cam.width})")
    k = cam.intrinsics
    cols = np.arange(cam.width) + 0.5
    rows = np.arange(cam.height) + 0.5
    xn = (cols - k.cx) / k.fx
    yn = (rows - k.cy) / k.fy
    rays = np.stack([np.broadcast_to(xn, d.shape),
                     np.broadcast_to(yn[:, None], d.shape),
                     np.ones_like(d)], axis=-1)
    valid = d > 0
    cam_pts = rays * d[..., None]
    pts = _rigid_apply(cam.extrinsics.matrix,
                       cam_pts[..., 0], cam_pts[..., 1], cam_pts[..., 2])
    pts[~valid] = 0.0
    return pts, valid


def look_at_extrinsics(eye, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """Camera-to-base transform for a camera at ``eye`` looking at ``target``.

    Camera convention: +z along the optical axis, +x to the right, +y down
    in the image; built so image rows increase toward world-down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise CalibrationError("eye and target coincide")
    z = fwd / norm
    xr = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(xr)
    if xn < 1e-12:
        raise CalibrationError("viewing direction parallel to up vector")
    x = xr / xn
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return Extrinsics(m)


def save_rig(path, cameras: list[CameraModel]):
    """One text block per view: intrinsics, size, row-major extrinsics."""
    lines = [f"views {len(cameras)}"]
    for i, cam in enumerate(cameras):
        k = cam.intrinsics
        lines.append(f"view {i}")
        for field in ("fx", "fy", "cx", "cy"):
            lines.append(f"{field} {float(getattr(k, field))!r}")
        lines.append(f"width {cam.width}")
        lines.append(f"height {cam.height}")
        flat = " ".join(repr(float(v)) for v in cam.extrinsics.matrix.reshape(-1))
        lines.append(f"extrinsics {flat}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rig(path) -> list[CameraModel]:
    with open(path) as fh:
        tokens = [ln.split() for ln in fh if ln.strip()]
    fields = {}
    cams = []
    pending = None

    def flush():
        if pending is None:
            return
        cams.append(CameraModel(
            Intrinsics(fields["fx"], fields["fy"], fields["cx"], fields["cy"]),
            Extrinsics(np.array(fields["extrinsics"]).reshape(4, 4)),
            int(fields["width"]), int(fields["height"])))

    for parts in tokens:
        key, vals = parts[0], parts[1:]
        if key == "views":
            continue
        if key == "view":
            flush()
            pending = int(vals[0])
            fields = {}
        elif key == "extrinsics":
            fields[key] = [float(v) for v in vals]
        else:
            fields[key] = float(vals[0])
    flush()
    if not cams:
        raise CalibrationError(f"no camera blocks found in {path}")
    return cams
