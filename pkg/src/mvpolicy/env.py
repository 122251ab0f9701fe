"""Synthetic tabletop scenes rendered by an analytic raycaster.

Scenes are a few colored primitives (boxes, spheres, squat button
cylinders) resting on a table box. Rays are parametrized by camera-frame
depth: a pixel's ray is p(d) = t + d * (R K^-1 [x', y', 1]) so the
intersection parameter d is directly the value that belongs in the depth
map. Shading is flat Lambert with one fixed directional light; pixels that
hit nothing get the background color and depth 0 (invalid).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, Extrinsics, Intrinsics, look_at_extrinsics

__all__ = ["PALETTE", "SceneObject", "SceneSpec", "render_view",
           "default_rig", "rotz"]

PALETTE = {
    "red": (0.82, 0.12, 0.12),
    "green": (0.10, 0.65, 0.18),
    "blue": (0.12, 0.25, 0.80),
    "yellow": (0.85, 0.78, 0.10),
    "purple": (0.55, 0.15, 0.70),
}
TABLE_COLOR = (0.45, 0.42, 0.40)
BACKGROUND = (0.05, 0.06, 0.08)
LIGHT_DIR = np.array([0.25, -0.35, 0.9])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.45


def rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SceneObject:
    kind: str                 # box | sphere | cylinder
    color: str                # palette name
    size: tuple               # box: full extents; sphere: (r,); cylinder: (r, h)
    position: tuple           # center, meters, base frame
    yaw: float = 0.0          # rotation about z (boxes only)

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.color not in PALETTE and self.color != "table":
            raise ValueError(f"color {self.color!r} not in palette")

    @property
    def top_point(self) -> np.ndarray:
        p = np.asarray(self.position, dtype=np.float64)
        if self.kind == "sphere":
            return p + [0.0, 0.0, self.size[0]]
        if self.kind == "box":
            return p + [0.0, 0.0, self.size[2] / 2.0]
        return p + [0.0, 0.0, self.size[1] / 2.0]

    def rgb(self) -> np.ndarray:
        return np.asarray(TABLE_COLOR if self.color == "table" else
                          PALETTE[self.color])


@dataclass(frozen=True)
class SceneSpec:
    table_half: float
    objects: tuple            # SceneObject tuple, objects[target_index] is the goal
    target_index: int
    instruction: str
    table_thickness: float = 0.05

    def target(self) -> SceneObject:
        return self.objects[self.target_index]

    def to_dict(self) -> dict:
        return {
            "table_half": self.table_half,
            "table_thickness": self.table_thickness,
            "target_index": self.target_index,
            "instruction": self.instruction,
            "objects": [
                {"kind": o.kind, "color": o.color, "size": list(o.size),
                 "position": list(o.position), "yaw": o.yaw}
                for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(o["kind"], o["color"], tuple(o["size"]),
                                 tuple(o["position"]), o.get("yaw", 0.0))
                     for o in d["objects"])
        return cls(table_half=d["table_half"], objects=objs,
                   target_index=d["target_index"], instruction=d["instruction"],
                   table_thickness=d.get("table_thickness", 0.05))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _ray_grid(cam: CameraModel):
    k = cam.intrinsics
    cols = (np.arange(cam.width) + 0.5 - k.cx) / k.fx
    rows = (np.arange(cam.height) + 0.5 - k.cy) / k.fy
    m = np.stack([np.broadcast_to(cols, (cam.height, cam.width)),
                  np.broadcast_to(rows[:, None], (cam.height, cam.width)),
                  np.ones((cam.height, cam.width))], axis=-1)
    e = cam.extrinsics.matrix
    q = m @ e[:3, :3].T            # direction scaled so d = camera-frame depth
    origin = e[:3, 3]
    return origin, q


def _intersect_sphere(origin, q, center, radius):
    oc = origin - np.asarray(center)
    a = (q * q).sum(-1)
    b = 2.0 * (q @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    d = (-b - sq) / (2 * a)
    d = np.where(hit & (d > 1e-9), d, np.inf)
    d_safe = np.where(np.isfinite(d), d, 0.0)
    normal = origin + q * d_safe[..., None] - np.asarray(center)
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.divide(normal, norm, out=np.zeros_like(normal), where=norm > 0)
    return d, normal


def _intersect_box(origin, q, center, half, yaw):
    r_inv = rotz(-yaw)
    o = (origin - np.asarray(center)) @ r_inv.T
    qq = q @ r_inv.T
    half = np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / qq
        t2 = (half - o) / qq
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab miss unless origin is inside that slab
    inside = np.abs(o) <= half
    parallel = np.abs(qq) < 1e-14
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (far > 0) & (near > 1e-9)
    d = np.where(hit, near, np.inf)
    axis = tmin.argmax(axis=-1)
    sign = -np.sign(np.take_along_axis(qq, axis[..., None], axis=-1)[..., 0])
    normal_local = np.zeros(q.shape)
    np.put_along_axis(normal_local, axis[..., None],
                      sign[..., None], axis=-1)
    normal = normal_local @ rotz(yaw).T
    return d, normal


def _intersect_cylinder(origin, q, center, radius, height):
    c = np.asarray(center)
    hh = height / 2.0
    o2 = origin[:2] - c[:2]
    q2 = q[..., :2]
    a = (q2 * q2).sum(-1)
    b = 2.0 * (q2 @ o2)
    cc = o2 @ o2 - radius * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        d_side = np.where((disc >= 0) & (a > 1e-14), (-b - sq) / (2 * a), np.inf)
    z_side = origin[2] + q[..., 2] * d_side
    ok_side = (d_side > 1e-9) & (np.abs(z_side - c[2]) <= hh)
    d_side = np.where(ok_side, d_side, np.inf)

    # top cap (the visible one for tabletop cameras)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_cap = (c[2] + hh - origin[2]) / q[..., 2]
    p_cap = origin[None, None, :2] + q2 * d_cap[..., None]
    ok_cap = (d_cap > 1e-9) & (((p_cap - c[:2]) ** 2).sum(-1) <= radius ** 2)
    d_cap = np.where(ok_cap, d_cap, np.inf)

    d = np.minimum(d_side, d_cap)
    d_safe = np.where(np.isfinite(d), d, 0.0)  # normals of misses are unused
    side_normal = np.concatenate(
        [origin[None, None, :2] + q2 * d_safe[..., None] - c[:2],
         np.zeros(d.shape + (1,))], axis=-1)
    nrm = np.linalg.norm(side_normal, axis=-1, keepdims=True)
    side_normal = np.divide(side_normal, nrm, out=np.zeros_like(side_normal),
                            where=nrm > 0)
    cap_normal = np.broadcast_to([0.0, 0.0, 1.0], d.shape + (3,))
    normal = np.where((d_cap <= d_side)[..., None], cap_normal, side_normal)
    return d, normal


def render_view(scene: SceneSpec, cam: CameraModel):
    """-> (rgb float32 HxWx3 in [0,1], depth float64 HxW, 0 = no hit)."""
    origin, q = _ray_grid(cam)
    table = SceneObject(
        "box", "table",
        (2 * scene.table_half, 2 * scene.table_half, scene.table_thickness),
        (0.0, 0.0, -scene.table_thickness / 2.0))
    prims = [table, *scene.objects]
    depths = []
    normals = []
    colors = []
    for obj in prims:
        if obj.kind == "sphere":
            d, n = _intersect_sphere(origin, q, obj.position, obj.size[0])
        elif obj.kind == "box":
            half = np.asarray(obj.size) / 2.0
            d, n = _intersect_box(origin, q, obj.position, half, obj.yaw)
        else:
            d, n = _intersect_cylinder(origin, q, obj.position,
                                       obj.size[0], obj.size[1])
        depths.append(d)
        normals.append(n)
        colors.append(obj.rgb())
    stack = np.stack(depths)                    # (P, H, W)
    winner = stack.argmin(axis=0)
    depth = np.take_along_axis(stack, winner[None], axis=0)[0]
    hit = np.isfinite(depth)
    normal = np.take_along_axis(
        np.stack(normals), winner[None, ..., None], axis=0)[0]
    base = np.stack(colors)[winner]
    lambert = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    rgb = np.where(hit[..., None], base * lambert[..., None], BACKGROUND)
    return rgb.astype(np.float32), np.where(hit, depth, 0.0)


def default_rig(width: int = 128, height: int = 128, focal: float = 150.0,
                views: int = 3) -> list[CameraModel]:
    """Front/left/right cameras looking at the table center."""
    eyes = [(0.0, -0.85, 0.65), (-0.75, 0.45, 0.65), (0.75, 0.45, 0.65),
            (0.0, 0.85, 0.95)][:views]
    target = (0.0, 0.0, 0.05)
    intr = Intrinsics(focal, focal, width / 2.0, height / 2.0)
    return [CameraModel(intr, look_at_extrinsics(eye, target), width, height)
            for eye in eyes]
