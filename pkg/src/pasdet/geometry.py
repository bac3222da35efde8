"""Pinhole cameras, camera-to-world poses, rays and axis-aligned boxes.

Conventions: right-handed world frame; the camera looks down its +z axis
with +x to the right and +y down the image.  An integer pixel (u, v)
samples the image plane at (u + 0.5, v + 0.5), so pixel coordinates here
are "pixel index" coordinates and may be fractional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BoundsError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width, height, fov_x_deg):
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2.0)
        return cls(float(fx), float(fx), width / 2.0, height / 2.0, int(width), int(height))

    def scaled(self, factor):
        """Same field of view at ``factor`` times the resolution."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                                self.cy * factor, int(round(self.width * factor)),
                                int(round(self.height * factor)))

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform; ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        # re-orthonormalize so the 1e-9 invariant holds after the cross products
        u, _, vt = np.linalg.svd(rot)
        return cls(u @ vt, eye)

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Projection:
    pixel: np.ndarray | None
    depth: float
    in_front: bool


def _check_pixel(cam, u, v):
    if not (0.0 <= u + 0.5 <= cam.width and 0.0 <= v + 0.5 <= cam.height):
        raise BoundsError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")


def pixel_to_ray(cam, pose, px):
    u, v = float(px[0]), float(px[1])
    _check_pixel(cam, u, v)
    d_cam = np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
    d = pose.rotation @ d_cam
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def world_to_pixel(cam, pose, point):
    """Project ``point``; depth is the camera-frame z.  z <= 0 gives ``in_front=False``."""
    pc = pose.world_to_camera(point)
    z = float(pc[2])
    if z <= 0.0:
        return Projection(None, z, False)
    px = np.array([cam.fx * pc[0] / z + cam.cx - 0.5, cam.fy * pc[1] / z + cam.cy - 0.5])
    return Projection(px, z, True)


def pixel_grid_rays(cam, pose):
    """Origins and unit directions for every integer pixel, shape (H, W, 3)."""
    v, u = np.meshgrid(np.arange(cam.height, dtype=np.float64),
                       np.arange(cam.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy,
                      np.ones_like(u)], axis=-1)
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def project_points(cam, pose, points):
    """Vectorized projection: pixel coords (n, 2) and camera z (n,)."""
    pc = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([cam.fx * pc[:, 0] / z + cam.cx - 0.5,
                       cam.fy * pc[:, 1] / z + cam.cy - 0.5], axis=-1)
    return px, z


@dataclass(frozen=True)
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("box min must be < box max componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_center_size(cls, center, size):
        c = np.asarray(center, dtype=np.float64)
        h = 0.5 * np.asarray(size, dtype=np.float64)
        return cls(c - h, c + h)

    def contains(self, points):
        p = np.asarray(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


def ray_box_intersect(ray, box):
    """Slab test.  Returns (entry, exit) with 0 <= entry <= exit, or None on a miss."""
    hit = ray_box_intersect_batch(ray.origin[None], ray.direction[None], box.lo, box.hi)
    if not hit[2][0]:
        return None
    return float(hit[0][0]), float(hit[1][0])


def ray_box_intersect_batch(origins, dirs, lo, hi):
    """Slab test for many rays against one box: (entry, exit, hit) arrays."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # zero direction component: inside the slab spans everything, outside misses
    par = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    entry = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    hit = (exit_ >= entry) & (exit_ >= 0.0)
    entry = np.maximum(entry, 0.0)
    return entry, exit_, hit
