"""Synthetic box rooms with closed-form ground truth.

A scene is an axis-aligned room holding flat-colored labeled boxes that
rest on the floor, observed by a ring of inward-facing pinhole cameras.
Every ground-truth map comes from exact ray/box slab
tests.  Depth maps hold distance along the unit ray; pixels that hit no
box carry the scene's ``z_max`` sentinel.  Object classes are 0..K-1 and
the background label is K.

Scene file format (text, one record per line, fields space separated,
floats written with ``repr`` so they round-trip exactly)::

    pasdet-scene 1
    seed <int>
    classes <K>
    room <xmin> <ymin> <zmin> <xmax> <ymax> <zmax>
    background <r> <g> <b>
    box <cx> <cy> <cz> <sx> <sy> <sz> <class> <r> <g> <b>        (0 or more)
    view <fx> <fy> <cx> <cy> <width> <height> <r00> <r01> <r02> <t0> <r10> <r11> <r12> <t1> <r20> <r21> <r22> <t2>

``view`` rows are the camera-to-world 3x4 pose written row by row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .depthspace import DepthSpace
from .detect import Box3D, iou_aabb

HEADER = "pasdet-scene 1"
IGNORE = -1

# class palette; background is drawn from outside it
PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.65, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.75, 0.15],
    [0.65, 0.25, 0.75],
    [0.15, 0.75, 0.80],
    [0.95, 0.50, 0.10],
    [0.45, 0.30, 0.15],
])
BACKGROUND = (0.92, 0.92, 0.92)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledBox:
    center: np.ndarray
    size: np.ndarray
    class_id: int
    color: tuple

    @property
    def aabb(self):
        return geometry.AABB.from_center_size(self.center, self.size)

    def as_box3d(self, score=1.0):
        return Box3D(self.center, self.size, self.class_id, score)


@dataclass(frozen=True)
class View:
    camera: geometry.CameraIntrinsics
    pose: geometry.Pose


@dataclass
class Scene:
    room_lo: np.ndarray
    room_hi: np.ndarray
    boxes: list
    views: list
    n_classes: int
    background: tuple = BACKGROUND
    seed: int = 0
    scene_id: str = ""

    def __post_init__(self):
        self.room_lo = np.asarray(self.room_lo, dtype=np.float64)
        self.room_hi = np.asarray(self.room_hi, dtype=np.float64)
        if not self.views:
            raise ValueError("a scene needs at least one view")
        for b in self.boxes:
            if not (0 <= b.class_id < self.n_classes):
                raise ValueError(f"class {b.class_id} outside [0, {self.n_classes - 1}]")
            if np.any(b.aabb.lo < self.room_lo - 1e-9) or np.any(b.aabb.hi > self.room_hi + 1e-9):
                raise ValueError("box extends outside the room")

    @property
    def background_label(self):
        return self.n_classes

    @property
    def z_max(self):
        """Room-diagonal bound on any in-room ray distance."""
        return float(np.linalg.norm(self.room_hi - self.room_lo))

    def gt_boxes(self):
        return [b.as_box3d() for b in self.boxes]

    def train_views(self, holdout_every=4):
        return [i for i in range(len(self.views)) if i % holdout_every != 0 or len(self.views) == 1]

    def eval_views(self, holdout_every=4):
        return [i for i in range(len(self.views)) if i % holdout_every == 0 and len(self.views) > 1]


@dataclass
class LabeledPointSet:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("one label per point")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")


def ring_views(n_views, center, radius, height, target_height, width, height_px, fov_deg=60.0):
    cam = geometry.CameraIntrinsics.from_fov(width, height_px, fov_deg)
    views = []
    for i in range(n_views):
        a = 2.0 * np.pi * i / n_views
        eye = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height])
        target = np.array([center[0], center[1], target_height])
        views.append(View(cam, geometry.Pose.look_at(eye, target)))
    return views


def generate_scene(room_size=(4.0, 4.0, 2.5), n_boxes=3, n_classes=3, n_views=20, seed=0,
                   resolution=(64, 64), box_extent=(0.4, 1.1), camera_radius=1.8,
                   camera_height=1.6, fov_deg=60.0, scene_id=None, max_attempts=1000):
    """Random non-overlapping floor boxes inside a camera ring.

    Boxes are kept inside ``camera_radius - 0.4`` of the room center so no
    camera sits inside a box.  Box colors come from the class palette.
    """
    if n_boxes < 0 or n_classes < 1 or n_views < 1:
        raise ValueError("need n_boxes >= 0, n_classes >= 1, n_views >= 1")
    rng = np.random.default_rng(seed)
    size = np.asarray(room_size, dtype=np.float64)
    lo, hi = np.zeros(3), size
    center = 0.5 * (lo + hi)
    reach = camera_radius - 0.4
    boxes = []
    attempts = 0
    while len(boxes) < n_boxes:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(f"could not place {n_boxes} boxes in {max_attempts} attempts")
        ext = rng.uniform(box_extent[0], box_extent[1], size=3)
        ext[2] = min(ext[2], size[2] - 0.5)
        c = np.empty(3)
        c[:2] = center[:2] + rng.uniform(-reach, reach, size=2)
        c[2] = 0.5 * ext[2]
        corners = np.abs(c[:2] - center[:2]) + 0.5 * ext[:2]
        if np.linalg.norm(corners) > reach:
            continue
        cls = int(rng.integers(n_classes))
        cand = LabeledBox(c, ext, cls, tuple(PALETTE[cls % len(PALETTE)]))
        if any(iou_aabb(cand.as_box3d(), b.as_box3d()) > 0 or _touching(cand, b) for b in boxes):
            continue
        boxes.append(cand)
    views = ring_views(n_views, center, camera_radius, camera_height, 0.4,
                       resolution[0], resolution[1], fov_deg)
    return Scene(lo, hi, boxes, views, n_classes, BACKGROUND, seed,
                 scene_id if scene_id is not None else f"scene{seed}")


def _touching(a, b, gap=0.05):
    return bool(np.all(np.abs(a.center - b.center) < 0.5 * (a.size + b.size) + gap))


# -- ground-truth maps ------------------------------------------------------

def _first_hits(scene, origins, dirs):
    n = len(origins)
    depth = np.full(n, np.inf)
    which = np.full(n, -1)
    for i, b in enumerate(scene.boxes):
        entry, _, hit = geometry.ray_box_intersect_batch(origins, dirs, b.aabb.lo, b.aabb.hi)
        closer = hit & (entry < depth)
        depth[closer] = entry[closer]
        which[closer] = i
    return depth, which


def trace_view(scene, view_index, camera=None):
    """Depth (sentinel z_max), box index per pixel (-1 = none)."""
    view = scene.views[view_index]
    cam = camera or view.camera
    o, d = geometry.pixel_grid_rays(cam, view.pose)
    depth, which = _first_hits(scene, o.reshape(-1, 3), d.reshape(-1, 3))
    depth = np.where(which >= 0, depth, scene.z_max)
    return depth.reshape(cam.height, cam.width), which.reshape(cam.height, cam.width)


def gt_depth_map(scene, view_index, camera=None):
    return trace_view(scene, view_index, camera)[0]


def gt_semantic_map(scene, view_index, camera=None):
    _, which = trace_view(scene, view_index, camera)
    classes = np.array([b.class_id for b in scene.boxes] + [scene.background_label])
    return classes[which]


def gt_color_map(scene, view_index, camera=None):
    _, which = trace_view(scene, view_index, camera)
    colors = np.array([b.color for b in scene.boxes] + [scene.background], dtype=np.float64)
    return colors[which]


def gt_occupancy(scene, points):
    pts = np.asarray(points, dtype=np.float64)
    occ = np.zeros(pts.shape[:-1], bool)
    for b in scene.boxes:
        occ |= b.aabb.contains(pts)
    return occ


def depth_space(scene, n_bins=64, strategy="LnIS"):
    """z_min = 0.9 x nearest ground-truth hit over all views; z_max = room diagonal."""
    nearest = np.inf
    for i in range(len(scene.views)):
        d, w = trace_view(scene, i)
        if np.any(w >= 0):
            nearest = min(nearest, float(d[w >= 0].min()))
    if not np.isfinite(nearest):
        nearest = 0.1 * scene.z_max / 0.9
    return DepthSpace(0.9 * nearest, scene.z_max, n_bins, strategy)


# -- 3D annotations to 2D ---------------------------------------------------

def sample_box_surfaces(scene, spacing=0.02):
    """Dense labeled points on every box face."""
    pts, labels = [], []
    for b in scene.boxes:
        lo, hi = b.aabb.lo, b.aabb.hi
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            nu = max(int(np.ceil((hi[u] - lo[u]) / spacing)) + 1, 2)
            nv = max(int(np.ceil((hi[v] - lo[v]) / spacing)) + 1, 2)
            gu, gv = np.meshgrid(np.linspace(lo[u], hi[u], nu), np.linspace(lo[v], hi[v], nv),
                                 indexing="ij")
            for side in (lo[axis], hi[axis]):
                p = np.empty((gu.size, 3))
                p[:, axis] = side
                p[:, u] = gu.ravel()
                p[:, v] = gv.ravel()
                pts.append(p)
                labels.append(np.full(gu.size, b.class_id))
    if not pts:
        return LabeledPointSet(np.zeros((0, 3)), np.zeros(0, np.int64))
    return LabeledPointSet(np.concatenate(pts), np.concatenate(labels))


def project_semantics(points, camera, pose, ignore_label=IGNORE):
    """Z-buffered splat of labeled points; unlabeled pixels get ``ignore_label``.

    Each point lands in the pixel containing its projection; the nearest
    camera-z point wins, ties going to the lower point index.
    """
    out = np.full((camera.height, camera.width), ignore_label, dtype=np.int64)
    if len(points.points) == 0:
        return out
    px, z = geometry.project_points(camera, pose, points.points)
    p = px + 0.5
    ok = (z > 0) & (p[:, 0] >= 0) & (p[:, 0] < camera.width) & (p[:, 1] >= 0) & (p[:, 1] < camera.height)
    idx = np.nonzero(ok)[0]
    col = np.floor(p[idx, 0]).astype(np.int64)
    row = np.floor(p[idx, 1]).astype(np.int64)
    flat = row * camera.width + col
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    out.reshape(-1)[flat[winners]] = points.labels[idx[winners]]
    return out


# -- scene files ------------------------------------------------------------

def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def save_scene(scene, path):
    lines = [HEADER, f"seed {int(scene.seed)}", f"classes {int(scene.n_classes)}",
             f"room {_fmt(scene.room_lo)} {_fmt(scene.room_hi)}",
             f"background {_fmt(scene.background)}"]
    for b in scene.boxes:
        lines.append(f"box {_fmt(b.center)} {_fmt(b.size)} {int(b.class_id)} {_fmt(b.color)}")
    for v in scene.views:
        c = v.camera
        rt = np.concatenate([v.pose.rotation, v.pose.translation[:, None]], axis=1)
        lines.append(f"view {_fmt([c.fx, c.fy, c.cx, c.cy])} {c.width} {c.height} {_fmt(rt.ravel())}")
    Path(path).write_text("\n".join(lines) + "\n")


class SceneFormatError(ValueError):
    pass


def load_scene(path, scene_id=None):
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != HEADER:
        raise SceneFormatError(f"{path}:1: expected header {HEADER!r}")
    seed, n_classes, room, bg = 0, None, None, BACKGROUND
    boxes, views = [], []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag, vals = parts[0], parts[1:]
        try:
            if tag == "seed":
                seed = int(vals[0])
            elif tag == "classes":
                n_classes = int(vals[0])
            elif tag == "room":
                room = [float(x) for x in vals[:6]]
            elif tag == "background":
                bg = tuple(float(x) for x in vals[:3])
            elif tag == "box":
                f = [float(x) for x in vals]
                boxes.append(LabeledBox(np.array(f[0:3]), np.array(f[3:6]), int(vals[6]), tuple(f[7:10])))
            elif tag == "view":
                f = [float(x) for x in vals]
                cam = geometry.CameraIntrinsics(f[0], f[1], f[2], f[3], int(vals[4]), int(vals[5]))
                rt = np.array(f[6:18]).reshape(3, 4)
                views.append(View(cam, geometry.Pose(rt[:, :3], rt[:, 3])))
            else:
                raise SceneFormatError(f"{path}:{lineno}: unknown record {tag!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, SceneFormatError):
                raise
            raise SceneFormatError(f"{path}:{lineno}: malformed {tag!r} record: {exc}") from exc
    if room is None or n_classes is None:
        raise SceneFormatError(f"{path}: missing room or classes record")
    return Scene(np.array(room[:3]), np.array(room[3:]), boxes, views, n_classes, bg, seed,
                 scene_id if scene_id is not None else Path(path).stem)
