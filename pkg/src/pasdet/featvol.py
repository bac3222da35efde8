"""Per-view feature extraction, back-projection into a voxel grid, gating.

Voxels are flattened in C order over (X, Y, Z).  Voxel (i, j, k) has its
center at ``origin + (i + 0.5, j + 0.5, k + 0.5) * edge``; ``origin`` is the
grid's minimum corner.  Both back-projection and trilinear lookup are
linear maps with fixed geometry, so they are built once as sparse matrices
and applied to (possibly differentiable) feature arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np
import scipy.sparse as sp

from . import geometry
from .nnet import autodiff as ad

STRIDE = 4
PATCH = STRIDE * STRIDE * 3


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    edge: float
    origin: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("grid dims must be three positive integers")
        if not self.edge > 0:
            raise ValueError("voxel edge must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    @classmethod
    def covering(cls, lo, hi, edge):
        """Smallest grid of ``edge``-sized voxels centered on the box [lo, hi]."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        dims = np.maximum(np.ceil((hi - lo) / edge - 1e-9).astype(int), 1)
        center = 0.5 * (lo + hi)
        return cls(tuple(dims), float(edge), center - 0.5 * dims * edge)

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    @property
    def upper(self):
        return self.origin + np.asarray(self.dims) * self.edge

    def centers(self):
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.edge


@dataclass
class FeatureMap:
    view: int
    data: np.ndarray  # (C, H/4, W/4)
    image_size: tuple = None  # (H, W)

    def flat(self):
        return self.data.reshape(self.data.shape[0], -1).T


@dataclass
class FeatureVolume:
    grid: GridSpec
    features: object  # (V, C) ndarray or Tensor
    hits: np.ndarray

    @property
    def channels(self):
        return self.features.shape[-1]

    def array(self):
        f = self.features
        return f.data if isinstance(f, ad.Tensor) else np.asarray(f)


# -- extractor --------------------------------------------------------------

def init_extractor(store, channels=8, hidden=16, prefix="extractor"):
    store.glorot(f"{prefix}/w0", PATCH, hidden)
    store.zeros(f"{prefix}/b0", (hidden,))
    store.glorot(f"{prefix}/w1", hidden, channels)
    store.zeros(f"{prefix}/b1", (channels,))
    return store


def patchify(image):
    """(H, W, 3) image -> (H/4 * W/4, 48) non-overlapping 4x4 patches."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} not divisible by {STRIDE}")
    p = image.reshape(h // STRIDE, STRIDE, w // STRIDE, STRIDE, 3).transpose(0, 2, 1, 3, 4)
    return p.reshape(-1, PATCH)


def extract_flat(store, images, prefix="extractor"):
    """Differentiable extractor over a stack of images -> (T * H'W', C) tensor."""
    patches = np.concatenate([patchify(im) for im in images], axis=0)
    hid = ad.relu(ad.as_tensor(patches) @ store[f"{prefix}/w0"] + store[f"{prefix}/b0"])
    return hid @ store[f"{prefix}/w1"] + store[f"{prefix}/b1"]


def extract_features(image, store, view=0, prefix="extractor"):
    """Stride-4 patch MLP; returns a :class:`FeatureMap` of shape (C, H/4, W/4)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    flat = extract_flat(store, [image], prefix).data
    data = flat.T.reshape(-1, h // STRIDE, w // STRIDE)
    return FeatureMap(view, data, (h, w))


# -- back-projection --------------------------------------------------------

def backprojection_matrix(grid, cameras, poses, map_shape=None):
    """Sparse (V, T*H'*W') averaging operator and per-voxel hit counts."""
    centers = grid.centers()
    rows, cols, vals = [], [], []
    hits = np.zeros(grid.n_voxels)
    offset = 0
    per_view = []
    for cam, pose in zip(cameras, poses):
        hf, wf = map_shape if map_shape is not None else (cam.height // STRIDE, cam.width // STRIDE)
        px, z = geometry.project_points(cam, pose, centers)
        p = px + 0.5
        vis = (z > 0) & (p[:, 0] >= 0) & (p[:, 0] < cam.width) & (p[:, 1] >= 0) & (p[:, 1] < cam.height)
        # feature pixel centers sit at image coords STRIDE * (j + 0.5)
        fx = np.clip(p[:, 0] * (wf / cam.width) - 0.5, 0.0, wf - 1.0)
        fy = np.clip(p[:, 1] * (hf / cam.height) - 0.5, 0.0, hf - 1.0)
        vox = np.nonzero(vis)[0]
        fx, fy = fx[vox], fy[vox]
        x0 = np.minimum(np.floor(fx).astype(int), wf - 1)
        y0 = np.minimum(np.floor(fy).astype(int), hf - 1)
        ax, ay = fx - x0, fy - y0
        x1 = np.minimum(x0 + 1, wf - 1)
        y1 = np.minimum(y0 + 1, hf - 1)
        for yy, xx, ww in ((y0, x0, (1 - ay) * (1 - ax)), (y0, x1, (1 - ay) * ax),
                           (y1, x0, ay * (1 - ax)), (y1, x1, ay * ax)):
            per_view.append((vox, offset + yy * wf + xx, ww))
        hits[vox] += 1
        offset += hf * wf
    for vox, col, w in per_view:
        rows.append(vox)
        cols.append(col)
        vals.append(w / hits[vox])
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_voxels, offset))
    mat.sum_duplicates()
    return mat, hits


def backproject(maps, cameras, poses, grid):
    """Average bilinear reads of every view that sees each voxel center."""
    if len(maps) != len(cameras) or len(maps) != len(poses):
        raise ValueError("need one camera and pose per feature map")
    shapes = {m.data.shape[1:] for m in maps}
    if len(shapes) != 1:
        raise ValueError("all feature maps must share one shape")
    mat, hits = backprojection_matrix(grid, cameras, poses, shapes.pop())
    stacked = np.concatenate([m.flat() for m in maps], axis=0)
    return FeatureVolume(grid, np.asarray(mat @ stacked), hits)


def backproject_flat(matrix, hits, grid, flat_features):
    """Differentiable variant over stacked extractor output (T*H'W', C)."""
    return FeatureVolume(grid, ad.sparse_matmul(matrix, flat_features), hits)


# -- lookup -----------------------------------------------------------------

def trilinear_matrix(grid, points):
    """Sparse (P, V) interpolation weights; zero rows outside the grid box."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(grid.dims)
    inside = np.all((pts >= grid.origin) & (pts <= grid.upper), axis=1)
    g = (pts - grid.origin) / grid.edge - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    rows, cols, vals = [], [], []
    pid = np.arange(len(pts))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = i0 + off
        w = np.prod(np.where(off == 1, f, 1.0 - f), axis=1)
        ok = inside & np.all((idx >= 0) & (idx < dims), axis=1) & (w != 0.0)
        flat = (idx[ok, 0] * dims[1] + idx[ok, 1]) * dims[2] + idx[ok, 2]
        rows.append(pid[ok])
        cols.append(flat)
        vals.append(w[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(len(pts), grid.n_voxels))


def trilinear_sample(volume, points):
    mat = trilinear_matrix(volume.grid, points)
    if isinstance(volume.features, ad.Tensor):
        return ad.sparse_matmul(mat, volume.features)
    return np.asarray(mat @ volume.array())


def opacity_gate(volume, store, heads):
    """Scale every voxel feature by the opacity at its center."""
    from .renderer import opacity_at

    alpha = opacity_at(volume.grid.centers(), store, heads, volume)
    feats = volume.features
    if isinstance(feats, ad.Tensor) or alpha.requires_grad:
        gated = ad.as_tensor(feats) * ad.reshape(alpha, (-1, 1))
    else:
        gated = volume.array() * alpha.data[:, None]
    return FeatureVolume(volume.grid, gated, volume.hits.copy())


# -- debug dump -------------------------------------------------------------

VOLUME_MAGIC = b"PASDVOL1"


def save_volume(path, volume):
    """Header: magic, u32 X Y Z, f64 edge, f64 origin[3], u32 C; then f64 (V, C) features, f64 (V,) hits."""
    feats = np.ascontiguousarray(volume.array(), dtype="<f8")
    x, y, z = volume.grid.dims
    head = VOLUME_MAGIC + struct.pack("<3Id3dI", x, y, z, volume.grid.edge,
                                      *volume.grid.origin, feats.shape[1])
    Path(path).write_bytes(head + feats.tobytes() + np.ascontiguousarray(volume.hits, "<f8").tobytes())


def load_volume(path):
    buf = Path(path).read_bytes()
    if buf[:8] != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad volume magic")
    x, y, z, edge, ox, oy, oz, c = struct.unpack_from("<3Id3dI", buf, 8)
    pos = 8 + struct.calcsize("<3Id3dI")
    n = x * y * z
    feats = np.frombuffer(buf, "<f8", n * c, pos).reshape(n, c).copy()
    hits = np.frombuffer(buf, "<f8", n, pos + 8 * n * c).copy()
    return FeatureVolume(GridSpec((x, y, z), edge, (ox, oy, oz)), feats, hits)
