"""Volume rendering along rays and coarse-to-fine resampling.

Compositing per ray, with samples at depths t_i and segment lengths
delta_i = t_{i+1} - t_i (the last segment runs to a far plane)::

    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = exp(-sum_{j<i} sigma_j delta_j)
    w_i     = T_i alpha_i

Every rendered quantity is a w-weighted sum.  All array arguments carry
the samples on the last axis, with any number of leading ray dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import depthspace as dsp
from . import featvol
from .geometry import pixel_grid_rays
from .nnet import autodiff as ad
from .nnet.layers import color_head, geometry_head, semantic_head

EPS = 1e-6


@dataclass
class SampleOutput:
    sigma: ad.Tensor
    color: ad.Tensor
    logits: ad.Tensor | None = None
    hidden: ad.Tensor | None = None


@dataclass
class RaySamples:
    t: np.ndarray
    delta: np.ndarray
    out: SampleOutput

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape[-1] == 0:
            raise ValueError("a ray needs at least one sample")
        if np.any(np.diff(t, axis=-1) <= 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("segment lengths must be positive")
        self.t = t


@dataclass
class RenderResult:
    color: ad.Tensor
    depth: ad.Tensor
    semantics: ad.Tensor | None
    weight_sum: ad.Tensor
    weights: ad.Tensor


def segment_lengths(t, far):
    t = np.asarray(t, dtype=np.float64)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), t.shape[:-1])[..., None]
    delta = np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)
    if np.any(delta <= 0):
        raise ValueError("far plane must lie beyond the last sample")
    return delta


def composite(samples, z_fallback, background=None, background_class=None, eps=EPS):
    """Alpha-composite one or more rays.

    ``background`` (a color) and ``background_class`` (a class index) fill
    the remaining transmittance 1 - W.  Without ``background_class`` the
    semantic mixture is renormalized by W (uniform when W <= eps).  Rays
    with W <= eps report ``z_fallback`` as their depth.
    """
    if samples.t.shape[-1] == 0:
        raise ValueError("cannot composite an empty sample list")
    out = samples.out
    sigma = ad.as_tensor(out.sigma)
    tau = sigma * samples.delta
    trans = ad.exp(-ad.cumsum(tau, axis=-1, exclusive=True))
    alpha = 1.0 - ad.exp(-tau)
    w = trans * alpha
    wsum = ad.tsum(w, axis=-1)
    w3 = ad.expand_dims(w, -1)
    color = ad.tsum(w3 * out.color, axis=-2)
    if background is not None:
        color = color + ad.expand_dims(1.0 - wsum, -1) * np.asarray(background, dtype=np.float64)
    alive = wsum.data > eps
    safe = ad.maximum(wsum, eps)
    depth = ad.where(alive, ad.tsum(w * samples.t, axis=-1) / safe,
                     np.broadcast_to(np.asarray(z_fallback, dtype=np.float64), wsum.shape))
    sem = None
    if out.logits is not None:
        probs = ad.softmax(out.logits, axis=-1)
        mix = ad.tsum(w3 * probs, axis=-2)
        k = probs.shape[-1]
        if background_class is not None:
            onehot = np.zeros(k)
            onehot[background_class] = 1.0
            sem = mix + ad.expand_dims(1.0 - wsum, -1) * onehot
        else:
            uniform = np.full(mix.shape, 1.0 / k)
            sem = ad.where(alive[..., None], mix / ad.expand_dims(safe, -1), uniform)
    return RenderResult(color, depth, sem, wsum, w)


def bin_assignment(ds, t):
    """Ordinal bin of each sample; samples never land in the far class N-1."""
    l = dsp.bin_coordinate(ds, np.clip(t, ds.z_min, ds.z_max))
    return np.minimum(np.floor(l).astype(np.int64), ds.n_bins - 2)


def bin_probabilities(result, t, ds):
    """Per-ray distribution over the N ordinal classes from compositing weights.

    Weight of sample i goes to its bin; the untouched transmittance 1 - W
    goes to the last class (at or beyond z_max).
    """
    idx = bin_assignment(ds, t)
    onehot = np.zeros(idx.shape + (ds.n_bins,))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    mass = ad.tsum(ad.expand_dims(result.weights, -1) * onehot, axis=-2)
    far = np.zeros(ds.n_bins)
    far[-1] = 1.0
    return mass + ad.expand_dims(1.0 - result.weight_sum, -1) * far


def bin_logits(result, t, ds, floor=1e-9):
    return ad.log(bin_probabilities(result, t, ds) + floor)


def opacity_at(points, store, heads, volume):
    """alpha = 1 - exp(-sigma * voxel edge) from the geometry head."""
    feats = featvol.trilinear_sample(volume, points)
    sigma, _ = geometry_head(store, heads, np.asarray(points, dtype=np.float64), feats)
    return 1.0 - ad.exp(-sigma * volume.grid.edge)


def fine_resample(t, weights, count, rng=None, ds=None):
    """Inverse-CDF draw of ``count`` depths from coarse weights.

    Segment [t_i, t_{i+1}] carries weight w_i (the last weight has no
    closed segment and is dropped).  Rays whose weights are all zero fall
    back to ``sample_depths`` of ``ds``.  Output is sorted per ray.
    """
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights.data if isinstance(weights, ad.Tensor) else weights,
                                 dtype=np.float64))
    n = t.shape[0]
    seg = np.maximum(w[:, :-1], 0.0)
    total = seg.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    pdf = seg / np.where(total > 0, total, 1.0)
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    k = np.arange(count, dtype=np.float64)
    jitter = rng.uniform(size=(n, count)) if rng is not None else np.full((n, count), 0.5)
    u = (k + jitter) / count
    out = np.empty((n, count))
    for r in range(n):
        if empty[r]:
            continue
        i = np.searchsorted(cdf[r], u[r], side="right") - 1
        i = np.clip(i, 0, seg.shape[1] - 1)
        # skip zero-width CDF steps so samples never land in zero-weight segments
        lo, hi = cdf[r, i], cdf[r, i + 1]
        frac = np.where(hi > lo, (u[r] - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
        out[r] = t[r, i] + np.clip(frac, 0.0, 1.0) * (t[r, i + 1] - t[r, i])
    if np.any(empty):
        if ds is None:
            raise ValueError("all-zero weights need a DepthSpace fallback")
        out[empty] = dsp.sample_depths(ds, count, rng, n_rays=int(empty.sum()))
    return np.sort(out, axis=1)


def merge_depths(coarse_t, fine_t):
    """Sorted union of coarse and fine depths with exact duplicates nudged apart."""
    t = np.sort(np.concatenate([coarse_t, fine_t], axis=-1), axis=-1)
    gap = np.diff(t, axis=-1)
    if np.any(gap <= 0):
        bump = np.concatenate([np.zeros(t.shape[:-1] + (1,)),
                               np.cumsum(gap <= 0, axis=-1) * 1e-9], axis=-1)
        t = t + bump
    return t


# -- fields -----------------------------------------------------------------

class ModelField:
    """Learned radiance field: heads fed by a trilinear feature lookup."""

    def __init__(self, store, heads, volume, semantic=True):
        self.store = store
        self.heads = heads
        self.volume = volume
        self.semantic = semantic

    def __call__(self, points, dirs):
        points = np.asarray(points, dtype=np.float64)
        feats = featvol.trilinear_sample(self.volume, points)
        sigma, hidden = geometry_head(self.store, self.heads, points, feats)
        color = color_head(self.store, self.heads, hidden, dirs)
        logits = semantic_head(self.store, self.heads, points, dirs, hidden) if self.semantic else None
        return SampleOutput(sigma, color, logits, hidden)


class BoxOracleField:
    """Analytic field: constant density inside labeled boxes, zero outside."""

    def __init__(self, boxes, n_classes, sigma=200.0, background_class=None):
        self.boxes = list(boxes)
        self.n_classes = n_classes
        self.sigma = float(sigma)
        self.background_class = n_classes - 1 if background_class is None else background_class

    def __call__(self, points, dirs):
        pts = np.asarray(points, dtype=np.float64)
        shape = pts.shape[:-1]
        sigma = np.zeros(shape)
        color = np.zeros(shape + (3,))
        label = np.full(shape, self.background_class)
        for b in self.boxes:
            inside = b.aabb.contains(pts) & (sigma == 0)
            sigma[inside] = self.sigma
            color[inside] = b.color
            label[inside] = b.class_id
        logits = np.full(shape + (self.n_classes,), -30.0)
        np.put_along_axis(logits, label[..., None], 30.0, axis=-1)
        return SampleOutput(ad.Tensor(sigma), ad.Tensor(color), ad.Tensor(logits))


# -- ray batches ------------------------------------------------------------

@dataclass
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 0
    jitter: bool = True
    background: tuple | None = None
    background_class: int | None = None


def evaluate_samples(field, origins, dirs, t, far):
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    r, s = t.shape
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    dd = np.broadcast_to(d[:, None, :], pts.shape)
    out = field(pts.reshape(-1, 3), dd.reshape(-1, 3))
    out = SampleOutput(
        ad.reshape(out.sigma, (r, s)),
        ad.reshape(out.color, (r, s, 3)),
        None if out.logits is None else ad.reshape(out.logits, (r, s, out.logits.shape[-1])),
        None,
    )
    return RaySamples(t, segment_lengths(t, far), out), pts


def render_rays(field, origins, dirs, ds, config, rng=None, fine_field=None):
    """Coarse pass, then an optional fine pass on coarse+fine depths.

    Returns a dict with ``coarse`` and (if enabled) ``fine`` entries, each a
    tuple (RaySamples, RenderResult, sample points).
    """
    n = len(origins)
    t = dsp.sample_depths(ds, config.n_coarse, rng if config.jitter else None, n_rays=n)
    samples, pts = evaluate_samples(field, origins, dirs, t, ds.z_max)
    res = composite(samples, ds.z_max, config.background, config.background_class)
    out = {"coarse": (samples, res, pts)}
    if config.n_fine > 0:
        ft = fine_resample(t, res.weights, config.n_fine, rng if config.jitter else None, ds)
        ft = merge_depths(t, np.clip(ft, ds.z_min, ds.z_max - 1e-9))
        fsamples, fpts = evaluate_samples(fine_field or field, origins, dirs, ft, ds.z_max)
        fres = composite(fsamples, ds.z_max, config.background, config.background_class)
        out["fine"] = (fsamples, fres, fpts)
    return out


def render_view(field, cam, pose, ds, config, fine_field=None, rng=None, chunk=4096):
    """Full-image render: color (H, W, 3), depth (H, W), label (H, W) maps."""
    o, d = pixel_grid_rays(cam, pose)
    o = o.reshape(-1, 3)
    d = d.reshape(-1, 3)
    colors, depths, labels = [], [], []
    for s in range(0, len(o), chunk):
        out = render_rays(field, o[s:s + chunk], d[s:s + chunk], ds, config, rng, fine_field)
        _, res, _ = out.get("fine", out["coarse"])
        colors.append(res.color.data)
        depths.append(res.depth.data)
        if res.semantics is not None:
            labels.append(np.argmax(res.semantics.data, axis=-1))
    h, w = cam.height, cam.width
    color = np.concatenate(colors).reshape(h, w, 3)
    depth = np.concatenate(depths).reshape(h, w)
    label = np.concatenate(labels).reshape(h, w) if labels else None
    return {"color": color, "depth": depth, "label": label}
