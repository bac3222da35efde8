"""Training objectives.  Every function accepts arrays or tensors and returns
a scalar :class:`~pasdet.nnet.Tensor` so the result can be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import depthspace as dsp
from .nnet import autodiff as ad

TERMS = ("det", "rgb", "geo", "seg", "depth")
PROB_FLOOR = 1e-12


class TrainingDivergence(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    det: float = 1.0
    rgb: float = 1.0
    geo: float = 1.0
    seg: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        for name in ("gamma",) + TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    det: float = 0.0
    rgb: float = 0.0
    geo: float = 0.0
    seg: float = 0.0
    depth: float = 0.0
    total: float = 0.0
    meta: dict = field(default_factory=dict)

    def as_dict(self):
        return {k: getattr(self, k) for k in TERMS + ("total",)}


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _masked_mean(values, mask):
    values = ad.as_tensor(values)
    if mask is None:
        return ad.mean(values)
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        return ad.tsum(values * 0.0)
    return ad.tsum(values * m) * (1.0 / count)


def rgb_loss(pred, target):
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target, "rgb_loss")
    diff = pred - target
    return ad.mean(diff * diff)


def seg_loss(probs, labels, ignore=None):
    """Mean -log p[label] over pixels not flagged in ``ignore``."""
    probs = ad.as_tensor(probs)
    labels = np.asarray(labels)
    k = probs.shape[-1]
    keep = np.ones(labels.shape, bool) if ignore is None else ~np.asarray(ignore, bool)
    if np.any((labels[keep] < 0) | (labels[keep] >= k)):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    safe = np.where(keep, labels, 0).astype(np.int64)
    picked = probs[(*np.indices(labels.shape), safe)]
    nll = -ad.log(ad.maximum(picked, PROB_FLOOR))
    return _masked_mean(nll, keep)


def cross_entropy_logits(logits, labels, mask=None):
    logp = ad.log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    picked = logp[(*np.indices(labels.shape), labels)]
    return _masked_mean(-picked, mask)


def depth_loss_ordinal(ds, logits, residual, z_true, mask=None, gamma=1.0, normalize=False,
                       return_excluded=False):
    """CE over the ordinal bin of ``z_true`` plus gamma * L1 on the residual.

    ``residual`` is the predicted offset above the ground-truth bin's lower
    edge; in relative units (divided by z_max) when ``normalize`` is set.
    Depths outside the DepthSpace are masked out; ``return_excluded`` also
    returns how many were dropped that way.
    """
    logits = ad.as_tensor(logits)
    z = np.asarray(z_true, dtype=np.float64)
    if logits.shape[-1] != ds.n_bins:
        raise ValueError(f"expected {ds.n_bins} bin logits, got {logits.shape[-1]}")
    valid = np.isfinite(z) & (z >= ds.z_min) & (z <= ds.z_max)
    m = valid if mask is None else valid & np.asarray(mask, bool)
    code = dsp.encode(ds, np.where(valid, z, ds.z_min))
    target = code.z_res / ds.z_max if normalize else code.z_res
    ce = -ad.log_softmax(logits, axis=-1)[(*np.indices(z.shape), code.l_int)]
    l1 = ad.absolute(ad.as_tensor(residual) - target)
    loss = _masked_mean(ce + gamma * l1, m)
    if return_excluded:
        return loss, int((~valid).sum())
    return loss


def depth_loss_l1(pred, target, mask=None):
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target, "depth_loss_l1")
    return _masked_mean(ad.absolute(pred - target), mask)


def depth_loss_huber(pred, target, mask=None, delta=1.0):
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target, "depth_loss_huber")
    err = pred - target
    a = ad.absolute(err)
    small = a.data <= delta
    h = ad.where(small, 0.5 * err * err, delta * (a - 0.5 * delta))
    return _masked_mean(h, mask)


def smooth_l1(pred, target, mask=None, beta=1.0):
    """Huber scaled by 1/beta, summed over the last axis, averaged over mask."""
    pred = ad.as_tensor(pred)
    err = pred - np.asarray(target, dtype=np.float64)
    a = ad.absolute(err)
    h = ad.where(a.data < beta, 0.5 * err * err * (1.0 / beta), a - 0.5 * beta)
    return _masked_mean(ad.tsum(h, axis=-1), mask)


def geo_loss(alpha, occupancy, clamp=1e-6):
    """Binary cross-entropy between per-sample opacity and 0/1 occupancy.

    Probabilities are clamped to [clamp, 1 - clamp] before the log.
    """
    alpha = ad.as_tensor(alpha)
    occ = np.asarray(occupancy, dtype=np.float64)
    _same_shape(alpha, occ, "geo_loss")
    lo = ad.maximum(alpha, clamp)
    hi = ad.maximum(1.0 - alpha, clamp)
    return ad.mean(-(occ * ad.log(lo) + (1.0 - occ) * ad.log(hi)))


def total_loss(terms, weights=LossWeights()):
    """Weighted sum of whichever terms are present (missing ones count as 0).

    Returns (total tensor, LossReport).  Raises :class:`TrainingDivergence`
    naming the first non-finite term.
    """
    report = LossReport()
    total = ad.Tensor(0.0)
    for name in TERMS:
        term = terms.get(name)
        if term is None:
            continue
        value = float(ad.as_tensor(term).data)
        if not math.isfinite(value):
            raise TrainingDivergence(name, value)
        setattr(report, name, value)
        coef = getattr(weights, name)
        if coef != 0.0:
            total = total + coef * ad.as_tensor(term)
    report.total = float(total.data)
    if not math.isfinite(report.total):
        raise TrainingDivergence("total", report.total)
    return total, report
