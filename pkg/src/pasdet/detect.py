"""Anchor-free voxel detection head, axis-aligned box IoU, NMS and mAP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .nnet import autodiff as ad
from .nnet.layers import ConfigError, Mlp, MlpConfig


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        c = tuple(float(x) for x in np.asarray(self.center).reshape(3))
        s = tuple(float(x) for x in np.asarray(self.size).reshape(3))
        if min(s) <= 0:
            raise ValueError("box size must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    @property
    def lo(self):
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self):
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    @property
    def volume(self):
        return float(np.prod(self.size))


@dataclass
class DetectionSet:
    boxes: list
    scene_id: str = ""

    def sorted(self):
        order = sorted(range(len(self.boxes)), key=lambda i: (-self.boxes[i].score, i))
        return DetectionSet([self.boxes[i] for i in order], self.scene_id)


def iou_aabb(a, b):
    inter = np.prod(np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None))
    union = a.volume + b.volume - inter
    return float(min(inter / union, 1.0)) if union > 0 else 0.0


def _iou_one_to_many(lo, hi, los, his):
    inter = np.prod(np.clip(np.minimum(hi, his) - np.maximum(lo, los), 0.0, None), axis=1)
    va = np.prod(hi - lo)
    vb = np.prod(his - los, axis=1)
    return np.minimum(inter / (va + vb - inter), 1.0)


def nms(dets, iou_threshold=0.25):
    """Greedy per-class suppression in descending score order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou threshold must lie in (0, 1)")
    ordered = dets.sorted().boxes
    if not ordered:
        return DetectionSet([], dets.scene_id)
    los = np.array([b.lo for b in ordered])
    his = np.array([b.hi for b in ordered])
    cls = np.array([b.class_id for b in ordered])
    alive = np.ones(len(ordered), bool)
    keep = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        keep.append(ordered[i])
        rest = np.nonzero(alive & (cls == cls[i]))[0]
        rest = rest[rest > i]
        if rest.size:
            iou = _iou_one_to_many(los[i], his[i], los[rest], his[rest])
            alive[rest[iou > iou_threshold]] = False
    return DetectionSet(keep, dets.scene_id)


# -- evaluation -------------------------------------------------------------

def average_precision(tp_flags, n_gt):
    """All-point interpolated area under the precision/recall curve."""
    tp = np.asarray(tp_flags, dtype=np.float64)
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(dets, gts, threshold):
    """TP flags for ``dets`` (already in score order) against one scene's GT.

    Each detection takes the unmatched GT box of its class with the highest
    IoU at or above ``threshold``; each GT box is matched at most once.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, threshold
        for j, g in enumerate(gts):
            if used[j] or g.class_id != d.class_id:
                continue
            iou = iou_aabb(d, g)
            if iou >= best_iou:
                if best < 0 or iou > best_iou:
                    best, best_iou = j, iou
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def evaluate_map(dets_per_scene, gt_per_scene, thresholds=(0.25, 0.5)):
    """Per-class AP and mAP at each IoU threshold.

    ``dets_per_scene`` and ``gt_per_scene`` are parallel sequences of
    DetectionSet (or box lists).  mAP averages over classes present in the
    ground truth; with no ground truth at all it is NaN.
    """
    det_lists = [d.boxes if isinstance(d, DetectionSet) else list(d) for d in dets_per_scene]
    gt_lists = [g.boxes if isinstance(g, DetectionSet) else list(g) for g in gt_per_scene]
    if len(det_lists) != len(gt_lists):
        raise ValueError("need one detection set per ground-truth scene")
    classes = sorted({b.class_id for g in gt_lists for b in g})
    result = {}
    for thr in thresholds:
        per_class = {}
        for c in classes:
            n_gt = sum(1 for g in gt_lists for b in g if b.class_id == c)
            scored = []
            for s, (dl, gl) in enumerate(zip(det_lists, gt_lists)):
                mine = [b for b in dl if b.class_id == c]
                order = sorted(range(len(mine)), key=lambda i: (-mine[i].score, i))
                mine = [mine[i] for i in order]
                flags = match_detections(mine, [b for b in gl if b.class_id == c], thr)
                scored.extend((b.score, s, i, f) for i, (b, f) in enumerate(zip(mine, flags)))
            scored.sort(key=lambda x: (-x[0], x[1], x[2]))
            per_class[c] = average_precision([f for *_, f in scored], n_gt)
        m = float(np.mean(list(per_class.values()))) if per_class else float("nan")
        result[thr] = {"ap": per_class, "map": m}
    return result


# -- head -------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    in_width: int = 8
    n_classes: int = 3
    hidden: tuple = (32,)

    @property
    def out_width(self):
        return self.n_classes + 1 + 6


class DetectionHead:
    """Per-voxel MLP: (K+1) class logits (last = background), offset, log-size."""

    def __init__(self, config, prefix="det"):
        self.config = config
        self.mlp = Mlp(MlpConfig(config.in_width, tuple(config.hidden), config.out_width), prefix)

    def init(self, store):
        return self.mlp.init(store)


@dataclass
class HeadOutput:
    logits: ad.Tensor
    offset: ad.Tensor
    log_size: ad.Tensor
    centers: np.ndarray = field(repr=False)
    edge: float = 1.0


def head_forward(volume, store, head):
    feats = ad.as_tensor(volume.features)
    if feats.shape[-1] != head.config.in_width:
        raise ConfigError(f"volume width {feats.shape[-1]} != head width {head.config.in_width}")
    out = head.mlp(store, feats)
    k = head.config.n_classes + 1
    return HeadOutput(out[:, :k], out[:, k:k + 3], out[:, k + 3:k + 6],
                      volume.grid.centers(), volume.grid.edge)


def decode_boxes(output, scene_id="", score_threshold=0.01, max_boxes=300):
    """Boxes for voxels whose best object-class probability clears the threshold."""
    probs = ad.softmax(output.logits, axis=-1).data
    obj = probs[:, :-1]
    cls = np.argmax(obj, axis=1)
    score = obj[np.arange(len(cls)), cls]
    centers = output.centers + output.offset.data * output.edge
    sizes = np.exp(output.log_size.data)
    idx = np.nonzero(score >= score_threshold)[0]
    idx = idx[np.argsort(-score[idx], kind="stable")][:max_boxes]
    boxes = [Box3D(centers[i], sizes[i], int(cls[i]), float(np.clip(score[i], 0.0, 1.0)))
             for i in idx]
    return DetectionSet(boxes, scene_id)


def assign_targets(centers, gt_boxes, n_classes, edge):
    """Center-inside assignment to the smallest containing GT box (ties: class id).

    Returns (labels with background = n_classes, offsets in voxel units,
    log sizes, positive mask).
    """
    n = len(centers)
    labels = np.full(n, n_classes, dtype=np.int64)
    offsets = np.zeros((n, 3))
    log_sizes = np.zeros((n, 3))
    best = np.full(n, np.inf)
    best_cls = np.full(n, np.iinfo(np.int64).max)
    for g in gt_boxes:
        inside = np.all((centers >= g.lo) & (centers <= g.hi), axis=1)
        better = inside & ((g.volume < best) | ((g.volume == best) & (g.class_id < best_cls)))
        best[better] = g.volume
        best_cls[better] = g.class_id
        labels[better] = g.class_id
        offsets[better] = (np.asarray(g.center) - centers[better]) / edge
        log_sizes[better] = np.log(g.size)
    return labels, offsets, log_sizes, labels < n_classes


def detection_loss(output, targets, focal_gamma=0.0):
    """Class CE over all voxels plus smooth-L1 on offsets and log-sizes of positives."""
    labels, offsets, log_sizes, pos = targets
    logp = ad.log_softmax(output.logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    if focal_gamma > 0:
        weight = ad.power(ad.maximum(1.0 - ad.exp(picked), 0.0), focal_gamma)
        cls_loss = ad.mean(-picked * weight)
    else:
        cls_loss = ad.mean(-picked)
    if not np.any(pos):
        return cls_loss
    reg = losses.smooth_l1(output.offset, offsets, pos) + losses.smooth_l1(output.log_size, log_sizes, pos)
    return cls_loss + reg
