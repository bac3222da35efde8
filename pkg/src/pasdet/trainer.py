"""Joint optimization of the rendering and detection branches.

Randomness: iteration ``i`` of a run seeded ``s`` draws everything from
``numpy.random.default_rng([s, STREAM_TRAIN, i])``; evaluation uses
``[s, STREAM_EVAL, scene_index, view]``.  No generator state is carried
between iterations, so a run restored from a checkpoint at iteration k
continues bit-identically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import depthspace as dsp
from . import detect, featvol, losses, renderer, scenes
from .geometry import pixel_grid_rays
from .mapfile import write_detections, write_map
from .nnet import autodiff as ad
from .nnet.layers import Heads, HeadsConfig
from .nnet.params import SGD, ParamStore, load_tensors, save_tensors

STREAM_TRAIN = 1
STREAM_EVAL = 2
DEPTH_MODES = ("none", "l1", "huber", "ordinal")
PSNR_CAP = 99.0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 10.0
    n_bins: int = 17
    strategy: str = "LnIS"
    n_coarse: int = 32
    fine: bool = False
    n_fine: int = 16
    depth_mode: str = "ordinal"
    depth_normalize: bool = False
    semantic: bool = True
    detection: bool = True
    gamma: float = 1.0
    w_det: float = 1.0
    w_rgb: float = 1.0
    w_geo: float = 1.0
    w_seg: float = 1.0
    w_depth: float = 1.0
    huber_delta: float = 1.0
    seed: int = 0
    grid_edge: float = 0.25
    feature_channels: int = 8
    extractor_hidden: int = 16
    hidden: int = 64
    hidden_feature: int = 32
    point_freqs: int = 8
    dir_freqs: int = 2
    det_hidden: int = 32
    holdout_every: int = 4
    score_threshold: float = 0.01
    nms_iou: float = 0.25

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("rays_per_batch", "n_coarse", "n_fine", "feature_channels", "hidden",
                     "hidden_feature", "extractor_hidden", "det_hidden", "holdout_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.strategy not in dsp.STRATEGIES:
            raise ValueError(f"strategy must be one of {dsp.STRATEGIES}")
        if self.depth_mode not in DEPTH_MODES:
            raise ValueError(f"depth_mode must be one of {DEPTH_MODES}")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")

    @property
    def weights(self):
        return losses.LossWeights(self.gamma, self.w_det, self.w_rgb, self.w_geo,
                                  self.w_seg, self.w_depth)

    def to_dict(self):
        return asdict(self)


class ConfigParseError(ValueError):
    pass


def parse_config(text, base=None, source="<config>"):
    """Flat ``key = value`` lines with ``#`` comments into a TrainConfig."""
    base = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(getattr(base, key), value)
        except ValueError as exc:
            raise ConfigParseError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigParseError(f"{source}: {exc}") from exc


def _coerce(current, value):
    if isinstance(current, bool):
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def format_config(config):
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in config.to_dict().items())


# -- model ------------------------------------------------------------------

class Model:
    """Parameters plus the head layout a TrainConfig implies."""

    def __init__(self, config, n_classes):
        self.config = config
        self.n_classes = n_classes
        hc = HeadsConfig(feature_width=config.feature_channels, n_classes=n_classes + 1,
                         point_freqs=config.point_freqs, dir_freqs=config.dir_freqs,
                         hidden=(config.hidden, config.hidden),
                         hidden_feature=config.hidden_feature)
        self.coarse = Heads(hc, "coarse")
        self.fine = Heads(hc, "fine") if config.fine else None
        self.det = detect.DetectionHead(
            detect.HeadConfig(config.feature_channels, n_classes, (config.det_hidden,)))
        self.store = ParamStore(config.seed)
        featvol.init_extractor(self.store, config.feature_channels, config.extractor_hidden)
        self.coarse.init(self.store)
        if self.fine is not None:
            self.fine.init(self.store)
        self.det.init(self.store)


@dataclass
class SceneContext:
    scene: scenes.Scene
    ds: dsp.DepthSpace
    grid: featvol.GridSpec
    train_views: list
    eval_views: list
    images: dict
    depths: dict
    labels: dict
    rays: dict
    bp_matrix: object
    bp_hits: np.ndarray
    det_targets: tuple


def build_context(scene, config):
    ds = scenes.depth_space(scene, config.n_bins, config.strategy)
    grid = featvol.GridSpec.covering(scene.room_lo, scene.room_hi, config.grid_edge)
    train = scene.train_views(config.holdout_every)
    evals = scene.eval_views(config.holdout_every)
    images, depths, labels, rays = {}, {}, {}, {}
    for i, v in enumerate(scene.views):
        d, which = scenes.trace_view(scene, i)
        cls = np.array([b.class_id for b in scene.boxes] + [scene.background_label])
        col = np.array([b.color for b in scene.boxes] + [scene.background], dtype=np.float64)
        depths[i], labels[i], images[i] = d, cls[which], col[which]
        o, dirs = pixel_grid_rays(v.camera, v.pose)
        rays[i] = (o.reshape(-1, 3), dirs.reshape(-1, 3))
    mat, hits = featvol.backprojection_matrix(
        grid, [scene.views[i].camera for i in train], [scene.views[i].pose for i in train])
    targets = detect.assign_targets(grid.centers(), scene.gt_boxes(), scene.n_classes, grid.edge)
    return SceneContext(scene, ds, grid, train, evals, images, depths, labels, rays,
                        mat, hits, targets)


def feature_volume(model, ctx):
    flat = featvol.extract_flat(model.store, [ctx.images[i] for i in ctx.train_views])
    return featvol.backproject_flat(ctx.bp_matrix, ctx.bp_hits, ctx.grid, flat)


def render_config(model, ctx, jitter=True):
    c = model.config
    return renderer.RenderConfig(c.n_coarse, c.n_fine if c.fine else 0, jitter,
                                 ctx.scene.background, ctx.scene.background_label)


def fields_for(model, volume):
    coarse = renderer.ModelField(model.store, model.coarse, volume, model.config.semantic)
    fine = (renderer.ModelField(model.store, model.fine, volume, model.config.semantic)
            if model.fine is not None else None)
    return coarse, fine


def _depth_term(config, ds, samples, res, z_gt, hit):
    scale = 1.0 / ds.z_max if config.depth_normalize else 1.0
    if config.depth_mode == "ordinal":
        logits = renderer.bin_logits(res, samples.t, ds)
        code = dsp.encode(ds, np.clip(z_gt, ds.z_min, ds.z_max))
        residual = (res.depth - dsp.bin_edge_depth(ds, code.l_int.astype(float))) * scale
        return losses.depth_loss_ordinal(ds, logits, residual, z_gt, hit, config.gamma,
                                         config.depth_normalize)
    alive = hit & (res.weight_sum.data > renderer.EPS)
    pred = res.depth * scale
    target = z_gt * scale
    if config.depth_mode == "l1":
        return losses.depth_loss_l1(pred, target, alive)
    return losses.depth_loss_huber(pred, target, alive, config.huber_delta * scale)


def batch_terms(model, ctx, view, pixels, rng, volume=None):
    """Loss terms for one ray batch of one view (coarse and fine summed)."""
    config = model.config
    volume = volume if volume is not None else feature_volume(model, ctx)
    coarse_field, fine_field = fields_for(model, volume)
    o, d = ctx.rays[view]
    out = renderer.render_rays(coarse_field, o[pixels], d[pixels], ctx.ds,
                               render_config(model, ctx), rng, fine_field)
    gt_color = ctx.images[view].reshape(-1, 3)[pixels]
    gt_label = ctx.labels[view].reshape(-1)[pixels]
    gt_depth = ctx.depths[view].reshape(-1)[pixels]
    hit = gt_depth < ctx.scene.z_max
    terms = {"rgb": None, "geo": None, "seg": None, "depth": None}
    for samples, res, pts in out.values():
        parts = {"rgb": losses.rgb_loss(res.color, gt_color)}
        alpha = 1.0 - ad.exp(-samples.out.sigma * samples.delta)
        parts["geo"] = losses.geo_loss(alpha, scenes.gt_occupancy(ctx.scene, pts))
        if config.semantic:
            parts["seg"] = losses.seg_loss(res.semantics, gt_label)
        if config.depth_mode != "none":
            parts["depth"] = _depth_term(config, ctx.ds, samples, res, gt_depth, hit)
        for k, v in parts.items():
            terms[k] = v if terms[k] is None else terms[k] + v
    if config.detection:
        gated = featvol.opacity_gate(volume, model.store, model.coarse)
        head = detect.head_forward(gated, model.store, model.det)
        terms["det"] = detect.detection_loss(head, ctx.det_targets)
    return {k: v for k, v in terms.items() if v is not None}


# -- training loop ----------------------------------------------------------

@dataclass
class TrainState:
    iteration: int
    model: Model
    optimizer: SGD
    running: dict = field(default_factory=dict)

    def snapshot(self):
        tensors = dict(self.model.store.state())
        tensors.update({f"velocity/{k}": v.copy() for k, v in self.optimizer.velocity.items()})
        meta = {"iteration": self.iteration, "running": self.running,
                "config": self.model.config.to_dict(), "n_classes": self.model.n_classes}
        return tensors, meta


def init_state(config, n_classes):
    model = Model(config, n_classes)
    return TrainState(0, model, SGD(model.store, config.lr, config.momentum))


def save_checkpoint(state, path):
    tensors, meta = state.snapshot()
    save_tensors(path, tensors, meta)


def load_checkpoint(path, config=None):
    tensors, meta = load_tensors(path)
    cfg = config or TrainConfig(**meta["config"])
    state = init_state(cfg, meta["n_classes"])
    state.model.store.load_state({k: v for k, v in tensors.items() if not k.startswith("velocity/")})
    for k in state.optimizer.velocity:
        state.optimizer.velocity[k] = tensors[f"velocity/{k}"].copy()
    state.iteration = int(meta["iteration"])
    state.running = dict(meta.get("running", {}))
    return state


def iteration_rng(seed, iteration):
    return np.random.default_rng([seed, STREAM_TRAIN, iteration])


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        return {k: g * s for k, g in grads.items()}, total
    return grads, total


def train(scene_list, config, state=None, contexts=None, log=None, until=None):
    """Run SGD iterations on ``scene_list`` up to ``until`` (default config.iterations).

    ``log`` is a callable receiving one dict per iteration.  Returns the
    final TrainState.
    """
    if not scene_list:
        raise ValueError("need at least one scene")
    n_classes = max(s.n_classes for s in scene_list)
    state = state or init_state(config, n_classes)
    contexts = contexts or [build_context(s, config) for s in scene_list]
    stop = config.iterations if until is None else until
    model = state.model
    while state.iteration < stop:
        it = state.iteration
        rng = iteration_rng(config.seed, it)
        ctx = contexts[int(rng.integers(len(contexts)))]
        view = ctx.train_views[int(rng.integers(len(ctx.train_views)))]
        n_pix = ctx.scene.views[view].camera.width * ctx.scene.views[view].camera.height
        pixels = rng.choice(n_pix, size=min(config.rays_per_batch, n_pix), replace=False)
        t0 = time.perf_counter()
        terms = batch_terms(model, ctx, view, pixels, rng)
        total, report = losses.total_loss(terms, config.weights)
        model.store.zero_grad()
        ad.backward(total)
        grads, gnorm = _clip(model.store.grads(), config.clip_norm)
        if not math.isfinite(gnorm):
            raise losses.TrainingDivergence("gradient norm", gnorm)
        state.optimizer.step(grads)
        state.iteration += 1
        rec = {"iter": state.iteration, **report.as_dict(), "grad_norm": gnorm}
        for k in losses.TERMS + ("total",):
            prev = state.running.get(k)
            state.running[k] = rec[k] if prev is None else 0.98 * prev + 0.02 * rec[k]
        if log is not None:
            log({**rec, "wall": time.perf_counter() - t0})
    return state


class JsonlLog:
    """Line-delimited JSON training log."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w")

    def __call__(self, record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def read_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- evaluation -------------------------------------------------------------

class ModelPredictor:
    def __init__(self, state):
        self.model = state.model
        self.config = state.model.config

    def render(self, ctx, view, scene_index=0):
        volume = feature_volume(self.model, ctx)
        coarse, fine = fields_for(self.model, _frozen(volume))
        rng = np.random.default_rng([self.config.seed, STREAM_EVAL, scene_index, view])
        cam = ctx.scene.views[view]
        return renderer.render_view(coarse, cam.camera, cam.pose, ctx.ds,
                                    render_config(self.model, ctx, jitter=False), fine, rng)

    def detect(self, ctx):
        volume = _frozen(feature_volume(self.model, ctx))
        gated = featvol.opacity_gate(volume, self.model.store, self.model.coarse)
        head = detect.head_forward(gated, self.model.store, self.model.det)
        dets = detect.decode_boxes(head, ctx.scene.scene_id, self.config.score_threshold)
        return detect.nms(dets, self.config.nms_iou)


def _frozen(volume):
    return featvol.FeatureVolume(volume.grid, volume.array().copy(), volume.hits)


class OraclePredictor:
    """Returns the analytic ground truth; used to sanity-check the metrics."""

    def render(self, ctx, view, scene_index=0):
        return {"color": ctx.images[view], "depth": ctx.depths[view], "label": ctx.labels[view]}

    def detect(self, ctx):
        return detect.DetectionSet(ctx.scene.gt_boxes(), ctx.scene.scene_id)


def psnr(pred, target):
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def metrics_from_outputs(outputs, contexts):
    """Metrics from per-view predicted maps and per-scene detections.

    ``outputs`` is {"views": [(scene_index, view, maps)], "dets": [DetectionSet]}.
    """
    psnrs, near_sq, far_sq, correct, total = [], [], [], 0, 0
    for si, view, maps in outputs["views"]:
        ctx = contexts[si]
        psnrs.append(psnr(maps["color"], ctx.images[view]))
        gt = ctx.depths[view]
        hit = gt < ctx.scene.z_max
        mid = 0.5 * (ctx.ds.z_min + ctx.ds.z_max)
        err = (np.asarray(maps["depth"]) - gt) ** 2
        near_sq.append(err[hit & (gt < mid)])
        far_sq.append(err[hit & (gt >= mid)])
        if maps.get("label") is not None:
            correct += int(np.sum(np.asarray(maps["label"]) == ctx.labels[view]))
            total += ctx.labels[view].size
    near = np.concatenate(near_sq) if near_sq else np.zeros(0)
    far = np.concatenate(far_sq) if far_sq else np.zeros(0)
    result = {
        "psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
        "depth_rmse_near": float(np.sqrt(near.mean())) if near.size else float("nan"),
        "depth_rmse_far": float(np.sqrt(far.mean())) if far.size else float("nan"),
        "semantic_accuracy": correct / total if total else float("nan"),
    }
    maps = detect.evaluate_map(outputs["dets"], [c.scene.gt_boxes() for c in contexts])
    result["map_25"] = maps[0.25]["map"]
    result["map_50"] = maps[0.5]["map"]
    return result


def collect_outputs(predictor, contexts):
    views, dets = [], []
    for si, ctx in enumerate(contexts):
        for v in ctx.eval_views:
            views.append((si, v, predictor.render(ctx, v, si)))
        dets.append(predictor.detect(ctx))
    return {"views": views, "dets": dets}


def evaluate(state, scene_list, config=None, contexts=None, oracle=False, dump_dir=None):
    """Held-out metrics; optionally dump per-view maps and detections."""
    config = config or (state.model.config if state is not None else TrainConfig())
    contexts = contexts or [build_context(s, config) for s in scene_list]
    predictor = OraclePredictor() if oracle else ModelPredictor(state)
    outputs = collect_outputs(predictor, contexts)
    if dump_dir is not None:
        dump_outputs(outputs, contexts, dump_dir)
    return metrics_from_outputs(outputs, contexts)


def dump_outputs(outputs, contexts, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for si, view, maps in outputs["views"]:
        sid = contexts[si].scene.scene_id
        write_map(out / f"{sid}_v{view:03d}_color.map", maps["color"])
        write_map(out / f"{sid}_v{view:03d}_depth.map", maps["depth"])
        if maps.get("label") is not None:
            write_map(out / f"{sid}_v{view:03d}_label.map", np.asarray(maps["label"]), dtype="i8")
    for dets in outputs["dets"]:
        write_detections(out / f"{dets.scene_id}_dets.txt", dets)
