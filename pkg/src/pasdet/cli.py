"""Command-line entry point: ``pasdet gen|train|eval|ablate``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical
divergence.  Output directories default to ``$PASDET_OUT`` (or ``./pasdet-out``).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import scenes, trainer
from .losses import TrainingDivergence
from .mapfile import MapFormatError, write_map
from .nnet.params import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "PASDET_OUT"
METRICS = ("psnr", "depth_rmse_near", "depth_rmse_far", "semantic_accuracy", "map_25", "map_50")
AXES = {
    "sampling": ("strategy", ("US", "UIS", "LgIS", "LnIS")),
    "depthloss": ("depth_mode", ("l1", "huber", "ordinal")),
    "fine": ("fine", (False, True)),
    "norm": ("depth_normalize", (False, True)),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out(sub):
    return Path(os.environ.get(OUT_ENV, "pasdet-out")) / sub


def _out_dir(args, sub):
    out = Path(args.out) if args.out else _default_out(sub)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scenes(directory):
    paths = sorted(Path(directory).glob("*.scene"))
    if not paths:
        raise FileNotFoundError(f"{directory}: no .scene files")
    return [scenes.load_scene(p) for p in paths]


def _load_config(args):
    config = trainer.TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        config = trainer.parse_config(path.read_text(), source=str(path))
    updates = {}
    if getattr(args, "iters", None) is not None:
        updates["iterations"] = args.iters
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    return replace(config, **updates)


def format_table(rows, columns):
    """Whitespace-aligned text table; first line is a ``#``-prefixed header."""
    def cell(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.6f}"
        return str(v)
    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["# " + "  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  " + "  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip() for b in body]
    return "\n".join(lines) + "\n"


def parse_table(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    columns = lines[0].lstrip("#").split()
    return [dict(zip(columns, ln.split())) for ln in lines[1:]]


# -- commands ---------------------------------------------------------------

def cmd_gen(args):
    spec = {}
    if args.spec:
        for lineno, raw in enumerate(Path(args.spec).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{args.spec}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            spec[key] = value
    seed = args.seed if args.seed is not None else int(spec.pop("seed", 0))
    spec.pop("seed", None)
    n_scenes = int(spec.pop("scenes", args.scenes))
    kwargs = {
        "n_views": int(spec.pop("views", args.views)),
        "n_boxes": int(spec.pop("boxes", args.boxes)),
        "n_classes": int(spec.pop("classes", args.classes)),
    }
    res = int(spec.pop("resolution", args.resolution))
    kwargs["resolution"] = (res, res)
    if spec:
        raise UsageError(f"unknown scene spec keys: {', '.join(sorted(spec))}")
    out = _out_dir(args, "scenes")
    for k in range(n_scenes):
        scene = scenes.generate_scene(seed=seed + k, scene_id=f"scene{seed + k:04d}", **kwargs)
        scenes.save_scene(scene, out / f"{scene.scene_id}.scene")
        maps = out / f"{scene.scene_id}_maps"
        maps.mkdir(exist_ok=True)
        for i in range(len(scene.views)):
            depth, which = scenes.trace_view(scene, i)
            cls = np.array([b.class_id for b in scene.boxes] + [scene.background_label])
            col = np.array([b.color for b in scene.boxes] + [scene.background], dtype=np.float64)
            write_map(maps / f"v{i:03d}_depth.map", depth)
            write_map(maps / f"v{i:03d}_label.map", cls[which], dtype="i8")
            write_map(maps / f"v{i:03d}_color.map", col[which])
    print(f"wrote {n_scenes} scene(s) to {out}")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(args)
    scene_list = _load_scenes(args.scenes)
    out = _out_dir(args, "train")
    (out / "config.txt").write_text(trainer.format_config(config))
    log = trainer.JsonlLog(out / "train_log.jsonl")
    try:
        state = trainer.train(scene_list, config, log=log)
    finally:
        log.close()
    trainer.save_checkpoint(state, out / "model.ckpt")
    print(f"trained {state.iteration} iterations; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def _metric_row(name, metrics):
    return {"variant": name, **{k: float(metrics[k]) for k in METRICS}}


def cmd_eval(args):
    if not args.oracle and not args.ckpt:
        raise UsageError("eval needs --ckpt (or --oracle)")
    scene_list = _load_scenes(args.scenes)
    out = _out_dir(args, "eval")
    if args.oracle:
        config = _load_config(args)
        metrics = trainer.evaluate(None, scene_list, config, oracle=True,
                                   dump_dir=out / "dump" if args.dump else None)
    else:
        state = trainer.load_checkpoint(args.ckpt)
        metrics = trainer.evaluate(state, scene_list, dump_dir=out / "dump" if args.dump else None)
    row = _metric_row("oracle" if args.oracle else Path(args.ckpt).stem, metrics)
    text = format_table([row], ("variant",) + METRICS)
    (out / "metrics.txt").write_text(text)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args):
    if args.axis not in AXES:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {', '.join(AXES)}")
    field, values = AXES[args.axis]
    base = _load_config(args)
    scene_list = _load_scenes(args.scenes)
    out = _out_dir(args, f"ablate-{args.axis}")
    rows = []
    for value in values:
        config = replace(base, **{field: value})
        name = f"{field}={str(value).lower() if isinstance(value, bool) else value}"
        contexts = [trainer.build_context(s, config) for s in scene_list]
        state = trainer.train(scene_list, config, contexts=contexts)
        rows.append(_metric_row(name, trainer.evaluate(state, scene_list, config, contexts)))
        print(f"finished {name}", file=sys.stderr)
    text = format_table(rows, ("variant",) + METRICS)
    (out / "table.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser():
    p = _Parser(prog="pasdet", description="Volume rendering and 3D detection on synthetic scenes")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP threads (1 gives the canonical bit-exact outputs)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes and ground-truth maps")
    g.add_argument("--spec", help="key = value file (seed, scenes, views, boxes, classes, resolution)")
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--boxes", type=int, default=3)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a directory of scenes")
    t.add_argument("--scenes", required=True)
    t.add_argument("--config")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    e.add_argument("--ckpt")
    e.add_argument("--scenes", required=True)
    e.add_argument("--config", help="only used with --oracle")
    e.add_argument("--oracle", action="store_true", help="score the analytic ground truth")
    e.add_argument("--dump", action="store_true", help="write per-view maps and detections")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score every variant along one axis")
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--scenes", required=True)
    a.add_argument("--config")
    a.add_argument("--iters", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (scenes.SceneFormatError, MapFormatError, CheckpointError, OSError) as exc:
        print(f"pasdet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"pasdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"pasdet: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
