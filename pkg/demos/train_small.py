"""Train the joint rendering + detection model on three small scenes.

Run:  python3 demos/train_small.py [iterations]

This is the same pipeline the command line drives; a few hundred
iterations already show the loss falling and the held-out views taking
shape.  Two thousand iterations (the default config) take a few minutes on
one core.
"""

import sys
import time

from pasdet import scenes, trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
config = trainer.TrainConfig(iterations=iterations)
scene_list = [scenes.generate_scene(seed=s, n_views=20) for s in range(3)]
contexts = [trainer.build_context(s, config) for s in scene_list]


def report(record):
    if record["iter"] % 50 == 0 or record["iter"] == 1:
        terms = "  ".join(f"{k} {record[k]:.3f}" for k in ("rgb", "seg", "depth", "geo", "det"))
        print(f"iter {record['iter']:5d}  total {record['total']:.3f}  {terms}")


start = time.perf_counter()
state = trainer.train(scene_list, config, contexts=contexts, log=report)
print(f"trained {state.iteration} iterations in {time.perf_counter() - start:.0f} s\n")

metrics = trainer.evaluate(state, scene_list, config, contexts)
for name, value in metrics.items():
    print(f"{name:>18}: {value:.4f}")
