"""Render a generated scene with the analytic box density and compare
the resulting depth with exact ray/box intersection.

Run:  python3 demos/oracle_render.py
"""

import numpy as np

from pasdet import renderer, scenes

scene = scenes.generate_scene(n_boxes=3, n_views=8, seed=2, resolution=(64, 64))
ds = scenes.depth_space(scene, n_bins=64, strategy="LnIS")
print(f"scene with {len(scene.boxes)} boxes; depth range [{ds.z_min:.3f}, {ds.z_max:.3f}] m")

field = renderer.BoxOracleField(scene.boxes, scene.n_classes + 1)
config = renderer.RenderConfig(n_coarse=64, jitter=False, background=scene.background,
                               background_class=scene.background_label)

for i in (0, 3, 6):
    view = scene.views[i]
    out = renderer.render_view(field, view.camera, view.pose, ds, config)
    gt = scenes.gt_depth_map(scene, i)
    hit = gt < scene.z_max
    err = np.abs(out["depth"][hit] - gt[hit])
    agree = np.mean(out["label"] == scenes.gt_semantic_map(scene, i))
    print(f"view {i}: {hit.sum():4d} box pixels, median |depth error| {np.median(err) * 100:.2f} cm, "
          f"label agreement {agree:.3f}")

# A fine pass concentrates extra samples where the coarse weights peak,
# which tightens the depth estimate at the same coarse budget.
fine_cfg = renderer.RenderConfig(n_coarse=32, n_fine=32, jitter=False, background=scene.background,
                                 background_class=scene.background_label)
coarse_cfg = renderer.RenderConfig(n_coarse=32, jitter=False, background=scene.background,
                                   background_class=scene.background_label)
view = scene.views[0]
gt = scenes.gt_depth_map(scene, 0)
hit = gt < scene.z_max
for name, cfg in (("coarse 32", coarse_cfg), ("coarse 32 + fine 32", fine_cfg)):
    d = renderer.render_view(field, view.camera, view.pose, ds, cfg,
                             rng=np.random.default_rng(0))["depth"]
    print(f"{name:<20} mean |depth error| {np.mean(np.abs(d[hit] - gt[hit])) * 100:.2f} cm")
