"""Score hand-made detections against ground truth boxes.

Run:  python3 demos/detection_eval.py
"""

from pasdet.detect import Box3D, DetectionSet, evaluate_map, iou_aabb, nms

gt = [Box3D((0, 0, 0.5), (1, 1, 1), 0), Box3D((3, 0, 0.4), (0.8, 0.8, 0.8), 1)]
raw = DetectionSet([
    Box3D((0.1, 0, 0.5), (1, 1, 1), 0, 0.9),      # good hit
    Box3D((0.15, 0.05, 0.5), (1, 1, 1), 0, 0.6),  # duplicate, NMS removes it
    Box3D((3.3, 0.1, 0.4), (0.8, 0.8, 0.8), 1, 0.7),  # loose hit
    Box3D((-2, 2, 0.5), (1, 1, 1), 1, 0.8),       # false positive
], "demo")

print("IoU of each detection with its nearest GT:")
for b in raw.boxes:
    print(f"  class {b.class_id} score {b.score:.1f}: {max(iou_aabb(b, g) for g in gt):.3f}")

kept = nms(raw, iou_threshold=0.25)
print(f"\nNMS keeps {len(kept.boxes)} of {len(raw.boxes)} boxes")

for thr, res in evaluate_map([kept], [gt]).items():
    aps = ", ".join(f"class {c}: {ap:.3f}" for c, ap in res["ap"].items())
    print(f"mAP@{thr}: {res['map']:.3f}   ({aps})")
