"""Binary image-map files and text detection dumps.

Map file layout (little-endian)::

    magic     8 bytes  b"PASDMAP1"
    dtype     4 bytes  b"f8le" (float64) or b"i8le" (int64)
    height    u32
    width     u32
    channels  u32
    payload   height * width * channels * 8 bytes, row-major (H, W, C)

Detection dump: ``# scene <id>`` header, then one box per line as
``cx cy cz sx sy sz class score`` in descending score order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .detect import Box3D, DetectionSet

MAP_MAGIC = b"PASDMAP1"
DTYPES = {"f8": (b"f8le", "<f8"), "i8": (b"i8le", "<i8")}


class MapFormatError(ValueError):
    pass


def write_map(path, array, dtype="f8"):
    tag, np_dtype = DTYPES[dtype]
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError("maps are (H, W) or (H, W, C)")
    h, w, c = a.shape
    payload = np.ascontiguousarray(a, dtype=np_dtype).tobytes()
    Path(path).write_bytes(MAP_MAGIC + tag + struct.pack("<III", h, w, c) + payload)


def read_map(path):
    """Returns an (H, W, C) array; C == 1 maps are squeezed to (H, W)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAP_MAGIC:
        raise MapFormatError(f"{path}: bad magic")
    tag = buf[8:12]
    for np_tag, np_dtype in DTYPES.values():
        if tag == np_tag:
            break
    else:
        raise MapFormatError(f"{path}: unknown dtype tag {tag!r}")
    h, w, c = struct.unpack_from("<III", buf, 12)
    if len(buf) - 24 != h * w * c * 8:
        raise MapFormatError(f"{path}: payload length {len(buf) - 24} != {h * w * c * 8}")
    a = np.frombuffer(buf, dtype=np_dtype, offset=24).reshape(h, w, c).copy()
    return a[..., 0] if c == 1 else a


def write_detections(path, dets):
    lines = [f"# scene {dets.scene_id}"]
    for b in dets.sorted().boxes:
        vals = [*b.center, *b.size]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {b.class_id} {b.score!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path):
    scene_id, boxes = "", []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# scene"):
            scene_id = line[len("# scene"):].strip()
            continue
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split()
        boxes.append(Box3D([float(x) for x in f[0:3]], [float(x) for x in f[3:6]],
                           int(f[6]), float(f[7])))
    return DetectionSet(boxes, scene_id)
