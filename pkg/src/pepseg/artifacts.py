"""On-disk artifacts: run-length masks, detection files, overlay images and run manifests.

Detection files are JSON lines, one instance per line::

    {"image_id": 0, "class_id": 2, "score": 0.93, "height": 64, "width": 64, "counts": [...]}

``counts`` alternates run lengths of 0s and 1s over the mask in row-major order,
always starting with a (possibly empty) run of 0s. This is an internal format,
not COCO's column-major compressed RLE.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import platform
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .evaluation import Detection


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: Iterable[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts) or sum(counts) != height * width:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def detection_record(det: Detection) -> dict:
    h, w = det.mask.shape
    return {"image_id": det.image_id, "class_id": int(det.class_id), "score": float(det.score),
            "height": int(h), "width": int(w), "counts": rle_encode(det.mask)}


def write_detections(detections: Iterable[Detection], path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps(detection_record(det)) + "\n")
            n += 1
    return n


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            mask = rle_decode(rec["counts"], rec["height"], rec["width"])
            out.append(Detection(rec["image_id"], int(rec["class_id"]), mask, float(rec["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from exc
    return out


def instance_color(index: int) -> tuple[int, int, int]:
    """Fixed color per instance index (golden-ratio hue walk)."""
    hue = (0.13 + index * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _contour(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def render_overlay(image: np.ndarray, masks, alpha: float = 0.4) -> np.ndarray:
    """[3, H, W] image in [0, 1] plus binary masks -> uint8 [H, W, 3] with fills and contours."""
    canvas = np.moveaxis(np.asarray(image, dtype=np.float64), 0, -1).copy() * 255.0
    for i, mask in enumerate(masks):
        mask = np.asarray(mask, dtype=bool)
        color = np.array(instance_color(i), dtype=np.float64)
        canvas[mask] = (1 - alpha) * canvas[mask] + alpha * color
        canvas[_contour(mask)] = color
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


def save_overlay(image: np.ndarray, detections, path: str | Path) -> None:
    Image.fromarray(render_overlay(image, [d.mask for d in detections])).save(path)


def dataset_hash(scenes) -> str:
    """SHA-256 over image pixels, instance classes and masks, in scene order."""
    h = hashlib.sha256()
    for s in scenes:
        h.update(str(s.image_id).encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        for inst in s.instances:
            h.update(int(inst.class_id).to_bytes(4, "little"))
            h.update(np.packbits(inst.mask).tobytes())
    return h.hexdigest()


def build_id() -> str:
    """Short hash of the package sources, so a manifest pins the code that produced it."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def write_manifest(path: str | Path, command: str, cfg: RunConfig | None = None,
                   seed: int | None = None, data_hash: str | None = None, **extra) -> Path:
    manifest = {
        "command": command,
        "build_id": build_id(),
        "seed": seed,
        "dataset_sha256": data_hash,
        "config": cfg.to_dict() if cfg is not None else None,
        "versions": {"python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False))
    return path
