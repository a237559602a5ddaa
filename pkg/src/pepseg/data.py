"""Synthetic overlapping-shapes scenes and a polygon-only COCO annotation reader/writer.

Polygon rasterization convention: a pixel belongs to a polygon iff its center
``(col + 0.5, row + 0.5)`` lies inside under the even-odd rule. Multiple
polygons of one annotation are unioned.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .supervision import Instance, Scene

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")  # class ids 1, 2, 3
CATEGORIES = [{"id": i + 1, "name": n} for i, n in enumerate(SHAPES)]


class DataError(ValueError):
    pass


class UnsupportedSegmentation(DataError):
    pass


@dataclass
class SynthSpec:
    image_size: int = 64
    num_instances: tuple[int, int] = (2, 5)
    overlap_bias: float = 0.7
    size_range: tuple[int, int] = (6, 12)
    seed: int = 0
    min_visible_fraction: float = 0.3
    min_visible_pixels: int = 12

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise DataError("size must be multiple of 32")
        lo, hi = self.num_instances
        if not 1 <= lo <= hi:
            raise DataError("num_instances range is empty")
        if not 0.0 <= self.overlap_bias <= 1.0:
            raise DataError("overlap_bias must lie in [0, 1]")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise DataError("size_range is empty")
        if 2 * self.size_range[1] >= self.image_size:
            raise DataError("shapes larger than the canvas")


def _shape_mask(kind: str, cy: float, cx: float, half: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
    # upward triangle with apex at the top of the box
    poly = [(cx, cy - half), (cx + half, cy + half), (cx - half, cy + half)]
    return _points_in_polygon(xs, ys, poly)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly) -> np.ndarray:
    """Even-odd rule; ``poly`` is a sequence of (x, y) vertices."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    return inside


def generate_scene(spec: SynthSpec, image_id: int | str = 0) -> Scene:
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    target = int(rng.integers(spec.num_instances[0], spec.num_instances[1] + 1))
    placed: list[tuple[str, float, float, float, np.ndarray]] = []

    for _ in range(target):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        half = float(rng.uniform(spec.size_range[0], spec.size_range[1]))
        adjacent = bool(placed) and rng.random() < spec.overlap_bias
        center = None
        for _attempt in range(60):
            if adjacent:
                _, ay, ax, ah, _ = placed[int(rng.integers(len(placed)))]
                theta = rng.uniform(0, 2 * math.pi)
                dist = rng.uniform(0.5, 0.9) * (half + ah)
                cy, cx = ay + dist * math.sin(theta), ax + dist * math.cos(theta)
                if half <= cy <= size - half and half <= cx <= size - half:
                    center = (cy, cx)
                    break
            else:
                cy, cx = rng.uniform(half, size - half, size=2)
                m = _shape_mask(kind, cy, cx, half + 1.0, size)
                if not any((m & p[4]).any() for p in placed):
                    center = (cy, cx)
                    break
        if center is None:
            continue
        mask = _shape_mask(kind, center[0], center[1], half, size)
        if mask.any():
            placed.append((kind, center[0], center[1], half, mask))

    image = np.full((3, size, size), 0.08, dtype=np.float32)
    image += rng.normal(0.0, 0.02, size=image.shape).astype(np.float32)
    colors = rng.uniform(0.35, 1.0, size=(len(placed), 3)).astype(np.float32)
    for (kind, cy, cx, half, mask), color in zip(placed, colors):
        image[:, mask] = color[:, None]
    np.clip(image, 0.0, 1.0, out=image)

    instances = []
    for k, (kind, cy, cx, half, mask) in enumerate(placed):
        occluders = np.zeros_like(mask)
        for later in placed[k + 1:]:
            occluders |= later[4]
        visible = mask & ~occluders
        area = int(visible.sum())
        if area < spec.min_visible_pixels or area < spec.min_visible_fraction * mask.sum():
            continue
        instances.append(Instance(SHAPES.index(kind) + 1, visible, full_mask=mask))
    return Scene(image, instances, image_id)


def generate_dataset(n: int, spec: SynthSpec) -> list[Scene]:
    """``n`` scenes; scene i uses seed ``spec.seed * 1_000_003 + i`` so items are independent."""
    if n < 1:
        raise DataError("n must be >= 1")
    scenes = []
    for i in range(n):
        item = SynthSpec(**{**spec.__dict__, "seed": spec.seed * 1_000_003 + i})
        scenes.append(generate_scene(item, image_id=i))
    return scenes


def flip_scene(scene: Scene) -> Scene:
    insts = [Instance(i.class_id, i.mask[:, ::-1].copy(),
                      None if i.full_mask is None else i.full_mask[:, ::-1].copy())
             for i in scene.instances]
    return Scene(scene.image[:, :, ::-1].copy(), insts, scene.image_id)


# --------------------------------------------------------------------------- COCO polygons

@dataclass
class AnnotationRecord:
    image_path: Path
    width: int
    height: int
    image_id: int
    objects: list[tuple[int, list[list[float]]]] = field(default_factory=list)
    skipped: int = 0


def _valid_polygon(poly, width: int, height: int) -> bool:
    if not isinstance(poly, (list, tuple)) or len(poly) < 6 or len(poly) % 2:
        return False
    try:
        xs = np.asarray(poly[0::2], dtype=float)
        ys = np.asarray(poly[1::2], dtype=float)
    except (TypeError, ValueError):
        return False
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        return False
    return bool((xs >= 0).all() and (xs <= width).all() and (ys >= 0).all() and (ys <= height).all())


def load_coco_annotations(path: str | Path) -> list[AnnotationRecord]:
    path = Path(path)
    data = json.loads(path.read_text())
    root = path.parent
    images = {}
    for img in data.get("images", []):
        file = root / img["file_name"]
        if not file.exists():
            raise FileNotFoundError(f"image referenced by annotations not found: {file}")
        images[img["id"]] = AnnotationRecord(file, int(img["width"]), int(img["height"]), img["id"])
    skipped = 0
    for ann in data.get("annotations", []):
        rec = images.get(ann["image_id"])
        if rec is None:
            raise DataError(f"annotation {ann.get('id')} references unknown image {ann['image_id']}")
        seg = ann.get("segmentation")
        if isinstance(seg, dict):
            raise UnsupportedSegmentation("RLE unsupported: only polygon segmentations are accepted")
        polys = [p for p in (seg or []) if _valid_polygon(p, rec.width, rec.height)]
        bad = len(seg or []) - len(polys)
        if bad or not polys:
            rec.skipped += 1
            skipped += 1
        if polys and not bad:
            rec.objects.append((int(ann["category_id"]), [list(map(float, p)) for p in polys]))
    if skipped:
        log.warning("skipped %d annotation(s) with malformed polygons", skipped)
    return list(images.values())


def category_table(path: str | Path) -> dict[int, int]:
    """COCO category id -> contiguous class id 1..K in ascending id order."""
    data = json.loads(Path(path).read_text())
    ids = sorted(c["id"] for c in data.get("categories", []))
    return {cid: i + 1 for i, cid in enumerate(ids)}


def rasterize_polygons(polys, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    mask = np.zeros((height, width), dtype=bool)
    for flat in polys:
        poly = list(zip(flat[0::2], flat[1::2]))
        mask |= _points_in_polygon(xs, ys, poly)
    return mask


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0)


def rasterize(record: AnnotationRecord, category_map: dict[int, int] | None = None) -> Scene:
    image = load_image(record.image_path)
    if image.shape[1:] != (record.height, record.width):
        raise DataError(f"{record.image_path}: size {image.shape[1:]} differs from annotation")
    instances = []
    for cat, polys in record.objects:
        cls = category_map[cat] if category_map is not None else cat
        mask = rasterize_polygons(polys, record.height, record.width)
        if mask.any():
            instances.append(Instance(cls, mask))
    return Scene(image, instances, record.image_id)


def mask_to_polygons(mask: np.ndarray) -> list[list[float]]:
    """Lossless polygon encoding of a binary mask as axis-aligned rectangles.

    Row runs are merged downward while they repeat, so solid shapes stay compact.
    """
    rects = []
    open_runs: dict[tuple[int, int], int] = {}
    h = mask.shape[0]
    for r in range(h + 1):
        runs = set()
        if r < h:
            row = np.concatenate([[False], mask[r], [False]])
            edges = np.flatnonzero(row[1:] != row[:-1])
            runs = {(int(a), int(b)) for a, b in zip(edges[0::2], edges[1::2])}
        for run in list(open_runs):
            if run not in runs:
                rects.append((open_runs.pop(run), r, run))
        for run in runs:
            open_runs.setdefault(run, r)
    polys = []
    for r0, r1, (c0, c1) in sorted(rects):
        polys.append([float(c0), float(r0), float(c1), float(r0),
                      float(c1), float(r1), float(c0), float(r1)])
    return polys


def save_dataset(scenes: list[Scene], out_dir: str | Path, categories=CATEGORIES) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for idx, scene in enumerate(scenes):
        name = f"images/{idx:06d}.png"
        pixels = np.moveaxis(np.round(scene.image * 255.0), 0, -1).astype(np.uint8)
        Image.fromarray(pixels).save(out / name)
        h, w = scene.size
        images.append({"id": idx, "file_name": name, "height": h, "width": w})
        for inst in scene.instances:
            r0, c0, r1, c1 = inst.bbox
            annotations.append({
                "id": ann_id, "image_id": idx, "category_id": inst.class_id,
                "segmentation": mask_to_polygons(inst.mask), "area": inst.area,
                "bbox": [c0, r0, c1 - c0, r1 - r0], "iscrowd": 0,
            })
            ann_id += 1
    path = out / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations,
                                "categories": list(categories)}))
    return path


def load_dataset(directory: str | Path) -> list[Scene]:
    ann = Path(directory) / "annotations.json"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.json in {directory}")
    table = category_table(ann)
    return [rasterize(r, table) for r in load_coco_annotations(ann)]
