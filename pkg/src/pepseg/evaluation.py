"""COCO-style mask AP: greedy matching per IoU threshold, 101-point interpolated precision,
per-class then mean, with area buckets."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
COCO_CANVAS = 640 * 640


@dataclass
class Detection:
    image_id: int | str
    class_id: int
    mask: np.ndarray  # bool [H, W] at image resolution
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class EvalReport:
    AP: float | None
    AP50: float | None
    AP75: float | None
    AP_S: float | None
    AP_M: float | None
    AP_L: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"
        return "\n".join(f"{k}={fmt(v)}" for k, v in self.as_dict().items())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text() + "\n")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _iou_matrix(dts: list[np.ndarray], gts: list[np.ndarray]) -> np.ndarray:
    if not dts or not gts:
        return np.zeros((len(dts), len(gts)))
    d = np.stack([m.reshape(-1) for m in dts]).astype(np.float64)
    g = np.stack([m.reshape(-1) for m in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def area_ranges(height: int, width: int, scaling: str = "canvas") -> list[tuple[float, float]]:
    """[all, small, medium, large] area ranges; COCO thresholds scaled to the canvas if asked."""
    s = (height * width) / COCO_CANVAS if scaling == "canvas" else 1.0
    small, large = 32 ** 2 * s, 96 ** 2 * s
    return [(0.0, math.inf), (0.0, small), (small, large), (large, math.inf)]


def _match(ious, gt_ignore, thresholds):
    """COCO greedy matching. ``gt_ignore`` must be sorted with non-ignored first."""
    n_t, n_d, n_g = len(thresholds), ious.shape[0], ious.shape[1]
    dt_match = np.full((n_t, n_d), -1, dtype=int)
    dt_ignore = np.zeros((n_t, n_d), dtype=bool)
    for ti, t in enumerate(thresholds):
        gt_taken = np.zeros(n_g, dtype=bool)
        for di in range(n_d):
            best_iou = min(t, 1 - 1e-10)
            m = -1
            for gi in range(n_g):
                if gt_taken[gi]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                    break
                if ious[di, gi] < best_iou:
                    continue
                best_iou = ious[di, gi]
                m = gi
            if m == -1:
                continue
            dt_match[ti, di] = m
            dt_ignore[ti, di] = gt_ignore[m]
            gt_taken[m] = True
    return dt_match, dt_ignore


def evaluate(detections: Sequence[Detection], scenes, num_classes: int | None = None,
             area_scaling: str = "canvas", max_dets: int = 100) -> EvalReport:
    """Mask AP over ``scenes`` (objects with ``image_id``, ``size`` and ``instances``)."""
    if num_classes is None:
        num_classes = max((i.class_id for s in scenes for i in s.instances), default=0)
        num_classes = max(num_classes, max((d.class_id for d in detections), default=0))
    for d in detections:
        if not 1 <= d.class_id <= num_classes:
            raise ValueError(f"unknown class id {d.class_id}")
    by_image = {s.image_id: s for s in scenes}
    for d in detections:
        if d.image_id not in by_image:
            raise ValueError(f"detection for unknown image {d.image_id!r}")

    n_t, n_r, n_a = len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS), 4
    precision = -np.ones((n_t, n_r, num_classes, n_a))
    indexed = list(enumerate(detections))

    for k in range(1, num_classes + 1):
        per_area = [dict(scores=[], ids=[], match=[], ignore=[], npig=0) for _ in range(n_a)]
        for scene in scenes:
            gts = [i for i in scene.instances if i.class_id == k]
            dts = sorted(((i, d) for i, d in indexed if d.image_id == scene.image_id and d.class_id == k),
                         key=lambda x: (-x[1].score, x[0]))[:max_dets]
            h, w = scene.size
            ranges = area_ranges(h, w, area_scaling)
            gt_areas = np.array([g.area for g in gts], dtype=float)
            dt_areas = np.array([d.mask.sum() for _, d in dts], dtype=float)
            ious_full = _iou_matrix([d.mask for _, d in dts], [g.mask for g in gts])
            for a, (lo, hi) in enumerate(ranges):
                ig = (gt_areas < lo) | (gt_areas > hi)
                order = np.argsort(ig, kind="mergesort")
                ig_sorted = ig[order]
                dm, di = _match(ious_full[:, order], ig_sorted, IOU_THRESHOLDS)
                out_of_range = (dt_areas < lo) | (dt_areas > hi)
                di = di | ((dm == -1) & out_of_range[None, :])
                acc = per_area[a]
                acc["scores"] += [d.score for _, d in dts]
                acc["ids"] += [i for i, _ in dts]
                acc["match"].append(dm)
                acc["ignore"].append(di)
                acc["npig"] += int((~ig).sum())
        for a in range(n_a):
            acc = per_area[a]
            if acc["npig"] == 0:
                continue
            if not acc["scores"]:
                precision[:, :, k - 1, a] = 0.0
                continue
            scores = np.array(acc["scores"])
            ids = np.array(acc["ids"])
            order = np.lexsort((ids, -scores))
            dm = np.concatenate(acc["match"], axis=1)[:, order]
            di = np.concatenate(acc["ignore"], axis=1)[:, order]
            tps = np.cumsum((dm > -1) & ~di, axis=1).astype(float)
            fps = np.cumsum((dm == -1) & ~di, axis=1).astype(float)
            for t in range(n_t):
                tp, fp = tps[t], fps[t]
                rc = tp / acc["npig"]
                pr = tp / np.maximum(tp + fp, np.spacing(1))
                pr = np.maximum.accumulate(pr[::-1])[::-1]
                q = np.zeros(n_r)
                inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
                valid = inds < len(pr)
                q[valid] = pr[inds[valid]]
                precision[t, :, k - 1, a] = q

    def summarize(t_index=None, area=0):
        p = precision[:, :, :, area] if t_index is None else precision[t_index, :, :, area]
        p = p[p > -1]
        return None if p.size == 0 else float(p.mean())

    t50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return EvalReport(summarize(), summarize(t50), summarize(t75),
                      summarize(area=1), summarize(area=2), summarize(area=3))
