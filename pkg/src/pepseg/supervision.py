"""Ground-truth scenes and every training target derived from them.

Geometry conventions used throughout:

* pixel (r, c) covers [r, r+1) x [c, c+1); masks are boolean ``[H, W]`` arrays.
* an instance center is the mass center of its visible mask in pixel-index
  coordinates (mean row, mean col).
* at a stage with stride ``t`` the grid cell holding pixel coordinate ``y`` is
  ``floor((y + 0.5) / t)``, i.e. the cell whose span contains the pixel center.
"""

from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import STRIDES


class SceneError(ValueError):
    pass


@dataclass
class Instance:
    class_id: int
    mask: np.ndarray  # visible mask, bool [H, W]
    full_mask: np.ndarray | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.class_id < 1:
            raise SceneError("class_id must be >= 1 (0 is background)")
        if not self.mask.any():
            raise SceneError("instance mask is empty")

    @cached_property
    def area(self) -> int:
        return int(self.mask.sum())

    @cached_property
    def center(self) -> tuple[float, float]:
        rows, cols = np.nonzero(self.mask)
        return float(rows.mean()), float(cols.mean())

    @cached_property
    def bbox(self) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1), half-open."""
        rows, cols = np.nonzero(self.mask)
        return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


@dataclass
class Scene:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: list[Instance] = field(default_factory=list)
    image_id: int | str = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[0] == 1:
            self.image = np.repeat(self.image, 3, axis=0)
        for inst in self.instances:
            if inst.mask.shape != self.image.shape[1:]:
                raise SceneError(
                    f"mask shape {inst.mask.shape} does not match image {self.image.shape[1:]}"
                )

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass(frozen=True)
class Window:
    """Half-open window [row0, row1) x [col0, col1) on one stage grid."""

    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.row1 - self.row0, self.col1 - self.col0

    def contains(self, row: int, col: int) -> bool:
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1


def window_for(location: tuple[int, int], radius: int | None, grid: tuple[int, int]) -> Window:
    """Square window of Chebyshev radius ``radius`` clipped to the grid; None = full grid."""
    gh, gw = grid
    if radius is None:
        return Window(0, gh, 0, gw)
    r, c = location
    return Window(max(0, r - radius), min(gh, r + radius + 1),
                  max(0, c - radius), min(gw, c + radius + 1))


def cell_of(y: float, stride: int) -> int:
    return int(math.floor((y + 0.5) / stride))


def center_cell(inst: Instance, stride: int, grid: tuple[int, int]) -> tuple[int, int]:
    cy, cx = inst.center
    return (min(max(cell_of(cy, stride), 0), grid[0] - 1),
            min(max(cell_of(cx, stride), 0), grid[1] - 1))


def center_in_cells(inst: Instance, stride: int) -> tuple[float, float]:
    """Instance center expressed in continuous cell-index units."""
    cy, cx = inst.center
    return (cy + 0.5) / stride - 0.5, (cx + 0.5) / stride - 0.5


def center_region(inst: Instance, stride: int, grid: tuple[int, int],
                  fraction: float) -> tuple[int, int, int, int]:
    """Inclusive cell range (r0, r1, c0, c1) of the central ``fraction``-scaled box.

    Always contains the center cell.
    """
    cy, cx = inst.center
    b = inst.bbox
    half_h = 0.5 * fraction * (b[2] - b[0])
    half_w = 0.5 * fraction * (b[3] - b[1])
    cr, cc = center_cell(inst, stride, grid)
    r0 = max(cell_of(cy - half_h, stride), 0)
    r1 = min(cell_of(cy + half_h, stride), grid[0] - 1)
    c0 = max(cell_of(cx - half_w, stride), 0)
    c1 = min(cell_of(cx + half_w, stride), grid[1] - 1)
    return min(r0, cr), max(r1, cr), min(c0, cc), max(c1, cc)


def routed_stages(inst: Instance, scale_ranges: Sequence[tuple[float, float]]) -> list[int]:
    """Stages (1-based) whose sqrt-area range contains the instance scale."""
    scale = math.sqrt(inst.area)
    return [s + 1 for s, (lo, hi) in enumerate(scale_ranges) if lo <= scale <= hi]


def grid_size(height: int, width: int, stride: int) -> tuple[int, int]:
    # stride-2 convs with padding 1 round up, so a 32-pixel image still has a 1x1 stride-64 map
    return -(-height // stride), -(-width // stride)


def stage_grids(height: int, width: int) -> list[tuple[int, int]]:
    return [grid_size(height, width, t) for t in STRIDES]


def build_semantic_targets(scene: Scene, scale_ranges, center_fraction: float) -> list[np.ndarray]:
    """Per-stage integer label maps (0 = background); one-hot via :func:`one_hot`.

    Larger instances are painted first so smaller ones win contested cells.
    """
    h, w = scene.size
    grids = stage_grids(h, w)
    labels = [np.zeros(g, dtype=np.int64) for g in grids]
    order = sorted(range(len(scene.instances)), key=lambda k: -scene.instances[k].area)
    for k in order:
        inst = scene.instances[k]
        for s in routed_stages(inst, scale_ranges):
            r0, r1, c0, c1 = center_region(inst, STRIDES[s - 1], grids[s - 1], center_fraction)
            labels[s - 1][r0:r1 + 1, c0:c1 + 1] = inst.class_id
    return labels


def one_hot(labels: np.ndarray, num_outputs: int) -> np.ndarray:
    """[H, W] int labels -> [C_P, H, W] float one-hot (channel-first)."""
    eye = np.eye(num_outputs, dtype=np.float64)
    return np.moveaxis(eye[labels], -1, 0)


def assign_location(stage: int, location: tuple[int, int], scene: Scene,
                    center_fraction: float) -> int | None:
    """Instance index whose center region (at ``stage``) holds ``location``; nearest center wins."""
    stride = STRIDES[stage - 1]
    h, w = scene.size
    grid = grid_size(h, w, stride)
    r, c = location
    best, best_d = None, math.inf
    for k, inst in enumerate(scene.instances):
        r0, r1, c0, c1 = center_region(inst, stride, grid, center_fraction)
        if not (r0 <= r <= r1 and c0 <= c <= c1):
            continue
        cy, cx = center_in_cells(inst, stride)
        d = math.hypot(r - cy, c - cx)
        if d < best_d:
            best, best_d = k, d
    return best


def assign_descriptors(descriptors: Iterable, scene: Scene,
                       center_fraction: float) -> dict[int, int | None]:
    return {d.id: assign_location(d.stage, d.location, scene, center_fraction)
            for d in descriptors}


def build_center_targets(stage: int, window: Window, scene: Scene,
                         source_instance: int | None, exclude_source: bool = True) -> np.ndarray:
    """Binary map over ``window`` with 1 at the center cell of every other instance."""
    stride = STRIDES[stage - 1]
    h, w = scene.size
    grid = grid_size(h, w, stride)
    target = np.zeros(window.shape, dtype=np.float64)
    for k, inst in enumerate(scene.instances):
        if exclude_source and k == source_instance:
            continue
        r, c = center_cell(inst, stride, grid)
        if window.contains(r, c):
            target[r - window.row0, c - window.col0] = 1.0
    return target


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Cell is 1 iff more than half of its ``factor x factor`` block is covered."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise SceneError(f"mask {h}x{w} not divisible by {factor}")
    frac = mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return frac > 0.5


def build_mask_targets(assignment: dict[int, int | None], scene: Scene,
                       mask_stride: int) -> dict[int, np.ndarray]:
    """Descriptor id -> downsampled mask of its instance; unassigned ids are excluded."""
    cache: dict[int, np.ndarray] = {}
    out = {}
    for did, k in assignment.items():
        if k is None:
            continue
        if k not in cache:
            cache[k] = downsample_mask(scene.instances[k].mask, mask_stride)
        out[did] = cache[k]
    return out
