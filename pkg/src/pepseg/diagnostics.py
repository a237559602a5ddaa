"""Training-set probes used by the convergence checks: key-pixel recall and the affinity gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .excavating import excavate_many, extract_key_pixels
from .inference import infer_descriptors
from .model import PEPModel
from .purifying import compute_affinity
from .supervision import assign_descriptors, build_center_targets
from .training import images_tensor, teacher_originals


@dataclass
class RecallStats:
    found: int
    total: int

    @property
    def recall(self) -> float:
        return self.found / self.total if self.total else float("nan")


@torch.no_grad()
def key_pixel_recall(model: PEPModel, scenes, cfg: RunConfig, tau_key: float | None = None,
                     tolerance: int = 1) -> RecallStats:
    """Share of neighbor centers (center-map positives) within ``tolerance`` cells of a key pixel.

    Center maps are excavated from teacher originals so the probe isolates the
    excavation head from the quality of the semantic maps.
    """
    if model.excavating is None:
        raise ValueError("model has no excavation head")
    mc, dc = cfg.model, cfg.data
    tau = mc.tau_key if tau_key is None else tau_key
    was = model.training
    model.eval()
    like = next(model.parameters())
    feats = model.features(images_tensor(list(scenes), like))
    found = total = 0
    for b, scene in enumerate(scenes):
        views, probs, fields, _ = feats.image(b)
        originals = teacher_originals(scene, probs, fields, dc.scale_ranges, mc.n_cap)
        if not originals:
            continue
        assignment = assign_descriptors(originals, scene, dc.center_fraction)
        maps = excavate_many(model.excavating, originals, views, mc.window_radius)
        for d, cm in zip(originals, maps):
            target = build_center_targets(d.stage, cm.window, scene, assignment[d.id],
                                          mc.exclude_source_center)
            keys = [k.location for k in extract_key_pixels(cm, tau, mc.k_max)]
            for r, c in zip(*np.nonzero(target)):
                r, c = r + cm.window.row0, c + cm.window.col0
                total += 1
                found += any(abs(r - kr) <= tolerance and abs(c - kc) <= tolerance for kr, kc in keys)
    model.train(was)
    return RecallStats(found, total)


@dataclass
class AffinityStats:
    intra: float
    inter: float
    intra_pairs: int
    inter_pairs: int

    @property
    def gap(self) -> float:
        return self.intra - self.inter


@torch.no_grad()
def affinity_gap(model: PEPModel, scenes, cfg: RunConfig) -> AffinityStats:
    """Mean off-diagonal affinity for same-instance pairs minus that for different-instance pairs.

    Uses the inference descriptor set; descriptors with no ground-truth owner are left out.
    """
    if model.purifying is None:
        raise ValueError("model has no purifying head")
    was = model.training
    model.eval()
    like = next(model.parameters())
    feats = model.features(images_tensor(list(scenes), like))
    intra, inter = [], []
    for b, scene in enumerate(scenes):
        trace = infer_descriptors(model, feats.image(b), cfg)
        descs = list(trace.descriptors)
        if len(descs) < 2:
            continue
        owner = assign_descriptors(descs, scene, cfg.data.center_fraction)
        M = compute_affinity(model.purifying, descs).values.cpu().numpy()
        for i, di in enumerate(descs):
            for j in range(i + 1, len(descs)):
                a, o = owner[di.id], owner[descs[j].id]
                if a is None or o is None:
                    continue
                (intra if a == o else inter).append(M[i, j])
    model.train(was)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return AffinityStats(mean(intra), mean(inter), len(intra), len(inter))
