from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .evaluation import Detection
from .excavating import classify_key_pixels, excavate_many, extract_key_pixels, mint_mined_descriptors
from .masks import render_logits
from .model import PEPModel
from .perceiving import DescriptorSet, select_original_descriptors
from .purifying import PurifiedSet, compute_affinity, mask_nms, purify
from .training import cap_mined


@dataclass
class InferenceTrace:
    descriptors: DescriptorSet
    affinity: object = None
    groups: PurifiedSet | None = None
    center_maps: list = field(default_factory=list)


def _upsample(probs: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(probs[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


@torch.no_grad()
def infer_descriptors(model: PEPModel, feats_views, cfg: RunConfig) -> InferenceTrace:
    mc = cfg.model
    feats, probs, fields, _ = feats_views
    originals = list(select_original_descriptors(probs, fields, mc.tau_conf, mc.n_cap))
    trace = InferenceTrace(DescriptorSet(list(originals)))
    if not originals or model.excavating is None:
        return trace
    maps = excavate_many(model.excavating, originals, feats, mc.window_radius)
    trace.center_maps = maps
    mined, next_id = [], len(originals)
    for d, cm in zip(originals, maps):
        keys = extract_key_pixels(cm, mc.tau_key, mc.k_max)
        grid = tuple(feats[d.stage - 1].shape[-2:])
        new = mint_mined_descriptors(model.excavating, d, keys, grid, first_id=next_id)
        next_id += len(new)
        mined += new
    if mined:
        cls_probs = torch.softmax(classify_key_pixels(model.excavating, mined), dim=1)
        kept = []
        for d, p in zip(mined, cls_probs):
            # key pixels the classifier calls background are discarded
            if int(p.argmax()) == 0:
                continue
            fg = p[1:]
            d.class_id = int(fg.argmax()) + 1
            d.confidence = float(fg.max())
            d.score = d.confidence
            kept.append(d)
        mined = cap_mined(len(originals), kept, mc.n_cap)
    trace.descriptors = DescriptorSet(originals + mined)
    return trace


@torch.no_grad()
def infer_scene_views(model: PEPModel, views, cfg: RunConfig, image_size, image_id=0):
    ic = cfg.infer
    trace = infer_descriptors(model, views, cfg)
    descs = trace.descriptors
    if len(descs) == 0:
        return [], trace
    basis = views[3]
    probs = torch.sigmoid(render_logits(descs.vectors(), basis))
    full = _upsample(probs, image_size)
    binary = (full >= ic.mask_threshold).cpu().numpy()
    items = list(descs)
    index = {d.id: i for i, d in enumerate(items)}
    detections = []
    if model.purifying is not None:
        M = compute_affinity(model.purifying, descs)
        groups = purify(M, descs, ic.tau_merge)
        trace.affinity, trace.groups = M, groups
        for members, rep in zip(groups.groups, groups.representatives):
            rep_d = items[index[rep]]
            if ic.merge_masks == "mean":
                mask = (full[[index[m] for m in members]].mean(0) >= ic.mask_threshold).cpu().numpy()
            else:
                mask = binary[index[rep]]
            score = max(items[index[m]].confidence for m in members)
            if mask.any():
                detections.append(Detection(image_id, rep_d.class_id, mask, float(score)))
    else:
        scores = [d.confidence for d in items]
        classes = [d.class_id for d in items]
        for i in mask_nms(binary, scores, classes, ic.nms_iou):
            if binary[i].any():
                detections.append(Detection(image_id, classes[i], binary[i], float(scores[i])))
    return detections, trace


@torch.no_grad()
def infer(model: PEPModel, image, cfg: RunConfig, image_id=0):
    """Detections for one image ([3, H, W] or [1, H, W] array in [0, 1])."""
    was_training = model.training
    model.eval()
    like = next(model.parameters())
    x = torch.as_tensor(np.asarray(image), dtype=like.dtype)
    if x.dim() == 2:
        x = x[None]
    feats = model.features(x[None])
    dets, _ = infer_scene_views(model, feats.image(0), cfg, tuple(x.shape[-2:]), image_id)
    model.train(was_training)
    return dets


@torch.no_grad()
def infer_scenes(model: PEPModel, scenes, cfg: RunConfig, batch_size: int = 8, traces=None):
    """Detections for a list of scenes, batched through the backbone."""
    was_training = model.training
    model.eval()
    like = next(model.parameters())
    detections = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        x = torch.as_tensor(np.stack([s.image for s in chunk]), dtype=like.dtype)
        feats = model.features(x)
        for b, scene in enumerate(chunk):
            dets, trace = infer_scene_views(model, feats.image(b), cfg, scene.size, scene.image_id)
            detections += dets
            if traces is not None:
                traces.append(trace)
    model.train(was_training)
    return detections
