"""Total objective, the training-time forward path, and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import STRIDES, RunConfig
from .excavating import (KeyPixel, classify_key_pixels, excavate_many, extract_key_pixels,
                         loss_excavating, loss_excavating_cls, mint_mined_descriptors)
from .losses import softmax_cross_entropy
from .masks import loss_mask, render_logits
from .model import PEPModel
from .perceiving import DescriptorSet, InstanceDescriptor, select_original_descriptors
from .purifying import build_affinity_target, compute_affinity, loss_purifying
from .supervision import (Scene, assign_descriptors, build_center_targets, build_mask_targets,
                          build_semantic_targets, center_cell, one_hot, routed_stages)

log = logging.getLogger(__name__)

TERMS = ("L_P", "L_E", "L_PE", "L_Matrix", "L_Mask")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        self.term, self.step = term, step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite value in {term}{where}")


@dataclass
class LossBreakdown:
    L_P: torch.Tensor
    L_E: torch.Tensor
    L_PE: torch.Tensor
    L_Matrix: torch.Tensor
    L_Mask: torch.Tensor
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    total: torch.Tensor | None = None

    def __post_init__(self):
        if self.total is None:
            self.total = self.recompute_total()

    def recompute_total(self) -> torch.Tensor:
        return (self.L_P + self.alpha * self.L_E + self.beta * self.L_PE
                + self.gamma * self.L_Matrix + self.delta * self.L_Mask)

    def terms(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in TERMS}

    def check_finite(self, step: int | None = None) -> None:
        for name, value in {**self.terms(), "total": self.total}.items():
            if not torch.isfinite(torch.as_tensor(value)).all():
                raise NonFiniteLossError(name, step)

    def as_floats(self) -> dict[str, float]:
        out = {name: float(v.detach()) for name, v in self.terms().items()}
        out["total"] = float(self.total.detach())
        return out


@dataclass
class ImageResult:
    originals: list[InstanceDescriptor]
    mined: list[InstanceDescriptor]
    descriptors: DescriptorSet
    assignment: dict[int, int | None]
    center_maps: list = field(default_factory=list)
    center_targets: list = field(default_factory=list)
    key_pixels: dict[int, list[KeyPixel]] = field(default_factory=dict)
    affinity: object = None
    mask_logits: torch.Tensor | None = None


@dataclass
class ForwardOutput:
    images: list[ImageResult]
    losses: LossBreakdown
    skipped: int = 0


def images_tensor(scenes: list[Scene], like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.image for s in scenes]), dtype=like.dtype, device=like.device)


def teacher_originals(scene: Scene, probs, fields, scale_ranges, n_cap: int) -> list[InstanceDescriptor]:
    """One descriptor per (instance, routed stage) at the instance's center cell."""
    cells, seen = [], set()
    for inst in scene.instances:
        for s in routed_stages(inst, scale_ranges):
            grid = tuple(fields[s - 1].shape[-2:])
            r, c = center_cell(inst, STRIDES[s - 1], grid)
            if (s, r, c) not in seen:
                seen.add((s, r, c))
                cells.append((s, r, c, inst.class_id))
    return [
        InstanceDescriptor(vector=fields[s - 1][:, r, c], stage=s, location=(r, c), class_id=cls,
                           confidence=float(probs[s - 1][cls, r, c].detach()), id=i)
        for i, (s, r, c, cls) in enumerate(cells[:n_cap])
    ]


def cap_mined(n_ori: int, mined: list[InstanceDescriptor], n_cap: int) -> list[InstanceDescriptor]:
    room = max(n_cap - n_ori, 0)
    if len(mined) <= room:
        return mined
    keep = sorted(mined, key=lambda d: (-d.score, d.id))[:room]
    keep_ids = {d.id for d in keep}
    return [d for d in mined if d.id in keep_ids]


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def image_losses(model: PEPModel, cfg: RunConfig, scene: Scene, views, logits, mode: str):
    """Per-image loss terms and intermediate results; ``views`` from Features.image(b)."""
    mc, dc, red = cfg.model, cfg.data, cfg.train.reduction
    feats, probs, fields, basis = views
    labels = build_semantic_targets(scene, dc.scale_ranges, dc.center_fraction)
    L_P = sum(
        softmax_cross_entropy(z, torch.as_tensor(one_hot(lab, mc.num_outputs), dtype=z.dtype), red)
        for z, lab in zip(logits, labels)
    )
    zero = _zero(L_P)
    if mode == "gt":
        originals = teacher_originals(scene, probs, fields, dc.scale_ranges, mc.n_cap)
    else:
        originals = list(select_original_descriptors(probs, fields, mc.tau_conf, mc.n_cap))
    result = ImageResult(originals, [], DescriptorSet(list(originals)), {})
    if not originals:
        return {"L_P": L_P, "L_E": zero, "L_PE": zero, "L_Matrix": zero, "L_Mask": zero}, result, True

    assignment = assign_descriptors(originals, scene, dc.center_fraction)
    L_E, L_PE = zero, zero
    mined: list[InstanceDescriptor] = []
    if model.excavating is not None:
        maps = excavate_many(model.excavating, originals, feats, mc.window_radius)
        targets = [build_center_targets(d.stage, cm.window, scene, assignment[d.id],
                                        mc.exclude_source_center)
                   for d, cm in zip(originals, maps)]
        L_E = loss_excavating(maps, targets, red)
        next_id = len(originals)
        for d, cm, t in zip(originals, maps, targets):
            if mode == "gt":
                pr = cm.probs.detach()
                keys = [KeyPixel((r + cm.window.row0, c + cm.window.col0), float(pr[r, c]), d.id)
                        for r, c in zip(*np.nonzero(t))]
                keys = sorted(keys, key=lambda k: (-k.score, k.location))[:mc.k_max]
            else:
                keys = extract_key_pixels(cm, mc.tau_key, mc.k_max)
            result.key_pixels[d.id] = keys
            grid = tuple(feats[d.stage - 1].shape[-2:])
            new = mint_mined_descriptors(model.excavating, d, keys, grid, first_id=next_id)
            next_id += len(new)
            mined += new
        mined = cap_mined(len(originals), mined, mc.n_cap)
        result.center_maps, result.center_targets = maps, targets
        if mined:
            assignment.update(assign_descriptors(mined, scene, dc.center_fraction))
            cls_logits = classify_key_pixels(model.excavating, mined)
            cls_target = torch.zeros_like(cls_logits)
            for i, d in enumerate(mined):
                k = assignment[d.id]
                cls_target[i, 0 if k is None else scene.instances[k].class_id] = 1.0
                if k is not None:
                    d.class_id = scene.instances[k].class_id
            L_PE = loss_excavating_cls(cls_logits, cls_target)

    descriptors = DescriptorSet(originals + mined)
    result.mined, result.descriptors, result.assignment = mined, descriptors, assignment

    L_Matrix = zero
    if model.purifying is not None:
        M = compute_affinity(model.purifying, descriptors)
        G = build_affinity_target([assignment[d.id] for d in descriptors])
        L_Matrix = loss_purifying(M, G, red)
        result.affinity = M

    mask_targets = build_mask_targets(assignment, scene, dc.mask_stride)
    supervised = [d for d in descriptors if d.id in mask_targets]
    L_Mask = zero
    if supervised:
        vecs = torch.stack([d.vector for d in supervised])
        mlog = render_logits(vecs, basis)
        tgt = torch.as_tensor(np.stack([mask_targets[d.id] for d in supervised]), dtype=mlog.dtype)
        L_Mask = loss_mask(mlog, tgt, red)
        result.mask_logits = mlog
    terms = {"L_P": L_P, "L_E": L_E, "L_PE": L_PE, "L_Matrix": L_Matrix, "L_Mask": L_Mask}
    return terms, result, False


def forward(model: PEPModel, scenes: list[Scene], cfg: RunConfig, mode: str = "gt") -> ForwardOutput:
    """Perceive -> select -> excavate -> mint -> affinity -> render, with all five losses.

    Per-image terms are averaged over the batch. Images with no selected
    descriptors contribute only L_P and are counted in ``skipped``.
    """
    if mode not in ("gt", "pred"):
        raise ValueError("mode must be 'gt' or 'pred'")
    like = next(model.parameters())
    feats = model.features(images_tensor(scenes, like))
    sums = {name: None for name in TERMS}
    results, skipped = [], 0
    for b, scene in enumerate(scenes):
        terms, res, skip = image_losses(model, cfg, scene, feats.image(b),
                                        [z[b] for z in feats.logits], mode)
        skipped += skip
        results.append(res)
        for name in TERMS:
            sums[name] = terms[name] if sums[name] is None else sums[name] + terms[name]
    n = len(scenes)
    t = cfg.train
    losses = LossBreakdown(**{name: sums[name] / n for name in TERMS},
                           alpha=t.alpha, beta=t.beta, gamma=t.gamma, delta=t.delta)
    losses.check_finite()
    return ForwardOutput(results, losses, skipped)


# --------------------------------------------------------------------------- optimization

def milestone_steps(total: int, fractions) -> list[int]:
    return [int(round(f * total)) for f in fractions]


def lr_at(step: int, total: int, base: float, fractions=(0.75, 0.92), factor: float = 0.1) -> float:
    """Step decay: multiply by ``factor`` at each milestone (fractions of ``total``)."""
    passed = sum(step >= m for m in milestone_steps(total, fractions))
    return base * factor ** passed


def make_optimizer(model: PEPModel, cfg: RunConfig) -> torch.optim.SGD:
    t = cfg.train
    return torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum,
                           weight_decay=t.weight_decay)


class NonFiniteGradientError(FloatingPointError):
    pass


def train_step(model, optimizer, scenes, cfg: RunConfig, mode: str, step: int = 0) -> ForwardOutput:
    optimizer.zero_grad(set_to_none=True)
    out = forward(model, scenes, cfg, mode)
    out.losses.check_finite(step)
    out.losses.total.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    if cfg.train.grad_clip is not None:
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    else:
        norm = torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])) if grads else 0.0
    if not math.isfinite(float(norm)):
        raise NonFiniteGradientError(f"non-finite gradient at step {step}")
    optimizer.step()
    return out


@dataclass
class TrainResult:
    model: PEPModel
    history: list[dict]
    steps: int
    skipped: int
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0


def build_model(cfg: RunConfig, seed: int | None = None) -> PEPModel:
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return PEPModel(cfg.model)


def train(cfg: RunConfig, scenes: list[Scene], out_dir: str | Path | None = None,
          model: PEPModel | None = None,
          should_stop: Callable[[int, PEPModel, list[dict]], bool] | None = None) -> TrainResult:
    """SGD with momentum and step decay; one log record per step.

    ``should_stop(step, model, history)`` is polled every ``train.eval_every``
    steps (when > 0) and ends training early when it returns True.
    """
    from .checkpoint import save_checkpoint

    t = cfg.train
    if model is None:
        model = build_model(cfg)
    model.train()
    rng = np.random.default_rng(t.seed)
    optimizer = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")
    steps_per_epoch = max(1, math.ceil(len(scenes) / t.batch_size))
    history, checkpoints, skipped = [], [], 0
    order = np.arange(len(scenes))
    started = time.perf_counter()
    step = 0
    try:
        for step in range(1, t.steps + 1):
            pos = (step - 1) % steps_per_epoch
            if pos == 0:
                order = rng.permutation(len(scenes))
            batch = [scenes[i] for i in order[pos * t.batch_size:(pos + 1) * t.batch_size]]
            if cfg.data.hflip:
                from .data import flip_scene
                batch = [flip_scene(s) if rng.random() < 0.5 else s for s in batch]
            if t.selection == "mixed":
                mode = "gt" if rng.random() < t.teacher_ratio else "pred"
            else:
                mode = t.selection
            lr = lr_at(step - 1, t.steps, t.lr, t.milestones, t.lr_factor)
            for group in optimizer.param_groups:
                group["lr"] = lr
            res = train_step(model, optimizer, batch, cfg, mode, step)
            skipped += res.skipped
            record = {"step": step, "lr": lr, "mode": mode, **res.losses.as_floats()}
            history.append(record)
            if log_file is not None and (step % t.log_every == 0 or step == 1):
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            epoch_end = step % steps_per_epoch == 0
            if out is not None and t.checkpoint_every and epoch_end \
                    and (step // steps_per_epoch) % t.checkpoint_every == 0:
                checkpoints.append(save_checkpoint(model, cfg, out / f"ckpt_step{step:06d}"))
            if should_stop is not None and t.eval_every and step % t.eval_every == 0:
                model.eval()
                stop = should_stop(step, model, history)
                model.train()
                if stop:
                    break
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        checkpoints.append(save_checkpoint(model, cfg, out / "checkpoint"))
    model.eval()
    return TrainResult(model, history, step, skipped, checkpoints, time.perf_counter() - started)
