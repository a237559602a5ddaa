"""Central finite-difference check of each loss term on a micro scene, in float64.

Every term is evaluated end to end through :func:`pepseg.training.forward` with
teacher-forced descriptors, so the discrete steps (selection, key pixels) stay
fixed while parameters move by ``h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, RunConfig
from .model import PEPModel
from .supervision import Instance, Scene
from .training import TERMS, forward


class _NegatedGradient(torch.autograd.Function):
    """Identity forward, sign-flipped backward; used as a negative control."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


@dataclass
class TermCheck:
    term: str
    rel_error: float
    coords: int
    value: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.term:<9} rel_err={self.rel_error:.3e} coords={self.coords} {status}"


@dataclass
class GradcheckReport:
    checks: list[TermCheck] = field(default_factory=list)
    tolerance: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [c.line() for c in self.checks]
        n = sum(c.passed for c in self.checks)
        lines.append(f"{n}/{len(self.checks)} terms pass at {self.tolerance:g}")
        return "\n".join(lines)


def micro_config() -> RunConfig:
    model = ModelConfig(encoder_widths=(4, 4, 4, 4, 4), feat_channels=4, head_channels=4,
                        head_layers=1, descriptor_dim=4, excavate_hidden=4)
    return RunConfig(model=model)


def micro_scene(seed: int = 0) -> Scene:
    """32x32 scene with three small, partly overlapping squares routed to stage 1."""
    rng = np.random.default_rng(seed)
    size = 32
    image = rng.uniform(0.0, 0.2, size=(3, size, size)).astype(np.float32)
    boxes = [(4, 4, 11, 11, 1), (7, 9, 14, 16, 2), (18, 17, 25, 24, 3)]
    masks = []
    for r0, c0, r1, c1, cls in boxes:
        m = np.zeros((size, size), dtype=bool)
        m[r0:r1, c0:c1] = True
        for other in masks:
            other &= ~m
        masks.append(m)
        image[cls - 1, r0:r1, c0:c1] = 0.9
    instances = [Instance(cls, m) for (*_, cls), m in zip(boxes, masks)]
    return Scene(image, instances, image_id="micro")


def _term_value(model, scenes, cfg, term: str, sabotage: str | None) -> torch.Tensor:
    out = forward(model, scenes, cfg, mode="gt")
    value = getattr(out.losses, term)
    if term == sabotage:
        value = _NegatedGradient.apply(value)
    return value


def _select(params, grads, k: int, rng: np.random.Generator):
    """Indices (param index, flat index): the largest analytic entries plus random ones."""
    flat = torch.cat([g.reshape(-1) for g in grads])
    offsets = np.cumsum([0] + [p.numel() for p in params])
    top = torch.topk(flat.abs(), min(k // 2, flat.numel())).indices.tolist()
    rest = rng.choice(flat.numel(), size=min(k - len(top), flat.numel()), replace=False).tolist()
    chosen = sorted(set(top) | set(rest))
    out = []
    for g in chosen:
        p = int(np.searchsorted(offsets, g, side="right") - 1)
        out.append((p, g - int(offsets[p])))
    return out


def check_term(model: PEPModel, scenes, cfg: RunConfig, term: str, *, h: float = 1e-6,
               coords: int = 24, tol: float = 1e-4, seed: int = 0,
               sabotage: str | None = None) -> TermCheck:
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    value = _term_value(model, scenes, cfg, term, sabotage)
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    picked = _select(params, grads, coords, np.random.default_rng(seed))
    analytic, numeric = [], []
    with torch.no_grad():
        for pi, fi in picked:
            flat = params[pi].view(-1)
            orig = flat[fi].item()
            flat[fi] = orig + h
            up = _term_value(model, scenes, cfg, term, None).item()
            flat[fi] = orig - h
            down = _term_value(model, scenes, cfg, term, None).item()
            flat[fi] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[pi].reshape(-1)[fi].item())
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    err = 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)
    # a term whose gradient vanishes everywhere would pass vacuously; treat that as a failure
    passed = err <= tol and scale > 0.0
    return TermCheck(term, err, len(picked), float(value.detach()), passed)


def run_gradcheck(seed: int = 0, tol: float = 1e-4, coords: int = 24,
                  sabotage: str | None = None, terms=TERMS) -> GradcheckReport:
    if sabotage is not None and sabotage not in TERMS:
        raise ValueError(f"unknown loss term {sabotage!r}; expected one of {TERMS}")
    started = time.perf_counter()
    cfg = micro_config()
    torch.manual_seed(seed)
    model = PEPModel(cfg.model).double()
    model.train()
    scenes = [micro_scene(seed)]
    report = GradcheckReport(tolerance=tol)
    for i, term in enumerate(terms):
        report.checks.append(check_term(model, scenes, cfg, term, coords=coords, tol=tol,
                                        seed=seed + i, sabotage=sabotage))
    report.seconds = time.perf_counter() - started
    return report
