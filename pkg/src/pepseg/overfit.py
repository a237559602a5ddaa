"""The fixed-set overfit protocol shared by the experiment scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import SynthSpec, generate_dataset
from .evaluation import evaluate
from .inference import infer_scenes
from .model import PEPModel
from .training import train

TRAIL = 10  # steps averaged when comparing the loss against its step-10 value


def overfit_scenes(seed: int = 0, n: int = 8):
    return generate_dataset(n, SynthSpec(image_size=64, num_instances=(2, 5),
                                         overlap_bias=0.7, seed=seed))


def overfit_config(seed: int, max_steps: int = 2000, check_every: int = 100) -> RunConfig:
    cfg = RunConfig()
    train_cfg = dataclasses.replace(cfg.train, steps=max_steps, seed=seed, eval_every=check_every)
    return dataclasses.replace(cfg, train=train_cfg)


@dataclass
class OverfitRun:
    seed: int
    steps: int
    ap50: float
    ap: float
    loss_step10: float
    loss_final: float
    seconds: float
    model: PEPModel
    cfg: RunConfig

    @property
    def loss_ratio(self) -> float:
        return self.loss_final / self.loss_step10

    @property
    def passed(self) -> bool:
        return self.ap50 >= 0.7 and self.loss_ratio <= 0.15

    def line(self) -> str:
        return (f"seed={self.seed} steps={self.steps} AP50={self.ap50:.3f} AP={self.ap:.3f} "
                f"loss_ratio={self.loss_ratio:.3f} time={self.seconds:.0f}s "
                f"{'PASS' if self.passed else 'FAIL'}")


def _trailing(history) -> float:
    return float(np.mean([h["total"] for h in history[-TRAIL:]]))


def run_overfit(seed: int, scenes=None, max_steps: int = 2000, check_every: int = 100,
                stop_early: bool = True, log=None) -> OverfitRun:
    """Train on the fixed set; stop at the first check where both targets are met."""
    scenes = overfit_scenes() if scenes is None else scenes
    cfg = overfit_config(seed, max_steps, check_every)
    state = {"ap50": 0.0, "ap": 0.0}

    def check(step, model, history):
        report = evaluate(infer_scenes(model, scenes, cfg), scenes, cfg.model.num_classes)
        state["ap50"], state["ap"] = report.AP50, report.AP
        ratio = _trailing(history) / history[min(TRAIL, len(history)) - 1]["total"]
        if log:
            log(f"seed {seed} step {step}: AP50 {report.AP50:.3f} loss ratio {ratio:.3f}")
        return stop_early and report.AP50 >= 0.7 and ratio <= 0.15

    started = time.perf_counter()
    result = train(cfg, scenes, should_stop=check)
    if result.steps % check_every:
        check(result.steps, result.model, result.history)
    hist = result.history
    return OverfitRun(seed, result.steps, state["ap50"], state["ap"],
                      hist[min(TRAIL, len(hist)) - 1]["total"], _trailing(hist),
                      time.perf_counter() - started, result.model, cfg)
