"""Four-way mechanism ablation from a single config: each variant toggles excavating and purifying."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .inference import infer_scenes
from .training import TrainResult, train

VARIANTS = (
    ("Baseline", False, False),
    ("Baseline + excavating", True, False),
    ("Baseline + purifying", False, True),
    ("PEP", True, True),
)
COLUMNS = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


def variant_config(cfg: RunConfig, excavating: bool, purifying: bool) -> RunConfig:
    model = dataclasses.replace(cfg.model, enable_excavating=excavating,
                                enable_purifying=purifying)
    return dataclasses.replace(cfg, model=model)


@dataclass
class AblationRow:
    name: str
    report: EvalReport
    result: TrainResult
    cfg: RunConfig


def run_ablation(cfg: RunConfig, train_scenes, eval_scenes=None, log=None) -> list[AblationRow]:
    eval_scenes = train_scenes if eval_scenes is None else eval_scenes
    rows = []
    for name, exc, pur in VARIANTS:
        vcfg = variant_config(cfg, exc, pur)
        if log:
            log(f"training {name}")
        result = train(vcfg, train_scenes)
        dets = infer_scenes(result.model, eval_scenes, vcfg)
        report = evaluate(dets, eval_scenes, vcfg.model.num_classes,
                          vcfg.eval.area_scaling, vcfg.eval.max_dets)
        rows.append(AblationRow(name, report, result, vcfg))
    return rows


def format_table(rows) -> str:
    width = max(len(r.name) for r in rows)
    head = f"{'Method':<{width}}  " + "  ".join(f"{c:>6}" for c in COLUMNS)

    def cell(v):
        return f"{'n/a':>6}" if v is None else f"{100 * v:6.1f}"

    lines = [head, "-" * len(head)]
    for r in rows:
        vals = r.report.as_dict()
        lines.append(f"{r.name:<{width}}  " + "  ".join(cell(vals[c]) for c in COLUMNS))
    return "\n".join(lines)
