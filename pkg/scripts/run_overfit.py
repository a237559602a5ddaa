#!/usr/bin/env python3
"""Overfit the fixed 8-image synthetic set for several seeds and report convergence.

Also probes each converged model for key-pixel recall and the affinity gap.
"""

import argparse
import json
import sys
from pathlib import Path

from pepseg.checkpoint import save_checkpoint
from pepseg.diagnostics import affinity_gap, key_pixel_recall
from pepseg.overfit import overfit_scenes, run_overfit


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--check-every", type=int, default=100)
    ap.add_argument("--out", help="save checkpoints and a summary JSON here")
    args = ap.parse_args()

    scenes = overfit_scenes()
    rows = []
    for seed in args.seeds:
        run = run_overfit(seed, scenes, args.max_steps, args.check_every,
                          log=lambda m: print(m, file=sys.stderr, flush=True))
        row = {"seed": seed, "steps": run.steps, "ap50": run.ap50, "ap": run.ap,
               "loss_ratio": run.loss_ratio, "seconds": run.seconds, "passed": run.passed}
        if run.passed:
            row["key_pixel_recall"] = key_pixel_recall(run.model, scenes, run.cfg).recall
            row["affinity_gap"] = affinity_gap(run.model, scenes, run.cfg).gap
        print(run.line(), {k: round(row[k], 3) for k in ("key_pixel_recall", "affinity_gap") if k in row},
              flush=True)
        if args.out:
            save_checkpoint(run.model, run.cfg, Path(args.out) / f"seed{seed}")
        rows.append(row)

    passed = sum(r["passed"] for r in rows)
    print(f"{passed}/{len(rows)} seeds converged")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "summary.json").write_text(json.dumps(rows, indent=2))
    return 0 if passed >= 0.8 * len(rows) else 1


if __name__ == "__main__":
    sys.exit(main())
