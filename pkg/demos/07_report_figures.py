"""Produce multi-seed learning-curve figures with the standalone report
package: run a few short training runs, then render median lines with
25-75 percentile bands grouped by the local-loss coefficient.

Requires the `graphmix-report` package (see report/ at the repo root).
"""

import dataclasses
import tempfile
from pathlib import Path

from graphmix.config import EnvConfig, IOConfig, ModelConfig, RunConfig, TrainConfig
from graphmix.trainer import run_training
from graphmix_report.curves import format_table, render_curves

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run_dirs = []
    for lam in (0.0, 1.0):
        for seed in range(3):
            cfg = RunConfig(
                env=EnvConfig(name="coopgrid"),
                model=ModelConfig(hidden_dim=32),
                train=TrainConfig(total_steps=6_000, eval_period=2_000,
                                  eval_episodes=8, lambda_local=lam),
                io=IOConfig())
            out = tmp / f"lam{int(lam)}_s{seed}"
            run_training(cfg, seed, out)
            run_dirs.append(out)
            print(f"finished lam={lam} seed={seed}")

    fig = Path("demo_curves.png")
    table = render_curves(run_dirs, "train.lambda_local", fig)
    print(f"\nwrote {fig} and {fig.with_suffix('.txt')}")
    print(format_table(table))
