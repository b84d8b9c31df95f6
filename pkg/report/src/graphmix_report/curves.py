"""Learning-curve figures from training run directories.

Consumes only the documented on-disk schema — ``eval_metrics.csv`` with
columns (env_steps, success_rate, mean_return, mean_len) and a
``manifest.jsonl`` whose first record carries the seed and resolved config —
so figures can be rendered anywhere the files are, with no trainer installed.

Curves follow the usual multi-seed presentation: a solid median line per
group with a shaded 25-75 percentile band across seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

EVAL_FILE = "eval_metrics.csv"
MANIFEST_FILE = "manifest.jsonl"
METRICS = ("success_rate", "mean_return")


class ReportError(ValueError):
    pass


@dataclass
class RunSeries:
    run_id: str
    seed: int
    env_name: str
    group_label: str
    env_steps: np.ndarray
    success_rate: np.ndarray
    mean_return: np.ndarray


def _config_value(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def load_run(run_dir, group_by: str | None = None) -> RunSeries:
    run_dir = Path(run_dir)
    eval_path = run_dir / EVAL_FILE
    if not eval_path.exists():
        raise ReportError(f"{run_dir}: missing {EVAL_FILE}")
    with open(eval_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ReportError(f"{run_dir}: {EVAL_FILE} has no evaluation rows")
    steps = np.array([int(r["env_steps"]) for r in rows])
    order = np.argsort(steps, kind="stable")

    seed, env_name, group_label = -1, "unknown", ""
    manifest_path = run_dir / MANIFEST_FILE
    if manifest_path.exists():
        first = json.loads(manifest_path.read_text().splitlines()[0])
        seed = int(first.get("seed", -1))
        config = first.get("config", {})
        env_name = _config_value(config, "env.name") or "unknown"
        if group_by:
            value = _config_value(config, group_by)
            group_label = f"{group_by}={value}"
    return RunSeries(
        run_id=run_dir.name,
        seed=seed,
        env_name=env_name,
        group_label=group_label,
        env_steps=steps[order],
        success_rate=np.array([float(r["success_rate"]) for r in rows])[order],
        mean_return=np.array([float(r["mean_return"]) for r in rows])[order],
    )


def load_runs(run_dirs, group_by: str | None = None) -> list[RunSeries]:
    """Load every run dir, warning about and skipping unreadable ones."""
    runs = []
    for d in run_dirs:
        try:
            runs.append(load_run(d, group_by))
        except ReportError as exc:
            warnings.warn(f"skipping run: {exc}")
    if not runs:
        raise ReportError("no readable runs")
    return runs


def percentile_band(values: np.ndarray, lo: float = 25.0, hi: float = 75.0):
    """Median and percentile band across the seed axis (axis 0), linear
    interpolation between order statistics."""
    med = np.percentile(values, 50.0, axis=0)
    return med, np.percentile(values, lo, axis=0), np.percentile(values, hi, axis=0)


def _common_grid(runs: list[RunSeries]) -> np.ndarray:
    grids = {tuple(r.env_steps.tolist()) for r in runs}
    if len(grids) != 1:
        detail = "; ".join(f"{r.run_id}: {len(r.env_steps)} points "
                           f"[{r.env_steps[0]}..{r.env_steps[-1]}]" for r in runs)
        raise ReportError(f"runs have mixed evaluation step grids: {detail}")
    return runs[0].env_steps


def summarize(runs: list[RunSeries]) -> list[dict]:
    """Final-step median per (environment, group), one table row each."""
    table = []
    for env_name in sorted({r.env_name for r in runs}):
        env_runs = [r for r in runs if r.env_name == env_name]
        for label in sorted({r.group_label for r in env_runs}):
            members = [r for r in env_runs if r.group_label == label]
            _common_grid(members)
            final_succ = np.array([r.success_rate[-1] for r in members])
            final_ret = np.array([r.mean_return[-1] for r in members])
            table.append({
                "env": env_name,
                "group": label or "(all)",
                "seeds": len(members),
                "final_median_success": float(np.percentile(final_succ, 50.0)),
                "final_median_return": float(np.percentile(final_ret, 50.0)),
            })
    return table


def format_table(table: list[dict]) -> str:
    header = f"{'env':<12} {'group':<28} {'seeds':>5} {'median success':>15} {'median return':>14}"
    lines = [header, "-" * len(header)]
    for row in table:
        lines.append(f"{row['env']:<12} {row['group']:<28} {row['seeds']:>5} "
                     f"{row['final_median_success']:>15.4f} "
                     f"{row['final_median_return']:>14.4f}")
    return "\n".join(lines)


def render_curves(run_dirs, group_by: str | None, out_path) -> list[dict]:
    """One panel per environment and metric; a median line plus 25-75 band
    per group. Writes the image and a plain-text summary table next to it.
    Returns the summary rows."""
    runs = load_runs(run_dirs, group_by)
    out_path = Path(out_path)
    env_names = sorted({r.env_name for r in runs})

    fig, axes = plt.subplots(len(env_names), len(METRICS),
                             figsize=(6 * len(METRICS), 4 * len(env_names)),
                             squeeze=False)
    for i, env_name in enumerate(env_names):
        env_runs = [r for r in runs if r.env_name == env_name]
        labels = sorted({r.group_label for r in env_runs})
        for j, metric in enumerate(METRICS):
            ax = axes[i][j]
            for label in labels:
                members = [r for r in env_runs if r.group_label == label]
                steps = _common_grid(members)
                stacked = np.stack([getattr(r, metric) for r in members])
                med, lo, hi = percentile_band(stacked)
                line, = ax.plot(steps, med, label=label or f"{len(members)} seeds")
                ax.fill_between(steps, lo, hi, alpha=0.25, color=line.get_color())
            ax.set_title(f"{env_name}: {metric}")
            ax.set_xlabel("env steps")
            ax.set_ylabel(metric)
            ax.legend()
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)

    table = summarize(runs)
    out_path.with_suffix(".txt").write_text(format_table(table) + "\n")
    return table


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="graphmix-report",
                                     description="Render learning-curve figures "
                                                 "from run directories")
    parser.add_argument("run_dirs", nargs="+")
    parser.add_argument("--group-by", default=None,
                        help="dotted config key for the legend, e.g. train.lambda_local")
    parser.add_argument("--out", required=True, help="output image path (.png/.svg/.pdf)")
    args = parser.parse_args(argv)
    try:
        table = render_curves(args.run_dirs, args.group_by, args.out)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_table(table))
    return 0


if __name__ == "__main__":
    sys.exit(main())
