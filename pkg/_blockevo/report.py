"""
Human-readable summaries of run directories. Nothing in a run directory is written to.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from _blockevo.arch import BlockSpec
from _blockevo.pso import GenerationRecord, read_history_csv
from _blockevo.search import GridRow, read_grid_table_csv
from _blockevo.utils import UserError, read_json


@dataclass
class RunSummary:
    run_dir: Path
    block: Optional[BlockSpec]
    history: List[GenerationRecord]
    ledger: Dict
    grid: List[GridRow]

    @property
    def gating_rate(self) -> Optional[float]:
        if "gating_rate" in self.ledger:
            return self.ledger["gating_rate"]
        total = sum(
            r.evaluations_performed + r.evaluations_gated for r in self.history
        )
        return sum(r.evaluations_gated for r in self.history) / total if total else None

    @property
    def grid_argmax(self) -> Optional[GridRow]:
        feasible = [row for row in self.grid if row.feasible]
        if not feasible:
            return None
        return min(feasible, key=lambda row: (-row.accuracy, row.params, row.widen, row.deepen))


def load_run(run_dir: Path) -> RunSummary:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UserError(f"{run_dir} is not a run directory")

    block_path = run_dir / "block.json"
    history_path = run_dir / "evolution_history.csv"
    ledger_path = run_dir / "ledger.json"
    grid_path = run_dir / "grid_table.csv"
    if not (block_path.exists() or grid_path.exists()):
        raise UserError(f"{run_dir} holds neither block.json nor grid_table.csv")

    return RunSummary(
        run_dir=run_dir,
        block=BlockSpec.from_dict(read_json(block_path)) if block_path.exists() else None,
        history=read_history_csv(history_path) if history_path.exists() else [],
        ledger=read_json(ledger_path) if ledger_path.exists() else {},
        grid=read_grid_table_csv(grid_path) if grid_path.exists() else [],
    )


def _format_optional(value, fmt: str) -> str:
    return "-" if value is None else format(value, fmt)


def render_run(summary: RunSummary) -> str:
    lines = [f"run {summary.run_dir}"]
    if summary.block is not None:
        lines.append(f"  block           {list(summary.block.growth_rates)}")
    if "best_fitness" in summary.ledger:
        lines.append(f"  best fitness    {summary.ledger['best_fitness']:.4f}")
    if summary.history:
        lines.append(f"  gating rate     {_format_optional(summary.gating_rate, '.1%')}")
    if summary.ledger.get("surrogate_precision") is not None:
        lines.append(
            f"  gate precision  {summary.ledger['surrogate_precision']:.1%} "
            f"({summary.ledger['gate_confirmed']}/{summary.ledger['gate_passed']} passed candidates improved)"
        )
    if summary.ledger.get("wall_clock_seconds") is not None:
        lines.append(f"  wall clock      {summary.ledger['wall_clock_seconds']:.1f} s")

    if summary.history:
        lines.append("")
        lines.append(f"  {'generation':>10}  {'best fitness':>12}  {'full':>5}  {'gated':>5}")
        for record in summary.history:
            lines.append(
                f"  {record.generation:>10}  {record.global_best_fitness:>12.4f}  "
                f"{record.evaluations_performed:>5}  {record.evaluations_gated:>5}"
            )

    if summary.grid:
        lines.append("")
        lines.append(f"  {'widen':>5}  {'deepen':>6}  {'accuracy':>8}  {'params':>10}")
        for row in summary.grid:
            lines.append(
                f"  {row.widen:>5}  {row.deepen:>6}  {_format_optional(row.accuracy, '>8.4f'):>8}  "
                f"{_format_optional(row.params, '>10d'):>10}"
            )
        best = summary.grid_argmax
        if best is not None:
            lines.append(
                f"  grid argmax: widen={best.widen} deepen={best.deepen} "
                f"accuracy {best.accuracy:.4f} ({best.params} parameters)"
            )
    return "\n".join(lines) + "\n"


def aggregate(summaries: Sequence[RunSummary]) -> Dict[str, Dict[str, float]]:
    """Best and mean/std of the final target accuracy and parameter count over the runs that reached grid search."""
    bests = [s.grid_argmax for s in summaries if s.grid_argmax is not None]
    if not bests:
        return {}
    accuracy = np.array([row.accuracy for row in bests], dtype=np.float64)
    params = np.array([row.params for row in bests], dtype=np.float64)
    return {
        "accuracy": {"best": float(accuracy.max()), "mean": float(accuracy.mean()), "std": float(accuracy.std())},
        "params": {"best": float(params.min()), "mean": float(params.mean()), "std": float(params.std())},
        "runs": len(bests),
    }


def render_aggregate(stats: Dict) -> str:
    if not stats:
        return "no run reached grid search\n"
    acc, params = stats["accuracy"], stats["params"]
    return (
        f"over {stats['runs']} runs\n"
        f"  accuracy  best {acc['best']:.4f}  mean {acc['mean']:.4f} +- {acc['std']:.4f}\n"
        f"  params    best {params['best']:.0f}  mean {params['mean']:.0f} +- {params['std']:.0f}\n"
    )


def write_fitness_csv(summaries: Sequence[RunSummary], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run", "generation", "global_best_fitness", "evaluations_performed", "evaluations_gated"])
        for summary in summaries:
            for record in summary.history:
                writer.writerow(
                    [
                        summary.run_dir.name,
                        record.generation,
                        repr(record.global_best_fitness),
                        record.evaluations_performed,
                        record.evaluations_gated,
                    ]
                )


def report(run_dirs: Sequence[Path], csv_path: Optional[Path] = None) -> str:
    summaries = [load_run(d) for d in run_dirs]
    text = "\n".join(render_run(s) for s in summaries)
    if len(summaries) > 1:
        text += "\n" + render_aggregate(aggregate(summaries))
    if csv_path is not None:
        write_fitness_csv(summaries, csv_path)
    return text
