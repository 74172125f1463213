"""Ablation matrix over wiring variant, embedding/head duplication, insertion
count and stage schedule, with trend verdicts over seed medians."""

from __future__ import annotations

import itertools
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace

from . import data as D
from .adaptor import Model, even_depths, init_adaptor
from .backbone import Backbone
from .evaluate import evaluate
from .trainer import TrainStageConfig, run_stage

log = logging.getLogger(__name__)

SCHEDULES = ("full", "skip-stage1", "skip-stage2")
METRICS = ("caption_loss", "caption_exact_match", "instruction_exact_match", "grounding_iou")


@dataclass(frozen=True)
class Cell:
    variant: str
    duplicate_io: bool
    n_insert: int
    schedule: str

    @property
    def key(self) -> str:
        return f"{self.variant}/{'dup' if self.duplicate_io else 'shared'}/N{self.n_insert}/{self.schedule}"


@dataclass
class CellResult:
    cell: Cell
    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)

    def median(self, metric: str) -> float:
        return statistics.median(m[metric] for m in self.per_seed.values())

    def row(self) -> dict:
        out = {"cell": self.cell.key, **asdict(self.cell), "seeds": sorted(self.per_seed)}
        for name in METRICS:
            vals = [m[name] for m in self.per_seed.values() if name in m]
            if vals:
                out[name] = statistics.median(vals)
        return out


def schedule_stages(stages: list[TrainStageConfig], schedule: str) -> list[TrainStageConfig]:
    if schedule == "full":
        return list(stages)
    drop = {"skip-stage1": "Stage1-PT", "skip-stage2": "Stage2-PT"}.get(schedule)
    if drop is None:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    return [s for s in stages if s.stage != drop]


def run_cell(
    backbone: Backbone,
    cell: Cell,
    stages: list[TrainStageConfig],
    data: dict[str, list[D.Sample]],
    eval_sets: dict[str, list[D.Sample]],
    seed: int,
) -> dict[str, float]:
    depths = even_depths(backbone.config.n_layers, cell.n_insert)
    stack = init_adaptor(backbone, depths, cell.variant, duplicate_io=cell.duplicate_io, seed=seed)
    model = Model(backbone, stack, {"cell": cell.key, "seed": seed})
    plan = schedule_stages(stages, cell.schedule)
    for cfg in plan:
        run_stage(model, replace(cfg, seed=seed), data, log_every=0)
    return evaluate(model, eval_sets)


def _order_holds(scores: dict, order: list, higher_is_better: bool) -> bool:
    vals = [scores[k] for k in order]
    pairs = zip(vals, vals[1:])
    return all(a >= b for a, b in pairs) if higher_is_better else all(a <= b for a, b in pairs)


@dataclass
class AblationReport:
    results: list[CellResult]
    verdicts: dict[str, dict]

    def rows(self) -> list[dict]:
        return [r.row() for r in self.results]

    def to_records(self) -> list[dict]:
        recs = []
        for r in self.results:
            for seed, metrics in sorted(r.per_seed.items()):
                for name, val in metrics.items():
                    recs.append({"stage": "ablation", "step": None, "lr": None, "loss": None, "split": "heldout", "metric_name": f"{r.cell.key}:{name}", "value": val, "seed": seed})
        return recs

    def table(self) -> str:
        head = f"{'cell':<24}" + "".join(f"{m:>26}" for m in METRICS)
        lines = [head]
        for row in self.rows():
            lines.append(f"{row['cell']:<24}" + "".join(f"{row.get(m, float('nan')):>26.4f}" for m in METRICS))
        for name, v in self.verdicts.items():
            lines.append(f"trend {name}: {'holds' if v['holds'] else 'reversed'} ({v['scores']})")
        return "\n".join(lines)


def trend_verdicts(results: list[CellResult], metric: str = "caption_loss") -> dict[str, dict]:
    """Marginal medians per axis value and whether the expected ordering holds.

    ``metric`` is read as lower-is-better when it ends with ``_loss``.
    """
    higher = not metric.endswith("_loss")

    def marginal(attr, values):
        out = {}
        for v in values:
            vals = [r.median(metric) for r in results if getattr(r.cell, attr) == v]
            if vals:
                out[v] = statistics.median(vals)
        return out

    verdicts = {}
    variants = marginal("variant", ["C", "B", "A"])
    if len(variants) > 1:
        order = [v for v in ["C", "B", "A"] if v in variants]
        verdicts["variant C>=B>=A"] = {"metric": metric, "scores": variants, "holds": _order_holds(variants, order, higher)}
    dup = marginal("duplicate_io", [True, False])
    if len(dup) == 2:
        verdicts["duplication on>=off"] = {"metric": metric, "scores": {"on": dup[True], "off": dup[False]}, "holds": _order_holds(dup, [True, False], higher)}
    sched = marginal("schedule", list(SCHEDULES))
    for skipped in ("skip-stage1", "skip-stage2"):
        if "full" in sched and skipped in sched:
            pair = {"full": sched["full"], skipped: sched[skipped]}
            verdicts[f"full>={skipped}"] = {"metric": metric, "scores": pair, "holds": _order_holds(pair, ["full", skipped], higher)}
    return verdicts


def run_ablation_matrix(
    backbone: Backbone,
    stages: list[TrainStageConfig],
    data: dict[str, list[D.Sample]],
    eval_sets: dict[str, list[D.Sample]],
    variants=("A", "B", "C"),
    duplicate_io=(True, False),
    n_insert=(1, 2, 4),
    schedules=SCHEDULES,
    seeds=(0, 1, 2),
    metric: str = "caption_loss",
    on_cell=None,
) -> AblationReport:
    """Run every cell of the cartesian product for each seed; seeds are shared by all cells."""
    for n in n_insert:
        if not 1 <= n <= backbone.config.n_layers:
            raise ValueError(f"N={n} outside [1, {backbone.config.n_layers}]")
    results = []
    for variant, dup, n, sched in itertools.product(variants, duplicate_io, n_insert, schedules):
        cell = Cell(variant, dup, n, sched)
        res = CellResult(cell)
        for seed in seeds:
            res.per_seed[seed] = run_cell(backbone, cell, stages, data, eval_sets, seed)
        log.info("ablation %s: %s", cell.key, res.row())
        if on_cell is not None:
            on_cell(res)
        results.append(res)
    return AblationReport(results, trend_verdicts(results, metric))
