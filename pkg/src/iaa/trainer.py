"""Staged training: per-stage trainable sets, AdamW + cosine schedule, pipelines."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .adaptor import Model
from .backbone import heldout_text_loss, text_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import evaluate, mm_loss
from .optim import NonFiniteGradientError, OptimizerState, adamw_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

STAGES = ("Stage1-PT", "Stage2-PT", "Instruction-FT", "Grounding-FT", "Unfrozen-Baseline")
INNER = ("projector", "inner_adaptor")
STAGE_MODULES = {
    "Stage1-PT": ("projector",),
    "Stage2-PT": INNER,
    "Instruction-FT": INNER,
    "Grounding-FT": INNER,
    "Unfrozen-Baseline": INNER + ("backbone",),
}

# Hyperparameters of the full-scale schedule, kept for reference and reporting.
PAPER_SCHEDULE = {
    "Stage1-PT": {"learning_rate": 1e-3, "batch_size": 256, "steps": 2500},
    "Stage2-PT": {"learning_rate": 2e-5, "batch_size": 256, "steps": 2500},
    "Instruction-FT": {"learning_rate": 2e-5, "batch_size": 128, "steps": 6600},
    "Grounding-FT": {"learning_rate": 2e-5, "batch_size": 128, "steps": 18000},
}


class StageOverflowError(FloatingPointError):
    pass


@dataclass
class TrainStageConfig:
    stage: str
    learning_rate: float
    steps: int
    batch_size: int = 32
    datasets: tuple[str, ...] = ("caption",)
    trainable_modules: tuple[str, ...] | None = None
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    grad_clip: float | None = None
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.trainable_modules is None:
            self.trainable_modules = STAGE_MODULES[self.stage]
        self.trainable_modules = tuple(self.trainable_modules)
        self.datasets = tuple(self.datasets)
        self.betas = tuple(self.betas)
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainStageConfig, step: int) -> float:
    return cosine_lr(config.learning_rate, config.steps, config.warmup_ratio, step)


def default_stages(
    seed: int = 0,
    steps: tuple[int, int, int, int] = (500, 500, 1000, 1500),
    lrs: tuple[float, float, float, float] = (1e-3, 1e-3, 5e-4, 3e-4),
    batch_size: int = 32,
) -> list[TrainStageConfig]:
    names = ("Stage1-PT", "Stage2-PT", "Instruction-FT", "Grounding-FT")
    data = (("caption",), ("caption",), ("instruction", "caption"), ("grounding",))
    return [
        TrainStageConfig(name, lr, n, batch_size, ds, seed=seed)
        for name, lr, n, ds in zip(names, lrs, steps, data)
    ]


def unfrozen_baseline_stages(stages: list[TrainStageConfig]) -> list[TrainStageConfig]:
    """Replace every adaptor-training stage with one that also trains the backbone."""
    out = []
    for cfg in stages:
        if cfg.stage == "Stage1-PT":
            out.append(cfg)
        else:
            out.append(replace(cfg, stage="Unfrozen-Baseline", trainable_modules=STAGE_MODULES["Unfrozen-Baseline"], grad_clip=1.0))
    return out


def tensor_digests(model: Model) -> dict[str, str]:
    return {n: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest() for n, t in model.named_parameters()}


@dataclass
class StageReport:
    stage: str
    seed: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    trainable: list[str] = field(default_factory=list)
    changed: list[str] = field(default_factory=list)
    checkpoint: str | None = None

    def to_records(self) -> list[dict]:
        recs = [
            {"stage": self.stage, "step": i, "lr": lr, "loss": loss, "split": "train", "metric_name": "loss", "value": loss, "seed": self.seed}
            for i, (lr, loss) in enumerate(zip(self.lrs, self.losses))
        ]
        for name, val in self.metrics.items():
            recs.append({"stage": self.stage, "step": len(self.losses), "lr": None, "loss": None, "split": "heldout", "metric_name": name, "value": val, "seed": self.seed})
        return recs


def _batches(pool: list[D.Sample], batch_size: int, rng: np.random.Generator):
    order, cursor = rng.permutation(len(pool)), 0
    while True:
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(pool)), 0
        yield [pool[j] for j in order[cursor : cursor + batch_size]]
        cursor += batch_size


def run_stage(
    model: Model,
    config: TrainStageConfig,
    data: dict[str, list[D.Sample]],
    eval_sets: dict[str, list[D.Sample]] | None = None,
    log_every: int = 100,
) -> StageReport:
    """Minimize the masked response loss, touching only ``config.trainable_modules``."""
    if model.adaptor is None:
        raise ValueError("run_stage needs a model with an adaptor stack")
    pool = [s for name in config.datasets for s in data[name]]
    if not pool:
        raise ValueError(f"{config.stage}: no training samples in {config.datasets}")
    before = tensor_digests(model)
    params = model.set_trainable_modules(config.trainable_modules)
    report = StageReport(config.stage, config.seed, trainable=[n for n, _ in params])
    state = OptimizerState()
    rng = np.random.default_rng([config.seed, STAGES.index(config.stage), len(pool)])
    batches = _batches(pool, config.batch_size, rng)
    for step in range(config.steps):
        model.zero_grad()
        loss = mm_loss(model, next(batches))
        val = float(loss.data)
        lr = lr_at(config, step)
        try:
            if not math.isfinite(val):
                raise NonFiniteGradientError(f"loss is {val}")
            loss.backward()
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            adamw_step(params, state, lr, config.betas, config.eps, config.weight_decay)
        except NonFiniteGradientError as exc:
            model.set_trainable_modules(())
            raise StageOverflowError(
                f"{config.stage}: numeric overflow at step {step}, lr={lr:.3g} ({exc}). Jointly training "
                "the projector and insertion layers at a high learning rate is prone to overflow; "
                "align the projector alone first or lower this stage's learning rate."
            ) from exc
        report.losses.append(val)
        report.lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.4f lr %.2e", config.stage, step, val, lr)
    model.set_trainable_modules(())
    after = tensor_digests(model)
    report.changed = sorted(n for n in after if after[n] != before[n])
    stray = set(report.changed) - set(report.trainable)
    if stray:
        raise RuntimeError(f"{config.stage}: frozen tensors changed: {sorted(stray)}")
    if eval_sets:
        report.metrics = evaluate(model, eval_sets)
    return report


# -- pipelines --------------------------------------------------------------


def greedy_text(model: Model, prompt, n: int) -> list[int]:
    """Full-recompute greedy continuation through the text workflow."""
    toks = list(prompt)
    with T.no_grad():
        for _ in range(n):
            toks.append(int(text_forward(model.backbone, toks).data[-1].argmax()))
    return toks[len(prompt) :]


@dataclass
class PipelineReport:
    stages: list[StageReport] = field(default_factory=list)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""
    text_loss_before: float = float("nan")
    text_loss_after: float = float("nan")
    probe_before: list[list[int]] = field(default_factory=list)
    probe_after: list[list[int]] = field(default_factory=list)

    @property
    def text_loss_delta(self) -> float:
        return self.text_loss_after - self.text_loss_before

    @property
    def preserved(self) -> bool:
        return (
            self.backbone_hash_before == self.backbone_hash_after
            and self.text_loss_before == self.text_loss_after
            and self.probe_before == self.probe_after
        )

    def verdict(self) -> dict:
        return {
            "backbone_hash_before": self.backbone_hash_before,
            "backbone_hash_after": self.backbone_hash_after,
            "hash_unchanged": self.backbone_hash_before == self.backbone_hash_after,
            "text_loss_before": self.text_loss_before,
            "text_loss_after": self.text_loss_after,
            "text_loss_delta": self.text_loss_delta,
            "greedy_outputs_identical": self.probe_before == self.probe_after,
            "nlp_preserved": self.preserved,
        }

    def to_records(self) -> list[dict]:
        recs = [r for s in self.stages for r in s.to_records()]
        seed = self.stages[0].seed if self.stages else None
        for name, val in (("text_loss_before", self.text_loss_before), ("text_loss_after", self.text_loss_after), ("text_loss_delta", self.text_loss_delta)):
            recs.append({"stage": "pipeline", "step": None, "lr": None, "loss": None, "split": "heldout", "metric_name": name, "value": val, "seed": seed})
        return recs


def run_pipeline(
    model: Model,
    stages: list[TrainStageConfig],
    data: dict[str, list[D.Sample]],
    eval_sets: dict[str, list[D.Sample]] | None = None,
    text_heldout: list[D.Sample] | None = None,
    probe_prompts: list[list[int]] | None = None,
    probe_tokens: int = 16,
    checkpoint_dir=None,
    log_every: int = 100,
) -> tuple[Model, PipelineReport]:
    """Run stages in order, chaining through checkpoint files when a directory is given."""
    report = PipelineReport()
    report.backbone_hash_before = model.backbone.sha256()
    model.meta = {**(model.meta or {}), "backbone_sha256": report.backbone_hash_before}
    if text_heldout:
        report.text_loss_before = heldout_text_loss(model.backbone, text_heldout)
    probes = probe_prompts or []
    report.probe_before = [greedy_text(model, p, probe_tokens) for p in probes]
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for i, cfg in enumerate(stages):
        stage_report = run_stage(model, cfg, data, eval_sets, log_every=log_every)
        if ckdir is not None:
            path = ckdir / f"{i + 1:02d}-{cfg.stage}.ckpt"
            meta = dict(model.meta or {})
            meta.update({"stage": cfg.stage, "seed": cfg.seed, "step": cfg.steps})
            save_checkpoint(model, path, meta)
            model = load_checkpoint(path)
            stage_report.checkpoint = str(path)
        report.stages.append(stage_report)
        log.info("%s done: %s", cfg.stage, stage_report.metrics)
    report.backbone_hash_after = model.backbone.sha256()
    if text_heldout:
        report.text_loss_after = heldout_text_loss(model.backbone, text_heldout)
    report.probe_after = [greedy_text(model, p, probe_tokens) for p in probes]
    return model, report
