"""Dual-workflow inference: request routing, cached greedy decoding, latency bench."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .accounting import flops_report
from .adaptor import AdaptorStack, Model, mm_forward
from .backbone import SequenceOverflowError, text_forward
from .cache import KVCache
from .data import GridImage

MODES = ("text", "multimodal")

TEXT_COMPONENTS = ("text_embedding", "backbone_layers", "final_norm", "text_head")
ADAPTOR_COMPONENTS = frozenset(
    {"image_encoder", "projector", "mm_embedding", "insertion_layers", "mm_head", "gates"}
)

# Measured per-request latency of the full-scale model with and without its
# eight insertion layers on a 32-layer backbone.
REFERENCE_LATENCY = {"n_layers": 32, "n_insert": 8, "text_s": 0.103, "multimodal_s": 0.124}


class RequestError(ValueError):
    pass


@dataclass
class WorkflowRequest:
    mode: str
    prompt: list[int]
    image: GridImage | None = None
    max_new_tokens: int = 16

    def validate(self):
        if self.mode not in MODES:
            raise RequestError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.prompt) == 0:
            raise RequestError("prompt must be non-empty")
        if self.max_new_tokens < 0:
            raise RequestError("max_new_tokens must be >= 0")
        if self.mode == "multimodal" and not isinstance(self.image, GridImage):
            raise RequestError("a multimodal request needs exactly one image")
        if self.mode == "text" and self.image is not None:
            raise RequestError("a text-only request must not carry an image")


@dataclass(frozen=True)
class WorkflowPlan:
    mode: str
    components: tuple[str, ...]


def route(request: WorkflowRequest, model: Model | None = None) -> WorkflowPlan:
    """Name the components a request will touch, validating it first."""
    request.validate()
    if request.mode == "text":
        return WorkflowPlan("text", TEXT_COMPONENTS)
    dup = model is None or model.adaptor is None or model.adaptor.duplicate_io
    parts = ["image_encoder", "projector", "mm_embedding" if dup else "text_embedding", "backbone_layers", "insertion_layers"]
    if model is not None and model.adaptor is not None and model.adaptor.variant != "C":
        parts.append("gates")
    parts += ["final_norm", "mm_head" if dup else "text_head"]
    return WorkflowPlan("multimodal", tuple(parts))


@dataclass
class Generation:
    tokens: list[int]
    prompt_logits: np.ndarray
    step_logits: list[np.ndarray] = field(default_factory=list)


def _positions_needed(model: Model, request: WorkflowRequest) -> int:
    n = len(request.prompt) + request.max_new_tokens
    if request.mode == "multimodal":
        s = model.adaptor.encoder.patch_size
        n += (request.image.height // s) * (request.image.width // s)
    return n


def generate(
    model: Model,
    request: WorkflowRequest,
    use_cache: bool = True,
    stop_token: int | None = None,
) -> Generation:
    """Greedy decoding for one request.

    With ``use_cache`` the prompt is run once to fill a private KV cache and
    each step feeds a single token; otherwise every step recomputes the whole
    sequence. ``step_logits[i]`` are the logits that chose ``tokens[i]``.
    """
    plan = route(request, model)
    if plan.mode == "multimodal" and model.adaptor is None:
        raise RequestError("model has no adaptor stack for multimodal requests")
    need = _positions_needed(model, request)
    limit = model.backbone.config.max_seq_len
    if need > limit:
        raise SequenceOverflowError(f"request needs {need} positions, limit is {limit}")
    multimodal = plan.mode == "multimodal"
    prompt = list(request.prompt)

    def full(ids, cache=None):
        if multimodal:
            return mm_forward(model.backbone, model.adaptor, request.image, ids, cache).data
        return text_forward(model.backbone, ids, cache).data

    with T.no_grad():
        cache = KVCache() if use_cache else None
        prompt_logits = full(prompt, cache)
        gen = Generation([], prompt_logits)
        last = prompt_logits[-1]
        n_insert = len(model.adaptor.insertions) if multimodal else 0
        for _ in range(request.max_new_tokens):
            tok = int(last.argmax())
            gen.tokens.append(tok)
            gen.step_logits.append(last)
            if stop_token is not None and tok == stop_token:
                break
            if len(gen.tokens) == request.max_new_tokens:
                break
            if cache is None:
                last = full(prompt + gen.tokens)[-1]
                continue
            if multimodal:
                last = mm_forward(model.backbone, model.adaptor, None, [tok], cache).data[-1]
            else:
                last = text_forward(model.backbone, [tok], cache).data[-1]
            if not cache.check_coherent(model.backbone.config.n_layers, n_insert):
                raise RuntimeError("KV cache lost length coherence")
    return gen


def without_insertions(stack: AdaptorStack) -> AdaptorStack:
    """A view of ``stack`` sharing every tensor but running no insertion layers."""
    bare = copy.copy(stack)
    bare.insertions = []
    return bare


@dataclass
class BenchReport:
    text_s: float
    multimodal_s: float
    multimodal_bare_s: float
    measured_ratio: float
    text_vs_multimodal_ratio: float
    analytic_ratio: float
    n_layers: int
    n_insert: int
    reference: dict

    def to_records(self) -> list[dict]:
        ref = self.reference
        return [
            {"metric_name": "text_request_s", "value": self.text_s},
            {"metric_name": "multimodal_request_s", "value": self.multimodal_s},
            {"metric_name": "multimodal_no_insertions_request_s", "value": self.multimodal_bare_s},
            {"metric_name": "insertion_overhead_measured", "value": self.measured_ratio},
            {"metric_name": "insertion_overhead_analytic", "value": self.analytic_ratio, "n_layers": self.n_layers, "n_insert": self.n_insert},
            {"metric_name": "multimodal_over_text", "value": self.text_vs_multimodal_ratio},
            {
                "metric_name": "reference_full_scale",
                "n_layers": ref["n_layers"],
                "n_insert": ref["n_insert"],
                "analytic": (ref["n_layers"] + ref["n_insert"]) / ref["n_layers"],
                "measured": ref["multimodal_s"] / ref["text_s"],
            },
        ]


def _time_requests(model: Model, requests: list[WorkflowRequest], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for r in requests:
            generate(model, r)
        best = min(best, time.perf_counter() - t0)
    return best / len(requests)


def bench_latency(model: Model, workload: list[WorkflowRequest], warmup: int = 1, repeats: int = 3) -> BenchReport:
    """Per-request wall time of each workflow, best of ``repeats``.

    The insertion overhead compares multimodal requests with and without the
    insertion layers, so both sides carry identical image tokens.
    """
    if model.adaptor is None:
        raise RequestError("bench needs a model with an adaptor stack")
    mm = [r for r in workload if r.mode == "multimodal"]
    text = [WorkflowRequest("text", r.prompt, None, r.max_new_tokens) for r in mm]
    if not mm:
        raise RequestError("workload must contain multimodal requests")
    bare = Model(model.backbone, without_insertions(model.adaptor), model.meta)
    for _ in range(warmup):
        for m in (model, bare):
            generate(m, mm[0])
        generate(model, text[0])
    text_s = _time_requests(model, text, repeats)
    mm_s = _time_requests(model, mm, repeats)
    bare_s = _time_requests(bare, mm, repeats)
    cfg = model.backbone.config
    analytic = flops_report(cfg, model.adaptor.depths, 1).layer_stack_ratio
    return BenchReport(
        text_s=text_s,
        multimodal_s=mm_s,
        multimodal_bare_s=bare_s,
        measured_ratio=mm_s / bare_s,
        text_vs_multimodal_ratio=mm_s / text_s,
        analytic_ratio=float(analytic),
        n_layers=cfg.n_layers,
        n_insert=len(model.adaptor.depths),
        reference=dict(REFERENCE_LATENCY),
    )
