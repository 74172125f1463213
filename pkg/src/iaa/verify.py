"""Self-contained invariant suite run against a model or checkpoint."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .adaptor import Model, image_tokens, init_adaptor, mm_embed_text, mm_forward, mm_head, plain_mm_forward
from .backbone import layer_forward
from .evaluate import mm_loss
from .gradcheck import check_gradients, sample_coordinates
from .runtime import WorkflowRequest, generate
from .trainer import STAGE_MODULES

# Each stage configuration paired with the data it trains on.
STAGE_DATA = {
    "Stage1-PT": "caption",
    "Stage2-PT": "caption",
    "Instruction-FT": "instruction",
    "Grounding-FT": "grounding",
    "Unfrozen-Baseline": "caption",
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    value: float | None = None

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: CheckResult):
        self.checks.append(check)


def _random_image(rng) -> D.GridImage:
    return D.render(D.random_scene(rng))


def _random_tokens(rng, vocab: int, n: int) -> np.ndarray:
    return rng.integers(0, vocab, size=n)


def zero_gate_identity(model: Model, variant: str, trials: int = 50, seed: int = 0, text_len: int = 12) -> float:
    """Largest |logit| gap between a fresh gated stack and the insertion-free path."""
    bb = model.backbone
    depths = model.adaptor.depths if model.adaptor is not None and model.adaptor.depths else [bb.config.n_layers]
    stack = init_adaptor(bb, depths, variant, gate_mode="vector", seed=seed)
    rng = np.random.default_rng([seed, 301])
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            img, toks = _random_image(rng), _random_tokens(rng, bb.config.vocab_size, text_len)
            a = mm_forward(bb, stack, img, toks).data
            b = plain_mm_forward(bb, stack, img, toks).data
            worst = max(worst, float(np.abs(a - b).max()))
    return worst


def copy_init_identity(model: Model, depth: int | None = None, trials: int = 50, seed: int = 0, text_len: int = 12) -> float:
    """Largest |logit| gap between variant C at init and running layer ``depth`` twice."""
    bb = model.backbone
    depth = depth or bb.config.n_layers
    stack = init_adaptor(bb, [depth], "C", seed=seed)
    rng = np.random.default_rng([seed, 302])
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            img, toks = _random_image(rng), _random_tokens(rng, bb.config.vocab_size, text_len)
            a = mm_forward(bb, stack, img, toks).data
            h = T.concat([image_tokens(stack, img), mm_embed_text(bb, stack, toks[None])], axis=1)
            for i, layer in enumerate(bb.layers):
                h = layer_forward(layer, h)
                if i + 1 == depth:
                    h = layer_forward(layer, h)
            b = mm_head(bb, stack, h).data[0]
            worst = max(worst, float(np.abs(a - b).max()))
    return worst


def cache_equivalence(
    model: Model, n_tokens: int = 64, seed: int = 0, dtype=np.float64
) -> dict[str, tuple[bool, float]]:
    """Cached vs full-recompute greedy decoding for both workflows.

    Runs on a copy at ``dtype``. The default is float64: in float32 the two
    paths reduce in different orders and trained logits near 20 differ by a
    few ulps (~1e-5), which says nothing about the cache logic.
    """
    rng = np.random.default_rng([seed, 303])
    img = _random_image(rng)
    out = {}
    prompts = {"text": [D.BOS], "multimodal": [D.BOS, D.CAPTION, D.SEP]}
    with T.precision(dtype):
        m = model.astype(dtype)
        for mode, prompt in prompts.items():
            if mode == "multimodal" and m.adaptor is None:
                continue
            req = WorkflowRequest(mode, prompt, img if mode == "multimodal" else None, n_tokens)
            a, b = generate(m, req, use_cache=True), generate(m, req, use_cache=False)
            diff = max(float(np.abs(x - y).max()) for x, y in zip(a.step_logits, b.step_logits))
            diff = max(diff, float(np.abs(a.prompt_logits - b.prompt_logits).max()))
            out[mode] = (a.tokens == b.tokens, diff)
    return out


def _probe_samples(kind: str, seed: int, n: int) -> list[D.Sample]:
    return D.GENERATORS[kind](seed, n)[:n]


def stage_gradient_check(
    model: Model, stage: str, n_coords: int = 100, seed: int = 0, batch: int = 2, epsilon: float = 1e-4
) -> tuple[float, bool, list[str]]:
    """Finite-difference check of the stage's trainable set in float64.

    Returns (max relative error, passed at 1e-4, frozen tensors that got a gradient).
    The step defaults to 1e-4: through a full model, round-off in the loss
    divided by 2 * epsilon swamps gradients near 1e-7 at smaller steps.
    Coordinates still off by more than 1e-5 (gradients near 1e-9) are
    re-estimated with Ridders' extrapolation.
    """
    m64 = model.astype(np.float64)
    samples = _probe_samples(STAGE_DATA[stage], seed, batch)
    with T.precision(np.float64):
        params = m64.set_trainable_modules(STAGE_MODULES[stage])
        # Closed gates block all gradient to the insertion layers, so open them.
        for name, t in params:
            if name.endswith("gate.value") and not t.data.any():
                t.data[:] = np.random.default_rng([seed, 304]).normal(0.0, 0.5, t.shape)
        m64.zero_grad()
        mm_loss(m64, samples).backward()
        trainable = {n for n, _ in params}
        leaked = [n for n, t in m64.named_parameters() if n not in trainable and t.grad is not None]
        m64.zero_grad()
        coords = sample_coordinates(params, n_coords, np.random.default_rng([seed, 305]))
        report = check_gradients(lambda: mm_loss(m64, samples), coords, epsilon, refine_above=1e-5)
    return report.max_rel_error, report.passed(1e-4), leaked


def run_verify(
    model: Model,
    stages=tuple(STAGE_DATA),
    n_coords: int = 100,
    identity_trials: int = 50,
    decode_tokens: int = 64,
    seed: int = 0,
) -> VerifyReport:
    rep = VerifyReport()
    for variant in ("A", "B"):
        gap = zero_gate_identity(model, variant, identity_trials, seed)
        rep.add(CheckResult(f"zero-gate identity ({variant})", gap < 1e-6, f"max abs diff {gap:.3g}", gap))
    gap = copy_init_identity(model, trials=identity_trials, seed=seed)
    rep.add(CheckResult("copy-init identity (C)", gap < 1e-6, f"max abs diff {gap:.3g}", gap))
    for mode, (same, diff) in cache_equivalence(model, decode_tokens, seed).items():
        rep.add(CheckResult(f"kv-cache equivalence ({mode})", same and diff < 1e-5, f"tokens identical={same}, max abs diff {diff:.3g}", diff))
    if model.adaptor is not None:
        for stage in stages:
            err, ok, leaked = stage_gradient_check(model, stage, n_coords, seed)
            rep.add(CheckResult(f"gradient check ({stage})", ok, f"max rel error {err:.3g} over {n_coords} coords", err))
            rep.add(CheckResult(f"frozen tensors gradient-free ({stage})", not leaked, f"leaked: {leaked}" if leaked else "none"))
    ref = (model.meta or {}).get("backbone_sha256")
    if ref is not None:
        now = model.backbone.sha256()
        rep.add(CheckResult("backbone freeze hash", now == ref, f"recorded {ref[:12]}, current {now[:12]}"))
    else:
        rep.add(CheckResult("backbone freeze hash", True, "no reference hash recorded; skipped"))
    return rep
