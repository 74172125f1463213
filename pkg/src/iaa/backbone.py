"""Decoder-only language model used as the frozen backbone.

Pre-norm layers with RMS normalization, rotary causal self-attention and a
SiLU-gated feed-forward block. The text workflow is embedding lookup, the
layer stack, a final norm and the text head, nothing else.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import data as D
from . import tensor as T
from .cache import KVCache, KVSlot
from .module import Module, hash_tensors
from .optim import OptimizerState, adamw_step, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)


class SequenceOverflowError(ValueError):
    """A forward pass would run past ``max_seq_len``."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    ffn_hidden: int = 512
    max_seq_len: int = 256
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head width must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return asdict(self)


class BackboneLayer(Module):
    def __init__(self, d: int, ffn: int, n_heads: int, max_seq_len: int, rope_base: float, rng=None):
        def w(shape, std):
            arr = rng.standard_normal(shape) * std if rng is not None else np.zeros(shape)
            return Tensor(arr.astype(T.default_dtype()))

        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.rope_base = rope_base
        self.attn_norm = Tensor(np.ones(d, T.default_dtype()))
        self.wq = w((d, d), 0.02)
        self.wk = w((d, d), 0.02)
        self.wv = w((d, d), 0.02)
        self.wo = w((d, d), 0.02)
        self.ffn_norm = Tensor(np.ones(d, T.default_dtype()))
        self.w_gate = w((d, ffn), 0.02)
        self.w_up = w((d, ffn), 0.02)
        self.w_down = w((ffn, d), 0.02)


class Backbone(Module):
    def __init__(self, config: BackboneConfig):
        rng = np.random.default_rng(config.seed)
        d, v = config.d_model, config.vocab_size
        dt = T.default_dtype()
        self.config = config
        self.embed = Tensor((rng.standard_normal((v, d)) * 0.02).astype(dt))
        self.layers = [
            BackboneLayer(d, config.ffn_hidden, config.n_heads, config.max_seq_len, config.rope_base, rng)
            for _ in range(config.n_layers)
        ]
        # residual-branch outputs start smaller so depth does not blow up the stream
        scale = 1.0 / math.sqrt(2 * config.n_layers)
        for layer in self.layers:
            layer.wo.data *= dt(scale)
            layer.w_down.data *= dt(scale)
        self.final_norm = Tensor(np.ones(d, dt))
        self.head = Tensor((rng.standard_normal((d, v)) * 0.02).astype(dt))

    def sha256(self) -> str:
        return hash_tensors(self.named_parameters("backbone."))


def build_backbone(config: BackboneConfig) -> Backbone:
    return Backbone(config)


def layer_param_count(d_model: int, ffn_hidden: int) -> int:
    return 4 * d_model * d_model + 2 * d_model + 3 * d_model * ffn_hidden


@lru_cache(maxsize=32)
def _rope_tables(head_dim: int, max_len: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(max_len, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def layer_forward(layer: BackboneLayer, hidden: Tensor, cache: KVSlot | None = None) -> Tensor:
    """Pre-norm causal self-attention then pre-norm gated FFN, both residual.

    With ``cache`` the new positions continue after the cached ones and their
    keys/values are appended to it.
    """
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = hidden.reshape(1, *hidden.shape)
    b, t, d = hidden.shape
    if d != layer.wq.shape[0]:
        raise T.DimensionError(f"hidden width {d} != d_model {layer.wq.shape[0]}")
    start = cache.length if cache is not None else 0
    if start + t > layer.max_seq_len:
        raise SequenceOverflowError(f"sequence of {start + t} positions exceeds max_seq_len {layer.max_seq_len}")
    h, dh = layer.n_heads, d // layer.n_heads
    cos, sin = _rope_tables(dh, layer.max_seq_len, layer.rope_base, hidden.dtype.type)
    cos, sin = cos[start : start + t], sin[start : start + t]

    x = T.rms_norm(hidden, layer.attn_norm)

    def heads(proj):
        return T.transpose((x @ proj).reshape(b, t, h, dh), (0, 2, 1, 3))

    q = T.rope(heads(layer.wq), cos, sin)
    k = T.rope(heads(layer.wk), cos, sin)
    v = heads(layer.wv)
    if cache is not None:
        past_k, past_v = cache.k, cache.v
        cache.append(k.data, v.data)
        if past_k is not None:
            k = T.concat([Tensor(past_k), k], axis=2)
            v = T.concat([Tensor(past_v), v], axis=2)
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.causal_softmax(scores, offset=start) @ v
    attn = T.transpose(attn, (0, 2, 1, 3)).reshape(b, t, d)
    hidden = hidden + attn @ layer.wo

    x = T.rms_norm(hidden, layer.ffn_norm)
    ffn = (T.silu(x @ layer.w_gate) * (x @ layer.w_up)) @ layer.w_down
    out = hidden + ffn
    return out.reshape(t, d) if squeeze else out


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise T.DimensionError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    return ids, False


def text_forward(backbone: Backbone, tokens, cache: KVCache | None = None) -> Tensor:
    """Logits of the text-only workflow, shaped like ``tokens`` plus a vocab axis."""
    ids, squeeze = _as_batch(tokens)
    if ids.shape[1] == 0:
        raise ValueError("text_forward: empty prompt")
    if ids.max() >= backbone.config.vocab_size or ids.min() < 0:
        raise ValueError(f"token ids must lie in [0, {backbone.config.vocab_size})")
    hidden = T.embedding(backbone.embed, ids)
    for i, layer in enumerate(backbone.layers):
        hidden = layer_forward(layer, hidden, cache.slot("backbone", i) if cache is not None else None)
    logits = T.rms_norm(hidden, backbone.final_norm) @ backbone.head
    return logits[0] if squeeze else logits


# -- language pretraining ---------------------------------------------------


def collate_text(samples: list[D.Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded inputs, next-token targets and a loss mask over response targets."""
    width = max(len(s.tokens) for s in samples) - 1
    inputs = np.full((len(samples), width), D.PAD, np.int64)
    targets = np.full((len(samples), width), D.PAD, np.int64)
    mask = np.zeros((len(samples), width), bool)
    for r, s in enumerate(samples):
        toks = s.tokens
        n = len(toks) - 1
        inputs[r, :n] = toks[:-1]
        targets[r, :n] = toks[1:]
        mask[r, :n] = s.loss_mask[1:]
    return inputs, targets, mask


def text_loss(backbone: Backbone, samples: list[D.Sample]) -> Tensor:
    inputs, targets, mask = collate_text(samples)
    return T.cross_entropy(text_forward(backbone, inputs), targets, mask)


def heldout_text_loss(backbone: Backbone, samples: list[D.Sample], batch_size: int = 64) -> float:
    """Token-weighted mean next-token loss, computed in a fixed order."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            inputs, targets, mask = collate_text(chunk)
            n = int(mask.sum())
            total += float(T.cross_entropy(text_forward(backbone, inputs), targets, mask).data) * n
            count += n
    return total / count


@dataclass
class TextLMReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    heldout_loss: float | None = None
    uniform_baseline: float = 0.0


def train_text_lm(
    backbone: Backbone,
    corpus: list[D.Sample],
    steps: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
    warmup_ratio: float = 0.03,
    heldout: list[D.Sample] | None = None,
    log_every: int = 100,
) -> TextLMReport:
    """Next-token pretraining of every backbone tensor with AdamW + cosine decay."""
    if not corpus:
        raise ValueError("empty corpus")
    report = TextLMReport(uniform_baseline=math.log(backbone.config.vocab_size))
    params = list(backbone.named_parameters("backbone."))
    backbone.set_trainable(True)
    state = OptimizerState()
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(corpus))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(corpus)), 0
        batch = [corpus[j] for j in order[cursor : cursor + batch_size]]
        cursor += batch_size
        backbone.zero_grad()
        loss = text_loss(backbone, batch)
        val = float(loss.data)
        if not math.isfinite(val):
            raise FloatingPointError(f"text pretraining loss became {val} at step {step} (lr={lr})")
        loss.backward()
        cur = cosine_lr(lr, steps, warmup_ratio, step)
        adamw_step(params, state, cur)
        report.losses.append(val)
        report.lrs.append(cur)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f lr %.2e", step, val, cur)
    backbone.zero_grad()
    backbone.set_trainable(False)
    if heldout:
        report.heldout_loss = heldout_text_loss(backbone, heldout)
    return report
