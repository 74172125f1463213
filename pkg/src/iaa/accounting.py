"""Closed-form compute and memory accounting for dual-workflow deployment."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from .adaptor import AdaptorStack
from .backbone import Backbone, BackboneConfig


def layer_macs(config: BackboneConfig, seq_len: int) -> int:
    """Multiply-accumulates of one decoder layer over ``seq_len`` positions.

    Counts the q/k/v/o projections, the gated FFN, and dense score and
    value products (the causal mask is applied to a full T x T product).
    """
    d, h, t = config.d_model, config.ffn_hidden, seq_len
    return t * (4 * d * d + 3 * d * h) + 2 * t * t * d


@dataclass
class FlopsReport:
    seq_len: int
    n_layers: int
    n_insert: int
    backbone_layers: int
    insertion_layers: int
    projector: int
    encoder: int
    head: int
    layer_stack_ratio: Fraction

    @property
    def total(self) -> int:
        return self.backbone_layers + self.insertion_layers + self.projector + self.encoder + self.head

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layer_stack_ratio"] = float(self.layer_stack_ratio)
        out["layer_stack_ratio_exact"] = f"{self.layer_stack_ratio.numerator}/{self.layer_stack_ratio.denominator}"
        out["total"] = self.total
        return out


def flops_report(
    config: BackboneConfig,
    depths,
    seq_len: int,
    n_image_tokens: int = 0,
    patch_size: int = 4,
    feature_width: int = 64,
) -> FlopsReport:
    """Exact MAC counts per component for one forward pass over ``seq_len`` positions.

    ``n_image_tokens`` of those positions come from the projector; pass 0 for
    a text-only pass, in which case the projector and encoder cost nothing.
    """
    if not 0 <= n_image_tokens <= seq_len:
        raise ValueError("n_image_tokens must lie in [0, seq_len]")
    n_insert = len(list(depths))
    per_layer = layer_macs(config, seq_len)
    p = patch_size * patch_size
    d = config.d_model
    stack = config.n_layers * per_layer
    inserted = n_insert * per_layer
    return FlopsReport(
        seq_len=seq_len,
        n_layers=config.n_layers,
        n_insert=n_insert,
        backbone_layers=stack,
        insertion_layers=inserted,
        projector=n_image_tokens * (feature_width * d + d * d),
        encoder=n_image_tokens * (3 * p + 2) * feature_width,
        head=seq_len * d * config.vocab_size,
        layer_stack_ratio=Fraction(stack + inserted, stack),
    )


def _nbytes(named) -> int:
    return sum(t.data.nbytes for _, t in named)


@dataclass
class MemoryReport:
    backbone_bytes: int
    stack_bytes: int
    insertion_bytes: int
    io_bytes: int
    projector_bytes: int
    encoder_bytes: int
    shared_bytes: int
    naive_bytes: int
    savings_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def memory_report(backbone: Backbone, stack: AdaptorStack) -> MemoryReport:
    """Parameter bytes of a shared deployment vs two standalone models.

    The shared deployment holds one frozen backbone plus the adaptor stack.
    The naive deployment keeps a text model and a separate multimodal model
    that carries its own copy of the backbone, so it costs one extra backbone.
    """
    bb = _nbytes(backbone.named_parameters())
    groups = stack.module_groups()
    io = sum(t.data.nbytes for t in (stack.embed_mm, stack.head_mm) if t is not None)
    stack_bytes = _nbytes(stack.named_parameters())
    shared = bb + stack_bytes
    naive = 2 * bb + stack_bytes
    return MemoryReport(
        backbone_bytes=bb,
        stack_bytes=stack_bytes,
        insertion_bytes=_nbytes(groups["inner_adaptor"]) - io,
        io_bytes=io,
        projector_bytes=_nbytes(groups["projector"]),
        encoder_bytes=_nbytes(groups["encoder"]),
        shared_bytes=shared,
        naive_bytes=naive,
        savings_bytes=naive - shared,
    )
