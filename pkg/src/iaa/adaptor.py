"""Insertion layers, gates, multimodal embedding/head, projector and toy encoder.

Three layer-wiring variants are supported. At a depth ``k`` that carries an
insertion layer, with ``f = frozen_layer_k(x)``:

* ``"C"``: ``x <- insertion(f)``
* ``"B"``: ``x <- f + gate * insertion(f)``
* ``"A"``: ``x <- f + gate * insertion(z)`` where ``z`` is the previous
  insertion layer's ungated output, or the hidden state entering the
  shallowest insertion depth. The insertion layers thus form their own
  stream running alongside the frozen stack.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneLayer, _as_batch, layer_forward
from .cache import KVCache
from .data import GridImage
from .module import Module
from .tensor import Tensor

VARIANTS = ("A", "B", "C")
GATE_MODES = ("vector", "scalar")


class Gate(Module):
    def __init__(self, mode: str, width: int):
        if mode not in GATE_MODES:
            raise ValueError(f"gate mode must be one of {GATE_MODES}, got {mode!r}")
        self.mode = mode
        self.value = Tensor(np.zeros(width if mode == "vector" else 1, T.default_dtype()))


class InsertionLayer(Module):
    def __init__(self, layer: BackboneLayer, attach_depth: int, gate: Gate | None):
        self.attach_depth = attach_depth
        self.layer = layer
        self.gate = gate


class ToyImageEncoder(Module):
    """Fixed linear patch encoder with coordinate-modulated inputs.

    Each non-overlapping patch is flattened to ``p`` pixels and augmented with
    the same pixels scaled by the patch's normalized row and column, plus the
    patch-centre coordinates themselves. A fixed seeded matrix maps this
    ``3p + 2`` vector to ``feature_width``. The coordinates keep blank patches
    away from the all-zero vector, whose norm layers have a near-singular
    gradient.
    """

    def __init__(self, patch_size: int = 4, feature_width: int = 64, seed: int = 1234):
        self.patch_size = patch_size
        self.feature_width = feature_width
        self.seed = seed
        rng = np.random.default_rng([seed, 99])
        p = patch_size * patch_size
        self.proj = Tensor((rng.standard_normal((3 * p + 2, feature_width)) / np.sqrt(p)).astype(T.default_dtype()))

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        b, hgt, wid = pixels.shape
        s = self.patch_size
        if hgt % s or wid % s:
            raise ValueError(f"image {hgt}x{wid} not divisible by patch size {s}")
        gh, gw = hgt // s, wid // s
        patches = pixels.reshape(b, gh, s, gw, s).transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, s * s)
        rows = (np.repeat(np.arange(gh), gw) + 0.5) / gh
        cols = (np.tile(np.arange(gw), gh) + 0.5) / gw
        coords = np.broadcast_to(np.stack([rows, cols], -1), (b, gh * gw, 2))
        return np.concatenate([patches, patches * rows[None, :, None], patches * cols[None, :, None], coords], axis=-1)


class Projector(Module):
    def __init__(self, in_width: int, d_model: int, rng: np.random.Generator):
        dt = T.default_dtype()
        self.w1 = Tensor((rng.standard_normal((in_width, d_model)) / np.sqrt(in_width)).astype(dt))
        self.b1 = Tensor(np.zeros(d_model, dt))
        self.w2 = Tensor((rng.standard_normal((d_model, d_model)) * 0.02).astype(dt))
        self.b2 = Tensor(np.zeros(d_model, dt))


class AdaptorStack(Module):
    def __init__(self, variant, insertions, embed_mm, head_mm, projector, encoder, gate_mode, seed):
        self.variant = variant
        self.gate_mode = gate_mode
        self.seed = seed
        self.insertions: list[InsertionLayer] = insertions
        self.embed_mm = embed_mm
        self.head_mm = head_mm
        self.projector = projector
        self.encoder = encoder

    @property
    def depths(self) -> list[int]:
        return [ins.attach_depth for ins in self.insertions]

    @property
    def duplicate_io(self) -> bool:
        return self.embed_mm is not None

    def insertion_at(self, depth: int) -> tuple[int, InsertionLayer] | None:
        for j, ins in enumerate(self.insertions):
            if ins.attach_depth == depth:
                return j, ins
        return None

    def metadata(self) -> dict:
        return {
            "variant": self.variant,
            "depths": self.depths,
            "gate_mode": self.gate_mode,
            "duplicate_io": self.duplicate_io,
            "patch_size": self.encoder.patch_size,
            "feature_width": self.encoder.feature_width,
            "encoder_seed": self.encoder.seed,
            "seed": self.seed,
        }

    def module_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Named tensors for each trainable group; the encoder is never listed."""
        named = list(self.named_parameters("adaptor."))
        groups = {"projector": [], "inner_adaptor": [], "encoder": []}
        for name, t in named:
            if name.startswith("adaptor.projector."):
                groups["projector"].append((name, t))
            elif name.startswith("adaptor.encoder."):
                groups["encoder"].append((name, t))
            else:
                groups["inner_adaptor"].append((name, t))
        return groups


def even_depths(n_layers: int, n_insert: int) -> list[int]:
    """``n_insert`` evenly spaced 1-based depths ending at the last layer."""
    if not 0 <= n_insert <= n_layers:
        raise ValueError(f"need 0 <= N <= M, got N={n_insert}, M={n_layers}")
    return [(i + 1) * n_layers // n_insert for i in range(n_insert)]


def init_adaptor(
    backbone: Backbone,
    depths,
    variant: str = "C",
    gate_mode: str | None = None,
    duplicate_io: bool = True,
    patch_size: int = 4,
    feature_width: int = 64,
    encoder_seed: int = 1234,
    seed: int = 0,
) -> AdaptorStack:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "C" and gate_mode is not None:
        raise ValueError("variant C has no gates; gate_mode must be None")
    if variant != "C" and gate_mode is None:
        gate_mode = "vector"
    depths = [int(k) for k in depths]
    m = backbone.config.n_layers
    for k in depths:
        if not 1 <= k <= m:
            raise ValueError(f"insertion depth {k} outside [1, {m}]")
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError(f"insertion depths must be strictly increasing, got {depths}")
    d = backbone.config.d_model
    insertions = []
    for k in depths:
        layer = copy.deepcopy(backbone.layers[k - 1])
        gate = Gate(gate_mode, d) if variant != "C" else None
        insertions.append(InsertionLayer(layer, k, gate))
    embed_mm = Tensor(backbone.embed.data.copy()) if duplicate_io else None
    head_mm = Tensor(backbone.head.data.copy()) if duplicate_io else None
    encoder = ToyImageEncoder(patch_size, feature_width, encoder_seed)
    projector = Projector(feature_width, d, np.random.default_rng([seed, 5]))
    stack = AdaptorStack(variant, insertions, embed_mm, head_mm, projector, encoder, gate_mode, seed)
    stack.set_trainable(False)
    return stack


def _pixels(image) -> np.ndarray:
    if isinstance(image, GridImage):
        return image.pixels[None]
    if isinstance(image, (list, tuple)) and image and isinstance(image[0], GridImage):
        return np.stack([im.pixels for im in image])
    arr = np.asarray(image, dtype=np.float32)
    return arr[None] if arr.ndim == 2 else arr


def encode_image(encoder: ToyImageEncoder, image) -> Tensor:
    """Patch features [P, f] for one image, or [B, P, f] for a batch."""
    single = isinstance(image, GridImage) or np.asarray(getattr(image, "pixels", image)).ndim == 2
    px = _pixels(image)
    feats = encoder.patchify(px).astype(encoder.proj.dtype)
    out = Tensor(feats) @ encoder.proj
    return out[0] if single else out


def project(stack: AdaptorStack, features: Tensor) -> Tensor:
    p = stack.projector
    if features.shape[-1] != p.w1.shape[0]:
        raise T.DimensionError(f"feature width {features.shape[-1]} != projector input {p.w1.shape[0]}")
    return T.silu(features @ p.w1 + p.b1) @ p.w2 + p.b2


def mm_embed_text(backbone: Backbone, stack: AdaptorStack, ids: np.ndarray) -> Tensor:
    table = stack.embed_mm if stack.duplicate_io else backbone.embed
    return T.embedding(table, ids)


def mm_layers(backbone: Backbone, stack: AdaptorStack, hidden: Tensor, cache: KVCache | None = None) -> Tensor:
    """Run the frozen stack with the insertion layers wired per variant."""
    stream = None
    for i, layer in enumerate(backbone.layers):
        depth = i + 1
        slot = cache.slot("backbone", i) if cache is not None else None
        hit = stack.insertion_at(depth)
        if hit is None:
            hidden = layer_forward(layer, hidden, slot)
            continue
        j, ins = hit
        islot = cache.slot("insertion", j) if cache is not None else None
        frozen_out = layer_forward(layer, hidden, slot)
        if stack.variant == "C":
            hidden = layer_forward(ins.layer, frozen_out, islot)
        elif stack.variant == "B":
            hidden = frozen_out + ins.gate.value * layer_forward(ins.layer, frozen_out, islot)
        else:
            stream = layer_forward(ins.layer, hidden if stream is None else stream, islot)
            hidden = frozen_out + ins.gate.value * stream
    return hidden


def mm_head(backbone: Backbone, stack: AdaptorStack, hidden: Tensor) -> Tensor:
    head = stack.head_mm if stack.duplicate_io else backbone.head
    return T.rms_norm(hidden, backbone.final_norm) @ head


def image_tokens(stack: AdaptorStack, image) -> Tensor:
    feats = encode_image(stack.encoder, image)
    if feats.ndim == 2:
        feats = feats.reshape(1, *feats.shape)
    return project(stack, feats)


def mm_forward(backbone: Backbone, stack: AdaptorStack, image, text_tokens, cache: KVCache | None = None) -> Tensor:
    """Logits over [image tokens ; text tokens] through the adapted stack.

    Pass ``image=None`` with a non-empty cache to continue decoding.
    """
    ids, squeeze = _as_batch(text_tokens)
    parts = []
    if image is not None:
        parts.append(image_tokens(stack, image))
    elif cache is None or cache.length == 0:
        raise ValueError("mm_forward: an image is required unless continuing from a cache")
    if ids.shape[1]:
        parts.append(mm_embed_text(backbone, stack, ids))
    if not parts:
        raise ValueError("mm_forward: nothing to run")
    if len(parts) == 2 and parts[0].shape[0] != parts[1].shape[0]:
        raise T.DimensionError(f"batch mismatch: {parts[0].shape[0]} images vs {parts[1].shape[0]} prompts")
    hidden = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    if cache is not None and cache.length and cache.entries:
        any_slot = next(iter(cache.entries.values()))
        if any_slot.k is not None and any_slot.k.shape[0] != hidden.shape[0]:
            raise T.DimensionError(f"cache batch {any_slot.k.shape[0]} != input batch {hidden.shape[0]}")
    logits = mm_head(backbone, stack, mm_layers(backbone, stack, hidden, cache))
    return logits[0] if squeeze else logits


def plain_mm_forward(backbone: Backbone, stack: AdaptorStack, image, text_tokens) -> Tensor:
    """Same sequence assembly and embedding/head as ``mm_forward`` but no insertion layers."""
    ids, squeeze = _as_batch(text_tokens)
    hidden = T.concat([image_tokens(stack, image), mm_embed_text(backbone, stack, ids)], axis=1)
    for layer in backbone.layers:
        hidden = layer_forward(layer, hidden)
    logits = mm_head(backbone, stack, hidden)
    return logits[0] if squeeze else logits


@dataclass
class Model:
    """A backbone plus an optional adaptor stack, with provenance metadata."""

    backbone: Backbone
    adaptor: AdaptorStack | None = None
    meta: dict | None = None

    def named_parameters(self):
        yield from self.backbone.named_parameters("backbone.")
        if self.adaptor is not None:
            yield from self.adaptor.named_parameters("adaptor.")

    def module_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups = {"backbone": list(self.backbone.named_parameters("backbone."))}
        if self.adaptor is not None:
            groups.update(self.adaptor.module_groups())
        return groups

    def set_trainable_modules(self, names) -> list[tuple[str, Tensor]]:
        """Freeze everything, then unfreeze exactly the listed groups."""
        groups = self.module_groups()
        unknown = set(names) - set(groups) - {"encoder"}
        if unknown:
            raise ValueError(f"unknown module groups {sorted(unknown)}")
        for _, t in self.named_parameters():
            t.trainable = t.needs_grad = False
            t.grad = None
        chosen = []
        for g in names:
            if g == "encoder":
                raise ValueError("the image encoder is frozen always")
            for name, t in groups[g]:
                t.trainable = t.needs_grad = True
                chosen.append((name, t))
        return chosen

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def astype(self, dtype) -> "Model":
        clone = copy.deepcopy(self)
        for _, t in clone.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return clone

    def clone(self) -> "Model":
        return copy.deepcopy(self)
