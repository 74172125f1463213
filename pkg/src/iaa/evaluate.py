"""Batching, masked losses and held-out metrics for the multimodal workflow."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import data as D
from . import tensor as T
from .adaptor import Model, mm_forward
from .cache import KVCache


def n_image_tokens(model: Model, image_size: int = D.IMAGE_SIZE) -> int:
    s = model.adaptor.encoder.patch_size
    return (image_size // s) ** 2


def collate_mm(samples: list[D.Sample], n_img: int):
    """Images, text inputs, and targets/mask aligned with the [image ; text] positions.

    Hidden position ``n_img + i`` holds text token ``i`` and predicts token ``i + 1``.
    """
    images = np.stack([s.image.pixels for s in samples])
    width = max(len(s.tokens) for s in samples) - 1
    text = np.full((len(samples), width), D.PAD, np.int64)
    targets = np.zeros((len(samples), n_img + width), np.int64)
    mask = np.zeros((len(samples), n_img + width), bool)
    for r, s in enumerate(samples):
        toks, lm = s.tokens, s.loss_mask
        n = len(toks) - 1
        text[r, :n] = toks[:-1]
        targets[r, n_img : n_img + n] = toks[1:]
        mask[r, n_img : n_img + n] = lm[1:]
    return images, text, targets, mask


def mm_loss(model: Model, samples: list[D.Sample]) -> T.Tensor:
    images, text, targets, mask = collate_mm(samples, n_image_tokens(model))
    logits = mm_forward(model.backbone, model.adaptor, images, text)
    return T.cross_entropy(logits, targets, mask)


def response_metrics(model: Model, samples: list[D.Sample], batch_size: int = 64) -> dict[str, float]:
    """Masked response loss and exact match under teacher forcing.

    A response is an exact match when every response position's argmax equals
    the target. That is equivalent to greedy decoding reproducing the
    response and stopping with EOS.
    """
    n_img = n_image_tokens(model)
    total, count, hits = 0.0, 0, 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            images, text, targets, mask = collate_mm(chunk, n_img)
            logits = mm_forward(model.backbone, model.adaptor, images, text)
            n = int(mask.sum())
            total += float(T.cross_entropy(logits, targets, mask).data) * n
            count += n
            correct = (logits.data.argmax(-1) == targets) | ~mask
            hits += int(correct.all(axis=1).sum())
    return {"loss": total / count, "exact_match": hits / len(samples)}


def greedy_batch(model: Model, images: np.ndarray, prompts: np.ndarray, max_new: int, stop: int | None = D.EOS):
    """Cached greedy decoding for equal-length prompts. Returns [B, <=max_new] ids."""
    cache = KVCache()
    out = np.zeros((len(prompts), 0), np.int64)
    done = np.zeros(len(prompts), bool)
    with T.no_grad():
        logits = mm_forward(model.backbone, model.adaptor, images, prompts, cache).data[:, -1]
        for _ in range(max_new):
            nxt = logits.argmax(-1)
            if stop is not None:
                nxt = np.where(done, stop, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if stop is not None:
                done |= nxt == stop
                if done.all():
                    break
            logits = mm_forward(model.backbone, model.adaptor, None, nxt[:, None], cache).data[:, -1]
    return out


def grounding_iou(model: Model, samples: list[D.Sample], batch_size: int = 128) -> dict[str, float]:
    """Mean IoU of greedily decoded boxes vs targets, single- and multi-object."""
    groups = defaultdict(list)
    for s in samples:
        groups[len(s.prompt_ids)].append(s)
    ious = {"single": [], "multi": []}
    for plen, group in sorted(groups.items()):
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            images = np.stack([s.image.pixels for s in chunk])
            prompts = np.array([s.prompt_ids for s in chunk], np.int64)
            max_new = max(len(s.response_ids) for s in chunk) + 1
            decoded = greedy_batch(model, images, prompts, max_new)
            for s, row in zip(chunk, decoded):
                pred = D.parse_boxes(row.tolist())
                vals = [D.box_iou(t, pred[k]) if k < len(pred) else 0.0 for k, t in enumerate(s.boxes)]
                key = "single" if D.is_single_grounding(s) else "multi"
                ious[key].append(float(np.mean(vals)))
    return {
        "iou_single": float(np.mean(ious["single"])) if ious["single"] else float("nan"),
        "iou_multi": float(np.mean(ious["multi"])) if ious["multi"] else float("nan"),
    }


def evaluate(model: Model, eval_sets: dict[str, list[D.Sample]]) -> dict[str, float]:
    out = {}
    for kind in ("caption", "instruction"):
        if eval_sets.get(kind):
            m = response_metrics(model, eval_sets[kind])
            out[f"{kind}_loss"] = m["loss"]
            out[f"{kind}_exact_match"] = m["exact_match"]
    if eval_sets.get("grounding"):
        g = grounding_iou(model, eval_sets["grounding"])
        out["grounding_iou"] = g["iou_single"]
        out["grounding_iou_multi"] = g["iou_multi"]
    return out
