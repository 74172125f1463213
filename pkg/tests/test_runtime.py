from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from iaa import data as D
from iaa import tensor as T
from iaa.backbone import SequenceOverflowError
from iaa.cache import CacheError, KVCache, KVSlot
from iaa.runtime import (
    ADAPTOR_COMPONENTS,
    TEXT_COMPONENTS,
    RequestError,
    WorkflowRequest,
    bench_latency,
    generate,
    route,
    without_insertions,
)

from conftest import random_image, tiny_model


def _trained_looking(variant, rng, depths=(2, 4)):
    m = tiny_model(variant, depths=depths)
    if variant != "C":
        for ins in m.adaptor.insertions:
            ins.gate.value.data[:] = rng.normal(0, 0.5, ins.gate.value.shape)
    for ins in m.adaptor.insertions:
        ins.layer.wo.data += rng.normal(0, 0.05, ins.layer.wo.shape).astype(np.float32)
    return m


@pytest.mark.parametrize("variant", ["A", "B", "C"])
@pytest.mark.parametrize("mode", ["text", "multimodal"])
def test_cached_decode_equals_full_recompute(variant, mode, rng):
    m = _trained_looking(variant, rng)
    img = random_image(rng) if mode == "multimodal" else None
    req = WorkflowRequest(mode, [D.BOS, D.CAPTION, D.SEP], img, 64)
    a, b = generate(m, req, use_cache=True), generate(m, req, use_cache=False)
    assert a.tokens == b.tokens and len(a.tokens) == 64
    np.testing.assert_allclose(a.prompt_logits, b.prompt_logits, atol=1e-5)
    assert max(np.abs(x - y).max() for x, y in zip(a.step_logits, b.step_logits)) < 1e-5


def test_text_workflow_ignores_adaptor(rng):
    m = _trained_looking("B", rng)
    req = WorkflowRequest("text", [D.BOS, 40, 41], None, 8)
    before = generate(m, req).tokens
    m.adaptor.embed_mm.data[:] = 0.0
    for ins in m.adaptor.insertions:
        ins.layer.wq.data[:] = 5.0
    assert generate(m, req).tokens == before


def test_concurrent_requests_match_sequential(rng):
    m = _trained_looking("A", rng)
    reqs = []
    for i in range(8):
        if i % 2:
            reqs.append(WorkflowRequest("multimodal", [D.BOS, D.CAPTION, D.SEP], random_image(rng), 12))
        else:
            reqs.append(WorkflowRequest("text", [D.BOS, 32 + i], None, 12))
    sequential = [generate(m, r).tokens for r in reqs]
    with ThreadPoolExecutor(4) as pool:
        parallel = list(pool.map(lambda r: generate(m, r).tokens, reqs))
    assert parallel == sequential


def test_stop_token_ends_generation(rng):
    m = tiny_model("C")
    req = WorkflowRequest("text", [D.BOS], None, 10)
    first = generate(m, req).tokens[0]
    assert generate(m, req, stop_token=first).tokens == [first]
    assert generate(m, WorkflowRequest("text", [D.BOS], None, 0)).tokens == []


def test_sequence_overflow_counts_image_tokens(rng):
    m = tiny_model("C")  # max_seq_len 96, 16 image tokens
    img = random_image(rng)
    generate(m, WorkflowRequest("multimodal", [D.BOS] * 3, img, 77))
    with pytest.raises(SequenceOverflowError):
        generate(m, WorkflowRequest("multimodal", [D.BOS] * 3, img, 78))
    generate(m, WorkflowRequest("text", [D.BOS] * 3, None, 93))
    with pytest.raises(SequenceOverflowError):
        generate(m, WorkflowRequest("text", [D.BOS] * 3, None, 94))


@pytest.mark.parametrize(
    "req",
    [
        WorkflowRequest("speech", [1]),
        WorkflowRequest("text", []),
        WorkflowRequest("text", [1], max_new_tokens=-1),
        WorkflowRequest("multimodal", [1], None),
        WorkflowRequest("text", [1], D.GridImage(16, 16, np.zeros((16, 16)))),
    ],
)
def test_bad_requests_rejected(req):
    with pytest.raises(RequestError):
        route(req)


def test_multimodal_needs_adaptor(rng):
    from iaa.adaptor import Model

    m = tiny_model("C")
    with pytest.raises(RequestError):
        generate(Model(m.backbone), WorkflowRequest("multimodal", [1], random_image(rng), 2))


def test_routing_components(rng):
    img = random_image(rng)
    text = route(WorkflowRequest("text", [1]))
    assert text.components == TEXT_COMPONENTS
    assert not set(text.components) & ADAPTOR_COMPONENTS
    plan = route(WorkflowRequest("multimodal", [1], img), tiny_model("B"))
    assert {"image_encoder", "projector", "mm_embedding", "insertion_layers", "gates", "mm_head"} <= set(plan.components)
    shared = route(WorkflowRequest("multimodal", [1], img), tiny_model("C", duplicate_io=False))
    assert "text_embedding" in shared.components and "text_head" in shared.components
    assert "gates" not in shared.components


def test_without_insertions_shares_tensors():
    m = tiny_model("B")
    bare = without_insertions(m.adaptor)
    assert bare.insertions == [] and len(m.adaptor.insertions) == 2
    assert bare.projector is m.adaptor.projector


def test_bench_report(rng):
    m = tiny_model("C", depths=(2, 4))
    workload = [WorkflowRequest("multimodal", [D.BOS, D.CAPTION, D.SEP], random_image(rng), 4) for _ in range(2)]
    rep = bench_latency(m, workload, warmup=1, repeats=1)
    assert rep.analytic_ratio == 1.5
    assert rep.text_s > 0 and rep.multimodal_s > 0 and rep.multimodal_bare_s > 0
    recs = {r["metric_name"]: r for r in rep.to_records()}
    assert recs["reference_full_scale"]["analytic"] == 1.25
    assert recs["insertion_overhead_analytic"]["value"] == 1.5
    with pytest.raises(RequestError):
        bench_latency(m, [WorkflowRequest("text", [1])])


def test_bench_without_insertions_is_near_parity(rng):
    m = tiny_model("C", depths=())
    workload = [WorkflowRequest("multimodal", [D.BOS, D.CAPTION, D.SEP], random_image(rng), 8) for _ in range(3)]
    rep = bench_latency(m, workload, warmup=1, repeats=5)
    assert rep.analytic_ratio == 1.0
    assert 0.5 < rep.measured_ratio < 2.0


def test_repeat_requests_are_deterministic(rng):
    m = _trained_looking("B", rng)
    req = WorkflowRequest("multimodal", [D.BOS, D.CAPTION, D.SEP], random_image(rng), 10)
    a, b = generate(m, req), generate(m, req)
    assert a.tokens == b.tokens
    np.testing.assert_array_equal(a.prompt_logits, b.prompt_logits)


def test_cache_slot_contracts():
    s = KVSlot()
    s.append(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 4)))
    s.append(np.zeros((1, 2, 1, 4)), np.zeros((1, 2, 1, 4)))
    assert s.length == 4
    with pytest.raises(CacheError):
        s.append(np.zeros((1, 3, 1, 4)), np.zeros((1, 3, 1, 4)))
    c = KVCache()
    c.slot("backbone", 0).append(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 4)))
    c.slot("backbone", 1).append(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 4)))
    with pytest.raises(CacheError):
        c.length
    assert not c.check_coherent(2, 0)
    assert not c.check_coherent(3, 0)


def test_cache_batch_mismatch_rejected(rng):
    m = tiny_model("C")
    cache = KVCache()
    with T.no_grad():
        from iaa.adaptor import mm_forward

        mm_forward(m.backbone, m.adaptor, random_image(rng), [1, 2], cache)
        with pytest.raises(T.DimensionError):
            mm_forward(m.backbone, m.adaptor, None, np.array([[1], [2]]), cache)
