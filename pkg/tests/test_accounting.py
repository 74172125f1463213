from fractions import Fraction

import numpy as np
import pytest

from iaa import tensor as T
from iaa.accounting import flops_report, layer_macs, memory_report
from iaa.adaptor import even_depths, init_adaptor, mm_forward
from iaa.backbone import BackboneConfig, build_backbone, layer_forward, layer_param_count, text_forward

from conftest import TINY, random_image


@pytest.fixture
def mac_counter(monkeypatch):
    """Count multiply-accumulates of every matmul actually executed."""
    total = [0]
    real = T.matmul

    def counting(a, b):
        out = real(a, b)
        total[0] += int(np.prod(out.shape)) * a.shape[-1]
        return out

    monkeypatch.setattr(T, "matmul", counting)
    return total


@pytest.mark.parametrize("seq_len", [1, 5, 17])
def test_layer_macs_match_executed_matmuls(mac_counter, seq_len):
    bb = build_backbone(TINY)
    with T.no_grad():
        layer_forward(bb.layers[0], T.Tensor(np.zeros((seq_len, TINY.d_model), np.float32)))
    assert mac_counter[0] == layer_macs(TINY, seq_len)


@pytest.mark.parametrize("variant,depths", [("C", [4]), ("B", [2, 4]), ("A", [1, 2, 3, 4])])
def test_multimodal_forward_total_matches_report(mac_counter, rng, variant, depths):
    bb = build_backbone(TINY)
    st = init_adaptor(bb, depths, variant)
    text = rng.integers(0, 512, 6)
    with T.no_grad():
        mm_forward(bb, st, random_image(rng), text)
    rep = flops_report(TINY, depths, 16 + 6, n_image_tokens=16)
    assert mac_counter[0] == rep.total


def test_text_forward_total_matches_report(mac_counter, rng):
    bb = build_backbone(TINY)
    with T.no_grad():
        text_forward(bb, rng.integers(0, 512, 9))
    rep = flops_report(TINY, [], 9)
    assert mac_counter[0] == rep.total and rep.insertion_layers == rep.projector == rep.encoder == 0


@pytest.mark.parametrize("m,n", [(32, 8), (8, 2), (8, 1), (8, 4), (4, 4), (6, 0)])
def test_layer_stack_ratio_exact(m, n):
    cfg = BackboneConfig(d_model=16, n_layers=m, n_heads=2, ffn_hidden=32)
    ratio = flops_report(cfg, even_depths(m, n), 10).layer_stack_ratio
    assert ratio == Fraction(m + n, m)
    assert isinstance(ratio, Fraction)


def test_full_scale_ratio_and_report_dict():
    cfg = BackboneConfig(d_model=16, n_layers=32, n_heads=2, ffn_hidden=32)
    d = flops_report(cfg, even_depths(32, 8), 4).to_dict()
    assert d["layer_stack_ratio"] == 1.25 and d["layer_stack_ratio_exact"] == "5/4"
    assert d["total"] == sum(d[k] for k in ("backbone_layers", "insertion_layers", "projector", "encoder", "head"))
    with pytest.raises(ValueError):
        flops_report(cfg, [], 4, n_image_tokens=5)


def test_insertion_layer_param_count_equals_backbone_layer():
    bb = build_backbone(TINY)
    st = init_adaptor(bb, [1, 3], "B")
    per_layer = layer_param_count(TINY.d_model, TINY.ffn_hidden)
    d, f = TINY.d_model, TINY.ffn_hidden
    assert per_layer == 4 * d * d + 3 * d * f + 2 * d
    for ins, k in zip(st.insertions, [1, 3]):
        assert sum(t.size for _, t in ins.layer.named_parameters()) == sum(t.size for _, t in bb.layers[k - 1].named_parameters()) == per_layer


@pytest.mark.parametrize("dup", [True, False])
def test_memory_identities(dup):
    bb = build_backbone(TINY)
    st = init_adaptor(bb, [2, 4], "B", duplicate_io=dup)
    rep = memory_report(bb, st)
    bb_bytes = sum(t.data.nbytes for _, t in bb.named_parameters())
    st_bytes = sum(t.data.nbytes for _, t in st.named_parameters())
    assert rep.backbone_bytes == bb_bytes
    assert rep.shared_bytes == bb_bytes + st_bytes
    assert rep.savings_bytes == bb_bytes
    assert rep.naive_bytes - rep.shared_bytes == rep.backbone_bytes
    parts = rep.insertion_bytes + rep.io_bytes + rep.projector_bytes + rep.encoder_bytes
    assert parts == rep.stack_bytes
    assert rep.io_bytes == (2 * TINY.vocab_size * TINY.d_model * 4 if dup else 0)
    assert rep.insertion_bytes == 2 * (layer_param_count(TINY.d_model, TINY.ffn_hidden) + TINY.d_model) * 4
