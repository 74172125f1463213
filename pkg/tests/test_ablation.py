import itertools

import pytest

from iaa import data as D
from iaa.ablation import Cell, CellResult, run_ablation_matrix, schedule_stages, trend_verdicts
from iaa.backbone import build_backbone
from iaa.trainer import default_stages

from conftest import TINY


def _results(score):
    out = []
    for v, dup, sched in itertools.product("ABC", (True, False), ("full", "skip-stage1", "skip-stage2")):
        cell = Cell(v, dup, 2, sched)
        res = CellResult(cell)
        for seed in (0, 1, 2):
            res.per_seed[seed] = {"caption_loss": score(cell) + 0.01 * seed}
        out.append(res)
    return out


def _paper_order(cell):
    return {"A": 3.0, "B": 2.0, "C": 1.0}[cell.variant] + (0 if cell.duplicate_io else 0.5) + (0 if cell.schedule == "full" else 0.7)


def test_verdicts_hold_for_expected_ordering():
    v = trend_verdicts(_results(_paper_order))
    assert set(v) == {"variant C>=B>=A", "duplication on>=off", "full>=skip-stage1", "full>=skip-stage2"}
    assert all(x["holds"] for x in v.values())
    assert v["variant C>=B>=A"]["scores"]["C"] < v["variant C>=B>=A"]["scores"]["A"]


def test_verdicts_report_reversals():
    v = trend_verdicts(_results(lambda c: -_paper_order(c)))
    assert not any(x["holds"] for x in v.values())


def test_higher_is_better_metrics():
    res = _results(lambda c: 0.0)
    for r in res:
        for m in r.per_seed.values():
            m["grounding_iou"] = 1.0 - 0.1 * "CBA".index(r.cell.variant)
    assert trend_verdicts(res, "grounding_iou")["variant C>=B>=A"]["holds"]


def test_median_over_seeds():
    res = CellResult(Cell("C", True, 1, "full"), {0: {"caption_loss": 5.0}, 1: {"caption_loss": 1.0}, 2: {"caption_loss": 2.0}})
    assert res.median("caption_loss") == 2.0
    assert res.row()["caption_loss"] == 2.0 and res.row()["cell"] == "C/dup/N1/full"


def test_schedule_stages():
    stages = default_stages()
    assert [s.stage for s in schedule_stages(stages, "skip-stage1")] == ["Stage2-PT", "Instruction-FT", "Grounding-FT"]
    assert [s.stage for s in schedule_stages(stages, "skip-stage2")] == ["Stage1-PT", "Instruction-FT", "Grounding-FT"]
    assert len(schedule_stages(stages, "full")) == 4
    with pytest.raises(ValueError):
        schedule_stages(stages, "skip-stage3")


def test_matrix_shares_seeds_and_emits_one_row_per_cell():
    bb = build_backbone(TINY)
    data = {"caption": D.gen_caption_pairs(0, 16), "instruction": D.gen_instruction_pairs(0, 16), "grounding": D.gen_grounding_pairs(0, 16)}
    evals = {k: v[:4] for k, v in data.items()}
    stages = default_stages(0, (1, 1, 1, 1), (1e-3,) * 4, batch_size=4)
    seen = []
    rep = run_ablation_matrix(bb, stages, data, evals, ("A", "C"), (True,), (1, 4), ("full",), (0, 1), on_cell=seen.append)
    assert len(rep.results) == len(seen) == 4
    assert all(sorted(r.per_seed) == [0, 1] for r in rep.results)
    assert len(rep.rows()) == 4 and "trend" in rep.table()
    assert len(rep.to_records()) == 4 * 2 * len(rep.results[0].per_seed[0])
    with pytest.raises(ValueError):
        run_ablation_matrix(bb, stages, data, evals, n_insert=(5,))
