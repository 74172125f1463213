import numpy as np
import pytest

from iaa import data as D
from iaa.adaptor import Model, init_adaptor
from iaa.backbone import BackboneConfig, build_backbone

TINY = BackboneConfig(d_model=16, n_layers=4, n_heads=2, ffn_hidden=32, max_seq_len=96)


@pytest.fixture
def tiny_backbone():
    return build_backbone(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(variant="C", depths=(2, 4), duplicate_io=True, gate_mode=None, seed=0):
    bb = build_backbone(TINY)
    return Model(bb, init_adaptor(bb, list(depths), variant, gate_mode, duplicate_io, seed=seed))


def random_image(rng):
    return D.render(D.random_scene(rng))


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
