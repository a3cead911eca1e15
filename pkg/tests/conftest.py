from __future__ import annotations

import pytest

from accelopt import dataset as D
from accelopt.contexts import builtin_library
from accelopt.design_space import default_space
from accelopt.oracle import OracleSpec
from accelopt.surrogate import SurrogateArchitecture

SMALL_ARCH = SurrogateArchitecture(embed_dim=8, attention_layers=1, prediction_heads=3,
                                   head_hidden=8, mixing_hidden=(16,))


@pytest.fixture(scope="session")
def space():
    return default_space()


@pytest.fixture(scope="session")
def library():
    return builtin_library()


@pytest.fixture(scope="session")
def small_arch():
    return SMALL_ARCH


@pytest.fixture(scope="session")
def edge_split(space, library):
    ds = D.generate(space, OracleSpec(), [library["mobilenet_edge"]], 1500, 0)
    return D.split_validation(D.select_training_subset(ds, 250))


@pytest.fixture(scope="session")
def multi_split(space, library):
    apps = [library[a] for a in ("m4", "m5", "m6")]
    ds = D.generate(space, OracleSpec(), apps, 800, 1)
    return D.split_validation(D.select_training_subset(ds, 120))


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record the outcome of one acceptance criterion; returns ``ok`` for asserting."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
