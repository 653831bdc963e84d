import numpy as np
import pytest

from randaudit.features import UnitTable


def make_units(n, d=1, seed=0, **kw):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return UnitTable(ids=[f"u{i:03d}" for i in range(n)], features=x, feature_names=tuple(f"f{j}" for j in range(d)), **kw)


@pytest.fixture
def units4():
    return make_units(4)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
