import numpy as np
import pytest

from ioh_tta import synth
from ioh_tta.bank import build_bank
from ioh_tta.series import VitalSeries, WindowSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return WindowSpec(12, 4, 4)


@pytest.fixture(scope="session")
def small_cohort():
    spec = synth.CohortSpec(n_patients=8, duration_steps=120, lookback_steps=12,
                            horizon_steps=4, seed=3, id_prefix="tr")
    return synth.generate(spec)


@pytest.fixture(scope="session")
def small_test_cohort():
    spec = synth.CohortSpec(n_patients=4, duration_steps=120, lookback_steps=12,
                            horizon_steps=4, seed=4, shift_strength=1.0, id_prefix="te")
    return synth.generate(spec)


@pytest.fixture(scope="session")
def small_bank(small_cohort, small_spec):
    return build_bank(small_cohort, small_spec, k_hypo=2, k_nonhypo=3, seed=0, max_iters=20)


def make_series(map_values, pid="p0", interval=30.0, extra=0):
    m = np.asarray(map_values, dtype=float)
    cols = [m] + [m * 0.5 + i for i in range(extra)]
    names = ("map",) + tuple(f"ch{i}" for i in range(extra))
    return VitalSeries(pid, names, interval, np.column_stack(cols))


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
