import time

import pytest

from slowfast.energy import builtin_scenario
from slowfast.slow import build_slow_fast_evolution
from slowfast.verify import run_ladder

from oracles import ACCEPTANCE


@pytest.fixture(scope="session")
def dwell():
    return builtin_scenario("dwell")


@pytest.fixture(scope="session")
def dwell_pe(dwell):
    return build_slow_fast_evolution(dwell)


@pytest.fixture(scope="session")
def dwell_het(dwell_pe):
    return dwell_pe.heteroclinics[0]


@pytest.fixture(scope="session")
def dwell_ladder(dwell, dwell_pe):
    """(trajectories, reports, seconds) for the default ladder with eta = 0.03."""
    t0 = time.perf_counter()
    trajs, reports = run_ladder(dwell, dwell_pe, eta=0.03)
    return trajs, reports, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        items = ACCEPTANCE[c]
        ok = all(i[1] for i in items)
        failed = [i[0] for i in items if not i[1]]
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'} [{len(items)} checks]{tail}")
        for name, passed, detail in items:
            tr.write_line(f"    {'ok  ' if passed else 'FAIL'} {name}: {detail}")
