"""Runs every acceptance criterion at its stated size and tolerance.

One line per criterion is printed in the terminal summary (and to stdout
when run with ``-s``).
"""

import time

import pytest

from conftest import ACCEPTANCE_LINES
from ttquant import acceptance

# criterion number, check name, runtime budget in seconds (None = unbudgeted)
CRITERIA = [
    (1, "oracle_optimality", 10.0),
    (2, "qdq_idempotence", None),
    (3, "activation_benefit", 30.0),
    (4, "groupsize_trend", None),
    (5, "lowrank_benefit", None),
    (6, "domain_shift", None),
    (7, "monotone_precision", None),
    (8, "eckart_young", None),
    (9, "overhead_formula", None),
    (10, "format_roundtrips", None),
    (11, "hyperparam_trend", None),
    (12, "degeneracies", None),
]


@pytest.mark.parametrize("number,name,budget", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(number, name, budget):
    result = acceptance.run_check(name, seed=0)
    ok = result.passed and (budget is None or result.seconds < budget)
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'} {name}: {result.detail} ({result.seconds:.2f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert result.passed, result.detail
    if budget is not None:
        assert result.seconds < budget, f"took {result.seconds:.1f}s, budget {budget}s"


def test_selftest_budget():
    start = time.perf_counter()
    results = acceptance.run_all(seed=0)
    elapsed = time.perf_counter() - start
    assert all(r.passed for r in results)
    assert elapsed < 60.0
