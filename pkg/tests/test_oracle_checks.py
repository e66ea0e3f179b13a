import pytest

from coupling_gen.oracle.checks import run_suite


def test_pinsker_suite():
    (rec,) = run_suite("pinsker", seed=1, count=300)
    assert rec.passed and rec.detail["failures"] == 0 and rec.lhs <= rec.rhs


def test_bound_suite_records():
    recs = {r.name: r for r in run_suite("bound", seed=2, count=200)}
    assert set(recs) == {"bound_tv", "bound_kl", "data_processing"}
    assert all(r.passed for r in recs.values())


def test_barrier_suite_reports_floor_and_certificate():
    recs = {r.name: r for r in run_suite("barrier")}
    assert recs["barrier_certificate"].lhs == 0.25 and recs["barrier_certificate"].rhs == 0.0
    assert recs["barrier_floor"].detail["tv_star"] == pytest.approx(0.41421356, abs=1e-3)
    assert all(r.passed for r in recs.values())


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("nope")
