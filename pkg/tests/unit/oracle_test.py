import pytest

from subnetra import analytics, oracle


def test_check_result_formatting():
    result = oracle.CheckResult(
        name="demo",
        passed=False,
        expected=0.5,
        observed=0.53,
        tolerance=0.01,
    )
    assert result.delta == pytest.approx(0.03)
    assert str(result) == (
        "FAIL demo expected=0.5 observed=0.53 delta=0.03 tol=0.01"
    )


def test_check_result_without_values():
    result = oracle.CheckResult(name="demo", passed=True, detail="ok")
    assert result.delta is None
    assert str(result) == "PASS demo ok"


def test_check_success_prob_passes_for_a_known_instance(rng):
    psi = analytics.PsiMatrix.deterministic([1, 1], 1)
    result = oracle.check_success_prob(psi, 0.5, 100_000, rng)
    assert result.passed
    assert result.expected == pytest.approx(0.5)


def test_check_success_prob_fails_when_tolerance_too_tight(rng):
    psi = analytics.PsiMatrix.uniform(3, 2)
    result = oracle.check_success_prob(psi, 0.5, 1000, rng, tolerance=0.0)
    assert not result.passed


def test_random_instances_respect_limits(rng):
    instances = oracle.random_instances(30, rng, max_K=3, max_M=2)
    assert len(instances) == 30
    for psi, p_act in instances:
        assert 1 <= psi.K <= 3
        assert 1 <= psi.M <= 2
        assert 0.1 <= p_act <= 1.0


def test_check_queue(rng):
    results = oracle.check_queue(0.2, 0.5, 20, 200_000, rng)
    assert [r.passed for r in results] == [True, True, True]
    assert results[1].name.startswith("Q0")


def test_check_brute_force(rng):
    (result,) = oracle.check_brute_force(2, 2, 0.7, 100_000, rng)
    assert result.passed
    assert "candidates=16" in result.detail


def test_check_brute_force_reports_infeasible_search(rng):
    (result,) = oracle.check_brute_force(4, 2, 1.0, 10, rng)
    assert not result.passed
    assert result.detail.startswith("enumeration infeasible")


def test_check_psi_file_reports_infeasible_search():
    psi = analytics.PsiMatrix.uniform(7, 1)
    (result,) = oracle.check_psi_file(psi, 0.5, 10)
    assert not result.passed
    assert "enumeration infeasible" in str(result)
