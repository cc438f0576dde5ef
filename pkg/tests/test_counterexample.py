import numpy as np
import pytest

from csl_lab import engine
from csl_lab.core import RunConfig, ValidationError, multi_branch_scenario, two_branch_delta_scenario, unit_params
from csl_lab.counterexample import (
    EXPECTED_PATTERN,
    REFERENCE,
    ThreeWayConfig,
    born_requires_dependence_report,
    reference_run_config,
    run_no_go,
    two_proportion_z,
    unitary_freeze_check,
)


def test_two_proportion_z_zero_for_equal():
    z = two_proportion_z(np.array([0.4, 0.6]), 100, np.array([0.4, 0.6]), 200)
    assert np.all(z == 0)


def test_no_go_reference_pair():
    a = two_branch_delta_scenario(unit_params(), REFERENCE.delta_n, 0.7)
    b = two_branch_delta_scenario(unit_params(), REFERENCE.delta_n, 0.3)
    v = run_no_go((a, b), reference_run_config())
    assert v.frequencies_agree
    assert not v.born_a.passed and not v.born_b.passed
    assert v.verdict == "no-go demonstrated"


def test_no_go_identical_inputs_agree():
    a = two_branch_delta_scenario(unit_params(), 4, 0.5)
    v = run_no_go((a, a), RunConfig(dt=1e-3, t_max=5.0, trials=2000, master_seed=3))
    assert v.frequencies_agree


def test_no_go_degenerate():
    a = two_branch_delta_scenario(unit_params(), 0, 0.5)
    v = run_no_go((a, a), RunConfig(dt=1e-2, t_max=2.0, trials=200))
    assert v.verdict == "degenerate"


def test_no_go_requires_shared_occupations():
    a = two_branch_delta_scenario(unit_params(), 4, 0.5)
    b = two_branch_delta_scenario(unit_params(), 3, 0.5)
    with pytest.raises(ValidationError):
        run_no_go((a, b), RunConfig(dt=1e-2, t_max=1.0, trials=100))


def test_freeze_cat(cat):
    res = unitary_freeze_check(cat, RunConfig(dt=1e-2, t_max=2.0, trials=20, scheme="unitary"))
    assert res.passed and res.max_deviation == 0.0


def test_freeze_random_five_branches():
    rng = np.random.default_rng(5)
    occ = rng.integers(0, 6, size=(5, 3)).tolist()
    p = rng.dirichlet(np.ones(5))
    p = p / p.sum()
    p[-1] = 1 - p[:-1].sum()
    sc = multi_branch_scenario(unit_params(), occ, p)
    assert unitary_freeze_check(sc, RunConfig(dt=1e-2, t_max=1.0, trials=10, scheme="unitary")).passed


def test_freeze_catches_leaked_noise(cat, monkeypatch):
    monkeypatch.setitem(engine.SCHEME_FLAGS, "unitary", (True, False, False))
    res = unitary_freeze_check(cat, RunConfig(dt=1e-2, t_max=1.0, trials=10, scheme="unitary"))
    assert not res.passed


def test_freeze_requires_unitary(cat):
    with pytest.raises(ValidationError):
        unitary_freeze_check(cat, RunConfig(dt=1e-2, t_max=1.0, trials=10))


def test_three_way_pattern():
    table = born_requires_dependence_report(ThreeWayConfig(trials=3000, master_seed=4))
    assert table.pattern == EXPECTED_PATTERN
    assert [r.scheme for r in table.rows] == ["physical-drift", "raw-weighted", "coefficient-independent"]
    assert "pattern as expected (pass/pass/fail): yes" in table.text()


def test_three_way_insufficient():
    table = born_requires_dependence_report(ThreeWayConfig(trials=10, t_max=1.0))
    assert table.insufficient and not table.as_expected
    assert "insufficient statistics" in table.text()


def test_three_way_config_round_trip():
    cfg = ThreeWayConfig(occupations=((4, 0), (0, 4), (0, 0)), a_squared=(0.5, 0.3, 0.2), master_seed=3)
    assert ThreeWayConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.raw_horizon() == pytest.approx(0.5 / 16)
    with pytest.raises(ValidationError):
        ThreeWayConfig.from_dict({"bogus": 1})
