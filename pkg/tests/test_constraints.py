import json

import pytest

from csl_lab.constraints import (
    CouplingSet,
    check_all,
    check_electron_nucleon,
    check_interference_bound,
    check_neutron_proton,
)
from csl_lab.core import ValidationError

M_NP = 1.0014


def couplings(**kw):
    base = dict(alpha_elec_over_nuc=1 / 2000, alpha_n_over_p=M_NP, lam=1e-16)
    base.update(kw)
    return CouplingSet(**base)


@pytest.mark.parametrize("ratio, ok", [(1 / 2000, True), (1.0, False), (13 / 2000, True), (13 / 2000 * 1.001, False)])
def test_electron_nucleon(ratio, ok):
    assert check_electron_nucleon(couplings(alpha_elec_over_nuc=ratio)).passed is ok


@pytest.mark.parametrize("ratio, ok", [(M_NP, True), (M_NP + 0.01, False), (M_NP + 4e-3, True), (M_NP - 4e-3, True),
                                       (M_NP + 4.001e-3, False)])
def test_neutron_proton(ratio, ok):
    assert check_neutron_proton(couplings(alpha_n_over_p=ratio)).passed is ok


@pytest.mark.parametrize("lam, ok", [(1e-16, True), (1e-5, False), (1e-6, False), (0.999e-6, True)])
def test_interference(lam, ok):
    assert check_interference_bound(couplings(lam=lam)).passed is ok


def test_mass_proportional_passes():
    v = check_all(CouplingSet.mass_proportional(1e-16))
    assert v.passed and v.failing() == []


def test_equal_coupling_fails_once():
    v = check_all(couplings(alpha_elec_over_nuc=1.0))
    assert not v.passed
    assert v.failing() == ["electron/nucleon"]


def test_large_lambda_fails_interference_only():
    v = check_all(couplings(lam=1.0))
    assert v.failing() == ["interference"]


def test_verdict_serialization():
    v = check_all(CouplingSet.mass_proportional())
    d = json.loads(v.to_json())
    assert d["passed"] is True and len(d["items"]) == 3
    assert "overall: pass" in v.table()


def test_coupling_set_from_dict():
    c = CouplingSet.from_dict({"alpha_elec_over_nuc": 0.0005, "alpha_n_over_p": 1.0014, "lambda": 1e-16})
    assert c == CouplingSet.mass_proportional()
    assert CouplingSet.from_dict(c.to_dict()) == c
    with pytest.raises(ValidationError):
        CouplingSet.from_dict({"alpha_elec_over_nuc": 0.0005, "alpha_n_over_p": 1.0})
    with pytest.raises(ValidationError):
        couplings(lam=0.0)
    with pytest.raises(ValidationError):
        couplings(alpha_elec_over_nuc=-1.0)
