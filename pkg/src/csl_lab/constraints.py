"""Published experimental bounds on collapse-model couplings and rate.

Boundary conventions: the electron/nucleon and neutron/proton bounds are
closed intervals, the rate bound is strict.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

from .core import ValidationError

ELEC_NUC_FACTOR = 13.0
N_P_TOLERANCE = 4e-3
LAMBDA_LIMIT = 1e-6  # 1/s, from matter-wave interference


@dataclass(frozen=True)
class CouplingSet:
    alpha_elec_over_nuc: float
    alpha_n_over_p: float
    lam: float
    m_elec_over_nuc: float = 1 / 2000
    m_n_over_p: float = 1.0014

    def __post_init__(self) -> None:
        for name in ("alpha_elec_over_nuc", "alpha_n_over_p", "m_elec_over_nuc", "m_n_over_p"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be a finite non-negative ratio")
        if not self.lam > 0:
            raise ValidationError("lambda must be positive")

    @classmethod
    def mass_proportional(cls, lam: float = 1e-16) -> "CouplingSet":
        return cls(1 / 2000, 1.0014, lam)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CouplingSet":
        d = dict(d)
        if "lambda" not in d:
            raise ValidationError("missing field 'lambda'")
        d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown coupling fields: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc


@dataclass(frozen=True)
class VerdictItem:
    name: str
    bound: str
    value: float
    passed: bool


@dataclass(frozen=True)
class ConstraintVerdict:
    items: tuple[VerdictItem, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(i.passed for i in self.items)

    def failing(self) -> list[str]:
        return [i.name for i in self.items if not i.passed]

    def to_dict(self) -> dict[str, Any]:
        return {"items": [asdict(i) for i in self.items], "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [f"{'constraint':<22}{'bound':<36}{'value':>14}  result"]
        for i in self.items:
            rows.append(f"{i.name:<22}{i.bound:<36}{i.value:>14.6g}  {'pass' if i.passed else 'FAIL'}")
        rows.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def check_electron_nucleon(c: CouplingSet) -> VerdictItem:
    upper = ELEC_NUC_FACTOR * c.m_elec_over_nuc
    ok = 0 <= c.alpha_elec_over_nuc <= upper
    return VerdictItem("electron/nucleon", f"0 <= a_e/a_N <= {upper:.6g}", c.alpha_elec_over_nuc, ok)


def check_neutron_proton(c: CouplingSet) -> VerdictItem:
    # closed bound; the isclose term keeps m + 4e-3 inside despite binary rounding
    d = abs(c.alpha_n_over_p - c.m_n_over_p)
    ok = d <= N_P_TOLERANCE or math.isclose(d, N_P_TOLERANCE, rel_tol=1e-9)
    return VerdictItem("neutron/proton", f"|a_n/a_p - {c.m_n_over_p:g}| <= {N_P_TOLERANCE:g}", c.alpha_n_over_p, ok)


def check_interference_bound(c: CouplingSet) -> VerdictItem:
    return VerdictItem("interference", f"lambda < {LAMBDA_LIMIT:g} /s", c.lam, c.lam < LAMBDA_LIMIT)


def check_all(c: CouplingSet) -> ConstraintVerdict:
    return ConstraintVerdict((check_electron_nucleon(c), check_neutron_proton(c), check_interference_bound(c)))
