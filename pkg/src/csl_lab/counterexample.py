"""Statistical demonstrations that coefficient-independent noise cannot give |a_k|^2 outcomes.

If the noise measure ignores the amplitudes, the outcome distribution can
depend only on the occupations and the horizon.  Two runs that differ only
in their amplitudes must then agree with each other, and so at most one of
them can match its own |a_k|^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import RunConfig, Scenario, ValidationError, make_params, multi_branch_scenario
from .ensemble import (
    BORN_SIGMA,
    ESS_FRACTION,
    MIN_TRIALS,
    BornResult,
    EnsembleReport,
    InsufficientStatistics,
    _floats,
    born_test,
    derived_seed,
    run_ensemble,
)


@dataclass(frozen=True)
class ReferenceConfig:
    """The fixed configuration every no-go demonstration and doc example uses."""

    delta_n: int = 4
    lam: float = 1.0
    t_max: float = 5.0
    trials: int = 10_000
    dt: float = 1e-3
    # raw-weighted runs stop where lambda * max_k |N_k|^2 * t reaches this value
    raw_horizon_level: float = 0.5


REFERENCE = ReferenceConfig()


def reference_run_config(scheme: str = "coefficient-independent", master_seed: int = 0,
                         ref: ReferenceConfig = REFERENCE) -> RunConfig:
    return RunConfig(dt=ref.dt, t_max=ref.t_max, trials=ref.trials, scheme=scheme, master_seed=master_seed)


def _same_occupations(a: Scenario, b: Scenario) -> bool:
    return (
        a.params == b.params
        and a.initial.cell_count == b.initial.cell_count
        and np.array_equal(a.initial.occupations(), b.initial.occupations())
    )


def two_proportion_z(fa: np.ndarray, na: float, fb: np.ndarray, nb: float) -> np.ndarray:
    pooled = (fa * na + fb * nb) / (na + nb)
    se = np.sqrt(pooled * (1 - pooled) * (1 / na + 1 / nb))
    diff = fa - fb
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, diff / np.where(se > 0, se, 1), np.where(diff == 0, 0.0, np.inf))


@dataclass
class NoGoVerdict:
    report_a: EnsembleReport
    report_b: EnsembleReport
    agreement_z: np.ndarray
    born_a: BornResult | None
    born_b: BornResult | None
    verdict: str

    @property
    def frequencies_agree(self) -> bool:
        return bool(np.all(np.abs(self.agreement_z) <= BORN_SIGMA))

    @property
    def born_violated(self) -> bool:
        return any(b is not None and np.any(np.abs(b.z) > BORN_SIGMA) for b in (self.born_a, self.born_b))

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "frequencies_a": _floats(self.report_a.frequencies),
            "frequencies_b": _floats(self.report_b.frequencies),
            "agreement_z": _floats(self.agreement_z),
            "frequencies_agree": self.frequencies_agree,
            "born_a": None if self.born_a is None else self.born_a.to_dict(),
            "born_b": None if self.born_b is None else self.born_b.to_dict(),
            "born_violated": self.born_violated,
        }


def run_no_go(scenario_pair: tuple[Scenario, Scenario], config: RunConfig) -> NoGoVerdict:
    """Run both scenarios under coefficient-independent noise with distinct derived seeds."""
    a, b = scenario_pair
    if not _same_occupations(a, b):
        raise ValidationError("scenarios must share occupations and params")
    cfg = config.replace(scheme="coefficient-independent")
    rep_a = run_ensemble(a, cfg.replace(master_seed=derived_seed(config.master_seed, 0)))
    rep_b = run_ensemble(b, cfg.replace(master_seed=derived_seed(config.master_seed, 1)))
    if rep_a.decided_ess == 0 or rep_b.decided_ess == 0:
        z = np.zeros(a.initial.k)
        return NoGoVerdict(rep_a, rep_b, z, None, None, "degenerate")
    z = two_proportion_z(rep_a.frequencies, rep_a.decided_ess, rep_b.frequencies, rep_b.decided_ess)
    born_a = born_test(rep_a, rep_a.initial_probs)
    born_b = born_test(rep_b, rep_b.initial_probs)
    v = NoGoVerdict(rep_a, rep_b, z, born_a, born_b, "")
    if cfg.trials < MIN_TRIALS:
        v.verdict = "insufficient statistics"
    elif v.frequencies_agree and v.born_violated:
        v.verdict = "no-go demonstrated"
    else:
        v.verdict = "not demonstrated"
    return v


@dataclass
class FreezeResult:
    passed: bool
    max_deviation: float


def unitary_freeze_check(scenario: Scenario, config: RunConfig) -> FreezeResult:
    """Without noise or damping every p_k(t) must equal p_k(0) to 1e-12."""
    if config.scheme != "unitary":
        raise ValidationError("unitary_freeze_check requires the unitary scheme")
    report = run_ensemble(scenario, config, keep_trajectories=True)
    p0 = report.initial_probs
    dev = max(float(np.abs(t.probs - p0).max()) for t in report.trajectories if not t.failed)
    return FreezeResult(dev <= 1e-12, dev)


@dataclass(frozen=True)
class ThreeWayConfig:
    """Inputs of the physical / raw-weighted / coefficient-independent comparison."""

    occupations: tuple[tuple[int, ...], ...] = ((4,), (0,))
    a_squared: tuple[float, ...] = (0.7, 0.3)
    lam: float = REFERENCE.lam
    t_max: float = REFERENCE.t_max
    dt: float = REFERENCE.dt
    trials: int = REFERENCE.trials
    master_seed: int = 0
    raw_horizon_level: float = REFERENCE.raw_horizon_level

    def scenario(self) -> Scenario:
        return multi_branch_scenario(make_params(self.lam, 1.0, 1.0), [list(o) for o in self.occupations],
                                     self.a_squared, name="three-way")

    def raw_horizon(self) -> float:
        top = max(sum(c * c for c in occ) for occ in self.occupations)
        return self.raw_horizon_level / (self.lam * top)

    def to_dict(self) -> dict[str, Any]:
        return {
            "occupations": [list(o) for o in self.occupations],
            "a_squared": list(self.a_squared),
            "lambda": self.lam,
            "t_max": self.t_max,
            "dt": self.dt,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "raw_horizon_level": self.raw_horizon_level,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ThreeWayConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown no-go config fields: {sorted(unknown)}")
        if "occupations" in d:
            d["occupations"] = tuple(tuple(int(c) for c in o) for o in d["occupations"])
        if "a_squared" in d:
            d["a_squared"] = tuple(float(x) for x in d["a_squared"])
        return cls(**d)


EXPECTED_PATTERN = (True, True, False)


@dataclass
class ThreeWayRow:
    scheme: str
    statistic: str
    horizon: float
    born: BornResult | None
    ess: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.born is not None and self.born.passed

    def to_dict(self) -> dict[str, Any]:
        return {
            "scheme": self.scheme,
            "statistic": self.statistic,
            "horizon": self.horizon,
            "passed": self.passed,
            "max_abs_z": None if self.born is None else float(np.max(np.abs(self.born.z))),
            "frequencies": None if self.born is None else _floats(self.born.frequencies),
            "ess": self.ess,
            "note": self.note,
        }


@dataclass
class ThreeWayTable:
    config: ThreeWayConfig
    rows: list[ThreeWayRow] = field(default_factory=list)
    insufficient: bool = False

    @property
    def pattern(self) -> tuple[bool, ...]:
        return tuple(r.passed for r in self.rows)

    @property
    def as_expected(self) -> bool:
        return not self.insufficient and self.pattern == EXPECTED_PATTERN

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "expected": list(self.config.a_squared),
            "rows": [r.to_dict() for r in self.rows],
            "pattern": ["pass" if p else "fail" for p in self.pattern],
            "expected_pattern": ["pass" if p else "fail" for p in EXPECTED_PATTERN],
            "as_expected": self.as_expected,
            "insufficient_statistics": self.insufficient,
        }

    def text(self) -> str:
        head = f"{'scheme':<26}{'statistic':<10}{'horizon':>10}{'ESS':>10}{'max|z|':>10}  result"
        lines = [f"expected |a_k|^2 = {list(self.config.a_squared)}", head]
        for r in self.rows:
            z = "n/a" if r.born is None else f"{np.max(np.abs(r.born.z)):.2f}"
            res = ("pass" if r.passed else "FAIL") + (f"  ({r.note})" if r.note else "")
            lines.append(f"{r.scheme:<26}{r.statistic:<10}{r.horizon:>10.4g}{r.ess:>10.1f}{z:>10}  {res}")
        if self.insufficient:
            lines.append("insufficient statistics")
        lines.append("pattern as expected (pass/pass/fail): " + ("yes" if self.as_expected else "no"))
        return "\n".join(lines)


def born_requires_dependence_report(config: ThreeWayConfig = ThreeWayConfig()) -> ThreeWayTable:
    """Physical-drift and raw-weighted reproduce |a_k|^2; coefficient-independent does not.

    The raw-weighted row is evaluated at a short horizon, where importance
    weights are still usable, through the weighted mean branch probability.
    """
    sc = config.scenario()
    expected = np.asarray(config.a_squared)
    table = ThreeWayTable(config, insufficient=config.trials < MIN_TRIALS)
    base = RunConfig(dt=config.dt, t_max=config.t_max, trials=config.trials, master_seed=config.master_seed)
    t_raw = config.raw_horizon()
    plans = [
        ("physical-drift", "outcome", base),
        ("raw-weighted", "mean_p", base.replace(t_max=t_raw, dt=min(config.dt, t_raw / 32), sample_times=[])),
        ("coefficient-independent", "outcome", base),
    ]
    for i, (scheme, stat, cfg) in enumerate(plans):
        cfg = cfg.replace(scheme=scheme, master_seed=derived_seed(config.master_seed, i))
        report = run_ensemble(sc, cfg)
        note = ""
        try:
            born = born_test(report, expected, statistic=stat)
        except InsufficientStatistics as exc:
            born, note = None, str(exc)
        ess = float(report.ess[-1]) if stat == "mean_p" else float(report.decided_ess)
        if scheme == "raw-weighted" and ess < ESS_FRACTION * config.trials:
            note = "low ESS"
        table.rows.append(ThreeWayRow(scheme, stat, cfg.t_max, born, ess, note))
    return table


def pattern_stability(config: ThreeWayConfig, seeds: Sequence[int]) -> tuple[int, list[tuple[bool, ...]]]:
    """How many seeds reproduce the expected pass/pass/fail pattern."""
    patterns = []
    for s in seeds:
        t = born_requires_dependence_report(ThreeWayConfig(**{**config.__dict__, "master_seed": int(s)}))
        patterns.append(t.pattern)
    return sum(p == EXPECTED_PATTERN for p in patterns), patterns
