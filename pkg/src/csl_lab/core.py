"""Domain types and scenario builders.

Amplitudes live in log space as ``(log_magnitude, phase)`` pairs.  Occupation
counts of order 1e10 make linear magnitudes overflow after a single step,
while the collapse update is exact in log space.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

NORM_TOL = 1e-12
MAX_EXACT_COUNT = 2**53
DEFAULT_CELL_CAP = 10**6
SCHEMES = ("raw-weighted", "physical-drift", "coefficient-independent", "unitary")


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True)
class ModelParams:
    """Collapse rate (1/s), cell volume (cm^3) and particle density (1/cm^3)."""

    lam: float
    cell_volume: float
    density: float

    def __post_init__(self) -> None:
        for name in ("lam", "cell_volume", "density"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{_public(name)} must be finite")
        if self.lam <= 0:
            raise ValidationError("lambda must be positive")
        if self.cell_volume <= 0:
            raise ValidationError("cell_volume must be positive")
        if self.density < 0:
            raise ValidationError("density must be non-negative")

    @property
    def per_cell_count(self) -> float:
        return self.density * self.cell_volume

    def to_dict(self) -> dict[str, Any]:
        return {"lambda": self.lam, "cell_volume": self.cell_volume, "density": self.density}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        return make_params(d["lambda"], d["cell_volume"], d["density"])


def _public(name: str) -> str:
    return "lambda" if name == "lam" else name


@dataclass(frozen=True)
class OccupationVector:
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        for c in self.counts:
            if not isinstance(c, (int, np.integer)):
                raise ValidationError(f"occupation counts must be integers, got {c!r}")
            if c < 0:
                raise ValidationError("occupation counts must be non-negative")
            if c > MAX_EXACT_COUNT:
                raise ValidationError("occupation count exceeds 2**53")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def __len__(self) -> int:
        return len(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64)


@dataclass(frozen=True)
class Branch:
    log_magnitude: float
    phase: float
    occupation: OccupationVector

    @property
    def underflowed(self) -> bool:
        return not math.isfinite(self.log_magnitude)

    def to_dict(self) -> dict[str, Any]:
        return {
            "log_magnitude": self.log_magnitude,
            "phase": self.phase,
            "occupation": {"counts": list(self.occupation.counts)},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Branch":
        return cls(
            float(d["log_magnitude"]),
            float(d.get("phase", 0.0)),
            OccupationVector(tuple(d["occupation"]["counts"])),
        )


@dataclass(frozen=True)
class SuperposedState:
    """A sum of K number-operator eigenstates.

    The squared norm is only required to be 1 for freshly built states; the
    collapse dynamics change it on purpose.
    """

    branches: tuple[Branch, ...]
    cell_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def k(self) -> int:
        return len(self.branches)

    def log_magnitudes(self) -> np.ndarray:
        return np.array([b.log_magnitude for b in self.branches], dtype=np.float64)

    def occupations(self) -> np.ndarray:
        """(K, N) float array of occupation counts."""
        return np.array([b.occupation.counts for b in self.branches], dtype=np.float64).reshape(
            self.k, self.cell_count
        )

    def with_log_magnitudes(self, log_mags: Sequence[float]) -> "SuperposedState":
        return SuperposedState(
            tuple(Branch(float(m), b.phase, b.occupation) for m, b in zip(log_mags, self.branches)),
            self.cell_count,
        )

    def to_dict(self) -> dict[str, Any]:
        return {"branches": [b.to_dict() for b in self.branches], "cell_count": self.cell_count}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SuperposedState":
        return cls(tuple(Branch.from_dict(b) for b in d["branches"]), int(d["cell_count"]))


@dataclass(frozen=True)
class Scenario:
    name: str
    params: ModelParams
    initial: SuperposedState

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "params": self.params.to_dict(), "initial": self.initial.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        scenario = cls(str(d["name"]), ModelParams.from_dict(d["params"]), SuperposedState.from_dict(d["initial"]))
        problems = validate(scenario)
        if problems:
            raise ValidationError("; ".join(problems))
        return scenario

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class RunConfig:
    dt: float
    t_max: float
    trials: int
    collapse_level: float = 3.0
    decision_level: float = 1 - 1e-6
    scheme: str = "physical-drift"
    master_seed: int = 0
    sample_times: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError("dt must be positive")
        if not self.t_max >= self.dt:
            raise ValidationError("t_max must be at least dt")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ValidationError("trials must be a positive integer")
        if not 0.5 < self.decision_level < 1:
            raise ValidationError("decision_level must lie in (0.5, 1)")
        if self.collapse_level <= 0:
            raise ValidationError("collapse_level must be positive")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("master_seed must be an unsigned 64-bit integer")
        times = tuple(float(t) for t in self.sample_times)
        if any(t < 0 or t > self.t_max * (1 + 1e-12) for t in times):
            raise ValidationError("sample_times must lie in [0, t_max]")
        if list(times) != sorted(times):
            raise ValidationError("sample_times must be sorted")
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "sample_times", times)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_max / self.dt)))

    def record_steps(self) -> np.ndarray:
        """Step indices at which the state is recorded (always includes 0 and the horizon)."""
        return _record_steps(self.dt, self.t_max, self.n_steps, self.sample_times).copy()

    def replace(self, **changes: Any) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dt": self.dt,
            "t_max": self.t_max,
            "trials": self.trials,
            "collapse_level": self.collapse_level,
            "decision_level": self.decision_level,
            "scheme": self.scheme,
            "master_seed": self.master_seed,
            "sample_times": list(self.sample_times),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown run config fields: {sorted(unknown)}")
        if "sample_times" in known:
            known["sample_times"] = tuple(known["sample_times"])
        return cls(**known)


@functools.lru_cache(maxsize=64)
def _record_steps(dt: float, t_max: float, n_steps: int, sample_times: tuple[float, ...]) -> np.ndarray:
    times = sample_times or tuple(np.linspace(0.0, t_max, 51))
    steps = {min(n_steps, int(round(t / dt))) for t in times}
    steps.update((0, n_steps))
    return np.array(sorted(steps), dtype=np.int64)


def make_params(lam: float, cell_volume: float, density: float) -> ModelParams:
    return ModelParams(float(lam), float(cell_volume), float(density))


def unit_params() -> ModelParams:
    return make_params(1.0, 1.0, 1.0)


def pointer_params() -> ModelParams:
    """lambda = 1e-16 /s, 1e-15 cm^3 cells, 3e25 particles/cm^3.

    The density is back-derived so that a filled cell holds 3e10 particles;
    it is not an independently sourced figure.
    """
    return make_params(1e-16, 1e-15, 3e25)


def _count(value: float) -> int:
    if not math.isfinite(value) or value < 0:
        raise ValidationError(f"invalid particle count {value!r}")
    if value > MAX_EXACT_COUNT:
        raise ValidationError("occupation count exceeds 2**53")
    return int(round(value))


def state_from_probabilities(
    occupations: Sequence[Sequence[int]], probabilities: Sequence[float], phases: Sequence[float] | None = None
) -> SuperposedState:
    probs = [float(p) for p in probabilities]
    if len(occupations) != len(probs) or not probs:
        raise ValidationError("need one probability per branch")
    if any(not 0 < p <= 1 for p in probs):
        raise ValidationError("branch probabilities must lie in (0, 1]")
    if abs(math.fsum(probs) - 1.0) > NORM_TOL:
        raise ValidationError("branch probabilities must sum to 1")
    phases = [0.0] * len(probs) if phases is None else [float(x) for x in phases]
    cells = len(occupations[0])
    branches = tuple(
        Branch(0.5 * math.log(p), ph, OccupationVector(tuple(_count(c) for c in occ)))
        for occ, p, ph in zip(occupations, probs, phases)
    )
    state = SuperposedState(branches, cells)
    problems = _state_violations(state)
    if problems:
        raise ValidationError("; ".join(problems))
    return state


def two_branch_delta_scenario(params: ModelParams, delta_n: float, a1_squared: float) -> Scenario:
    """One cell holding ``delta_n`` particles in branch 1 and none in branch 2."""
    if not 0 < a1_squared < 1:
        raise ValidationError("a1_squared must lie strictly between 0 and 1")
    if delta_n < 0:
        raise ValidationError("delta_n must be non-negative")
    n = _count(delta_n)
    state = state_from_probabilities([[n], [0]], [a1_squared, 1.0 - a1_squared])
    return Scenario(f"two-branch dN={n} a1^2={a1_squared:g}", params, state)


def pointer_scenario(
    params: ModelParams, occupied_cells: int, a1_squared: float, cell_cap: int = DEFAULT_CELL_CAP
) -> Scenario:
    """Pointer in two positions: branch 1 fills cells 0..m-1, branch 2 fills m..2m-1."""
    if occupied_cells < 1:
        raise ValidationError("occupied_cells must be at least 1")
    if not 0 < a1_squared < 1:
        raise ValidationError("a1_squared must lie strictly between 0 and 1")
    m = int(occupied_cells)
    if 2 * m > cell_cap:
        raise ValidationError("cell count exceeds cap")
    per_cell = _count(params.per_cell_count)
    first = [per_cell] * m + [0] * m
    second = [0] * m + [per_cell] * m
    state = state_from_probabilities([first, second], [a1_squared, 1.0 - a1_squared])
    return Scenario(f"pointer m={m} a1^2={a1_squared:g}", params, state)


def multi_branch_scenario(
    params: ModelParams, occupations: Sequence[Sequence[int]], a_squared: Sequence[float], name: str | None = None
) -> Scenario:
    state = state_from_probabilities(occupations, a_squared)
    return Scenario(name or f"K={state.k} branches", params, state)


def _state_violations(state: SuperposedState, check_norm: bool = True) -> list[str]:
    problems = []
    if state.k < 1:
        problems.append("state has no branches")
        return problems
    if any(len(b.occupation) != state.cell_count for b in state.branches):
        problems.append("occupation length mismatch")
    if any(b.underflowed for b in state.branches):
        problems.append("branch log_magnitude not finite")
    elif check_norm:
        total = math.fsum(math.exp(2 * b.log_magnitude) for b in state.branches)
        if abs(total - 1.0) > NORM_TOL:
            problems.append(f"initial norm != 1 (got {total:.15g})")
    return problems


def validate(scenario: Scenario) -> list[str]:
    """Every invariant violation of ``scenario``; an empty list means ok."""
    problems = []
    if not isinstance(scenario.params, ModelParams):
        problems.append("params missing")
    problems.extend(_state_violations(scenario.initial))
    return problems


def scenario_from_config(d: dict[str, Any]) -> Scenario:
    """Build a scenario from either its serialized form or a builder recipe.

    Builder recipes look like ``{"builder": "two_branch_delta", "params": {...}, ...}``.
    """
    if "builder" not in d:
        return Scenario.from_dict(d)
    params = ModelParams.from_dict(d["params"])
    builder = d["builder"]
    if builder == "two_branch_delta":
        sc = two_branch_delta_scenario(params, d["delta_n"], d["a1_squared"])
    elif builder == "pointer":
        sc = pointer_scenario(params, d["occupied_cells"], d["a1_squared"], d.get("cell_cap", DEFAULT_CELL_CAP))
    elif builder == "multi_branch":
        sc = multi_branch_scenario(params, d["occupations"], d["a_squared"])
    else:
        raise ValidationError(f"unknown scenario builder {builder!r}")
    if "name" in d:
        sc = Scenario(d["name"], sc.params, sc.initial)
    return sc
