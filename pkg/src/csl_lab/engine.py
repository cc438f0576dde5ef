"""Single-trajectory collapse evolution with H = 0.

For a given noise path the state equation integrates to an exponential,
so each branch's log-magnitude is advanced exactly:

    log|alpha_k| += sum_n N_nk * dB_n - lambda * N_nk**2 * dt

Raw increments dB_n are Gaussian with variance lambda*dt; with that scale the
squared norm is a mean-one martingale under the raw measure.  The
physical-drift scheme adds 2*lambda*<eta_n>*dt to each increment, which is
the raw measure reweighted by the squared norm.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np
from scipy.special import logsumexp

from .core import RunConfig, Scenario, SuperposedState, ValidationError

# (noise, drift, damping) per scheme; patched by tests to build broken fixtures.
SCHEME_FLAGS: dict[str, tuple[bool, bool, bool]] = {
    "raw-weighted": (True, False, True),
    "physical-drift": (True, True, True),
    "coefficient-independent": (True, False, True),
    "unitary": (False, False, False),
}

# Noise draws are materialized in blocks of at most this many numbers.
NOISE_BLOCK = 1 << 20


class AmplitudeOverflow(ArithmeticError):
    def __init__(self, branch: int):
        super().__init__(f"amplitude overflow/underflow in branch {branch}")
        self.branch = branch


class DegenerateState(ArithmeticError):
    pass


@dataclass(frozen=True)
class NoiseIncrement:
    db: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.db)):
            raise ValidationError("noise increment must be finite")


def trial_rng(master_seed: int, trial_index: int) -> np.random.Generator:
    """Per-trial stream: SeedSequence hashes (master_seed, trial_index) into PCG64 state."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), int(trial_index)])))


def sample_raw_block(rng: np.random.Generator, dt: float, cell_count: int, lam: float, steps: int) -> np.ndarray:
    """(steps, cell_count) Gaussian increments with variance lam*dt, drawn step-major in cell order."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    return rng.standard_normal((steps, cell_count)) * math.sqrt(lam * dt)


def sample_raw_increments(rng: np.random.Generator, dt: float, cell_count: int, lam: float) -> NoiseIncrement:
    return NoiseIncrement(sample_raw_block(rng, dt, cell_count, lam, 1)[0])


def squared_norm(state: SuperposedState) -> float:
    """log sum_k |alpha_k|^2."""
    return float(logsumexp(2.0 * state.log_magnitudes()))


def _probs_and_log_norm(logs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise branch probabilities and log squared norm from log-magnitudes."""
    logs = np.atleast_2d(logs)
    top = logs.max(axis=1, keepdims=True)
    e = np.exp(2.0 * (logs - top))
    tot = e.sum(axis=1)
    return e / tot[:, None], 2.0 * top[:, 0] + np.log(tot)


def branch_probabilities(state: SuperposedState) -> np.ndarray:
    return _probs_and_log_norm(state.log_magnitudes())[0][0]


def apply_step(state: SuperposedState, increment: NoiseIncrement, dt: float, lam: float) -> SuperposedState:
    db = np.asarray(increment.db, dtype=np.float64)
    if db.shape != (state.cell_count,):
        raise ValidationError("increment length must equal cell_count")
    occ = state.occupations()
    with np.errstate(over="ignore", invalid="ignore"):
        new = state.log_magnitudes() + occ @ db - lam * (occ**2).sum(axis=1) * dt
    bad = np.flatnonzero(~np.isfinite(new))
    if bad.size:
        raise AmplitudeOverflow(int(bad[0]))
    return state.with_log_magnitudes(new)


def closed_form(scenario: Scenario, b_total: np.ndarray, t: float) -> np.ndarray:
    """Branch log-magnitudes at time t for accumulated Brownian values ``b_total``."""
    state = scenario.initial
    b = np.asarray(b_total, dtype=np.float64)
    if b.shape != (state.cell_count,):
        raise ValidationError("b_total length must equal cell_count")
    if t < 0:
        raise ValidationError("t must be non-negative")
    occ = state.occupations()
    return state.log_magnitudes() + occ @ b - scenario.params.lam * (occ**2).sum(axis=1) * t


def physical_drift(state: SuperposedState, dt: float, lam: float) -> np.ndarray:
    """Per-cell drift 2*lam*<eta_n>*dt, expectations taken with the branch probabilities."""
    logm = state.log_magnitudes()
    if not np.any(np.isfinite(logm)):
        raise DegenerateState("state degenerate: every branch underflowed")
    p = branch_probabilities(state)
    return 2.0 * lam * (p @ state.occupations()) * dt


@numba.njit(cache=True, nogil=True)
def _advance(logm, occ, occ_sq, noise, step0, dt, lam, use_drift, use_damping, collapse_level,
             decision_level, rec_steps, rec_ptr, rec_out, status):
    """Advance one trial through ``noise.shape[0]`` steps starting at step ``step0``.

    status = [t_decision_step, winner, t_level_step, failed_step, failed_branch]; -1 means unset.
    Returns the updated record pointer.
    """
    k, n = occ.shape
    p = np.empty(k)
    db = np.empty(n)
    for s in range(noise.shape[0]):
        step = step0 + s + 1
        if use_drift:
            mx = logm[0]
            for j in range(1, k):
                if logm[j] > mx:
                    mx = logm[j]
            tot = 0.0
            for j in range(k):
                p[j] = math.exp(2.0 * (logm[j] - mx))
                tot += p[j]
            for c in range(n):
                eta = 0.0
                for j in range(k):
                    eta += p[j] * occ[j, c]
                db[c] = noise[s, c] + 2.0 * lam * (eta / tot) * dt
        else:
            for c in range(n):
                db[c] = noise[s, c]
        for j in range(k):
            acc = 0.0
            for c in range(n):
                acc += occ[j, c] * db[c]
            if use_damping:
                acc -= lam * occ_sq[j] * dt
            logm[j] += acc
            if not math.isfinite(logm[j]):
                status[3] = step
                status[4] = j
                return rec_ptr
        best = 0
        for j in range(1, k):
            if logm[j] > logm[best]:
                best = j
        if k > 1:
            second = -np.inf
            tot = 0.0
            for j in range(k):
                tot += math.exp(2.0 * (logm[j] - logm[best]))
                if j != best and logm[j] > second:
                    second = logm[j]
            if status[2] < 0 and second - logm[best] <= -collapse_level:
                status[2] = step
            if status[0] < 0 and 1.0 / tot >= decision_level:
                status[0] = step
                status[1] = best
        while rec_ptr < rec_steps.shape[0] and rec_steps[rec_ptr] == step:
            for j in range(k):
                rec_out[rec_ptr, j] = logm[j]
            rec_ptr += 1
    return rec_ptr


@dataclass
class Trajectory:
    times: np.ndarray
    probs: np.ndarray
    log_sq_norm: np.ndarray
    log_magnitudes: np.ndarray
    winner: int | None = None
    final_leader: int | None = None
    t_decision: float | None = None
    t_level: float | None = None
    log_weight: float = 0.0
    failed: bool = False
    t_failure: float | None = None
    trial_index: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.probs.shape[1]
        w.writerow(["t", *[f"p_{j + 1}" for j in range(k)], "log_sq_norm"])
        for t, p, ln in zip(self.times, self.probs, self.log_sq_norm):
            w.writerow([repr(float(t)), *[repr(float(x)) for x in p], repr(float(ln))])
        return buf.getvalue()

    def trailer(self) -> dict[str, Any]:
        return {
            "winner": None if self.winner is None else self.winner + 1,
            "t_decision": self.t_decision,
            "t_level": self.t_level,
            "log_weight": self.log_weight,
            "failed": self.failed,
            "t_failure": self.t_failure,
        }

    def trailer_json(self) -> str:
        return json.dumps(self.trailer())


def evolve(scenario: Scenario, config: RunConfig, trial_index: int) -> Trajectory:
    """Evolve one trial; a pure function of (scenario, config, trial_index)."""
    state = scenario.initial
    lam = scenario.params.lam
    use_noise, use_drift, use_damping = SCHEME_FLAGS[config.scheme]
    logm = state.log_magnitudes().copy()
    occ = np.ascontiguousarray(state.occupations())
    occ_sq = (occ**2).sum(axis=1)
    k, n = occ.shape
    rec_steps = config.record_steps()
    rec_out = np.full((rec_steps.size, k), np.nan)
    rec_out[0] = logm
    rec_ptr = 1
    status = np.full(5, -1, dtype=np.int64)
    n_steps = config.n_steps
    rng = trial_rng(config.master_seed, trial_index) if use_noise else None
    block = max(1, NOISE_BLOCK // max(n, 1))
    step = 0
    while step < n_steps and status[3] < 0:
        m = min(block, n_steps - step)
        if use_noise:
            noise = sample_raw_block(rng, config.dt, n, lam, m)
        else:
            noise = np.zeros((m, n))
        rec_ptr = _advance(logm, occ, occ_sq, noise, step, config.dt, lam, use_drift, use_damping,
                           config.collapse_level, config.decision_level, rec_steps, rec_ptr, rec_out, status)
        step += m

    failed = status[3] >= 0
    times = rec_steps[:rec_ptr] * config.dt
    logs = rec_out[:rec_ptr]
    probs, log_sq = _probs_and_log_norm(logs)
    traj = Trajectory(
        times=times,
        probs=probs,
        log_sq_norm=log_sq,
        log_magnitudes=logs,
        winner=int(status[1]) if status[0] >= 0 else None,
        final_leader=None if failed else int(np.argmax(logs[-1])),
        t_decision=float(status[0] * config.dt) if status[0] >= 0 else None,
        t_level=float(status[2] * config.dt) if status[2] >= 0 else None,
        log_weight=float(log_sq[-1]) if config.scheme == "raw-weighted" and not failed else 0.0,
        failed=bool(failed),
        t_failure=float(status[3] * config.dt) if failed else None,
        trial_index=int(trial_index),
    )
    if failed:
        traj.meta["failed_branch"] = int(status[4])
    if k == 1:
        # a lone branch is decided from the start
        traj.winner = 0
        traj.t_decision = 0.0
    return traj
