"""Monte Carlo ensembles: outcome statistics, martingale checks, collapse timing."""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import ModelParams, RunConfig, Scenario, ValidationError, two_branch_delta_scenario
from .engine import Trajectory, branch_probabilities, evolve

log = logging.getLogger(__name__)

MIN_TRIALS = 100
MIN_COLLAPSED = 100
BORN_SIGMA = 3.0
MARTINGALE_SIGMA = 5.0
ESS_FRACTION = 0.1
DETECTION_LIMIT = 1e-3  # seconds; faster collapse is not perceptible
MAX_FAILURE_FRACTION = 0.01


class LowESSWarning(RuntimeWarning):
    pass


class InsufficientStatistics(ValueError):
    pass


def effective_sample_size(log_weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2 computed from log weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        return 0.0
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


def weighted_quantiles(values: np.ndarray, weights: np.ndarray, qs: Sequence[float]) -> list[float]:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cdf = np.cumsum(w) / w.sum()
    return [float(v[min(np.searchsorted(cdf, q), v.size - 1)]) for q in qs]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CSL_LAB_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def run_trials(scenario: Scenario, config: RunConfig, indices: Iterable[int] | None = None) -> list[Trajectory]:
    """Evolve every trial; output order follows trial index whatever the thread count."""
    idx = list(range(config.trials) if indices is None else indices)
    threads = min(_threads(), max(1, len(idx) // 256))
    if threads == 1:
        return [evolve(scenario, config, i) for i in idx]
    chunks = [idx[j::threads] for j in range(threads)]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: [evolve(scenario, config, i) for i in c], chunks))
    out: list[Trajectory] = [None] * len(idx)  # type: ignore[list-item]
    for j, part in enumerate(parts):
        out[j::threads] = part
    return out


@dataclass
class EnsembleReport:
    scenario: Scenario
    config: RunConfig
    times: np.ndarray
    outcome_counts: np.ndarray
    undecided: float
    decided_ess: float
    mean_p: np.ndarray
    se_p: np.ndarray
    ess: np.ndarray
    mean_sq_norm: np.ndarray | None
    se_sq_norm: np.ndarray | None
    collapse_quantiles: dict[str, float] | None
    collapsed: int
    failures: int
    healthy: bool
    t_levels: np.ndarray = field(repr=False)
    level_weights: np.ndarray = field(repr=False)
    trajectories: list[Trajectory] | None = field(default=None, repr=False)

    @property
    def scheme(self) -> str:
        return self.config.scheme

    @property
    def trials(self) -> int:
        return self.config.trials

    @property
    def k(self) -> int:
        return self.outcome_counts.size

    @property
    def initial_probs(self) -> np.ndarray:
        return branch_probabilities(self.scenario.initial)

    @property
    def frequencies(self) -> np.ndarray:
        total = self.outcome_counts.sum()
        return self.outcome_counts / total if total > 0 else np.full(self.k, np.nan)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.to_dict(),
            "config": self.config.to_dict(),
            "scheme": self.scheme,
            "trials": self.trials,
            "outcome_counts": _floats(self.outcome_counts),
            "frequencies": _floats(self.frequencies),
            "undecided": self.undecided,
            "times": _floats(self.times),
            "mean_p": [_floats(r) for r in self.mean_p],
            "se_p": [_floats(r) for r in self.se_p],
            "ess": _floats(self.ess),
            "mean_sq_norm": None if self.mean_sq_norm is None else _floats(self.mean_sq_norm),
            "se_sq_norm": None if self.se_sq_norm is None else _floats(self.se_sq_norm),
            "collapse_quantiles": self.collapse_quantiles,
            "collapsed": self.collapsed,
            "failures": self.failures,
            "healthy": self.healthy,
        }


def _floats(a: Iterable[float]) -> list[float | None]:
    return [float(x) if math.isfinite(x) else None for x in np.asarray(a, dtype=np.float64).ravel()]


def _weighted_mean_se(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Self-normalized mean over axis 0 with delta-method standard error."""
    wn = w / w.sum(axis=0, keepdims=True)
    mean = (wn[..., None] * x).sum(axis=0) if x.ndim == 3 else (wn * x).sum(axis=0)
    if x.ndim == 3:
        var = (wn[..., None] ** 2 * (x - mean) ** 2).sum(axis=0)
    else:
        var = (wn**2 * (x - mean) ** 2).sum(axis=0)
    return mean, np.sqrt(var)


def summarize(scenario: Scenario, config: RunConfig, trajs: Sequence[Trajectory], keep: bool = False) -> EnsembleReport:
    k = scenario.initial.k
    ok = [t for t in trajs if not t.failed]
    failures = len(trajs) - len(ok)
    if not ok:
        raise ValidationError("every trajectory failed")
    times = ok[0].times
    probs = np.stack([t.probs for t in ok])  # (M, R, K)
    log_sq = np.stack([t.log_sq_norm for t in ok])  # (M, R)
    weighted = config.scheme == "raw-weighted"

    if weighted:
        lw_t = log_sq
        w_t = np.exp(lw_t - lw_t.max(axis=0, keepdims=True))
        mean_p, se_p = _weighted_mean_se(probs, w_t)
        ess = np.array([effective_sample_size(lw_t[:, r]) for r in range(lw_t.shape[1])])
        norms = np.exp(log_sq)
        mean_sq = norms.mean(axis=0)
        se_sq = norms.std(axis=0, ddof=1) / math.sqrt(len(ok)) if len(ok) > 1 else np.zeros_like(mean_sq)
        final_lw = np.array([t.log_weight for t in ok])
    else:
        mean_p = probs.mean(axis=0)
        se_p = probs.std(axis=0, ddof=1) / math.sqrt(len(ok)) if len(ok) > 1 else np.zeros_like(mean_p)
        ess = np.full(times.size, float(len(ok)))
        mean_sq = se_sq = None
        final_lw = np.zeros(len(ok))

    counts = np.zeros(k)
    winners = np.array([-1 if t.winner is None else t.winner for t in ok])
    w_final = np.exp(final_lw - final_lw.max())
    w_final = w_final / w_final.sum() * len(ok)  # weighted counts keep the trial scale
    np.add.at(counts, winners[winners >= 0], w_final[winners >= 0])
    undecided = float(w_final[winners < 0].sum())
    decided_ess = effective_sample_size(final_lw[winners >= 0]) if weighted else float((winners >= 0).sum())

    levels = np.array([np.nan if t.t_level is None else t.t_level for t in ok])
    hit = np.isfinite(levels)
    quantiles = None
    if hit.sum() >= MIN_COLLAPSED:
        q25, q50, q75 = weighted_quantiles(levels[hit], w_final[hit], (0.25, 0.5, 0.75))
        quantiles = {"q25": q25, "median": q50, "q75": q75}

    healthy = failures <= MAX_FAILURE_FRACTION * len(trajs)
    if not healthy:
        log.warning("%d of %d trajectories failed", failures, len(trajs))
    if weighted and ess[-1] < ESS_FRACTION * len(ok):
        warnings.warn(
            f"raw-weighted ESS {ess[-1]:.1f} is below {ESS_FRACTION:g} x {len(ok)} trials", LowESSWarning, stacklevel=3
        )
    return EnsembleReport(
        scenario=scenario,
        config=config,
        times=times,
        outcome_counts=counts,
        undecided=undecided,
        decided_ess=decided_ess,
        mean_p=mean_p,
        se_p=se_p,
        ess=ess,
        mean_sq_norm=mean_sq,
        se_sq_norm=se_sq,
        collapse_quantiles=quantiles,
        collapsed=int(hit.sum()),
        failures=failures,
        healthy=healthy,
        t_levels=levels[hit],
        level_weights=w_final[hit],
        trajectories=list(trajs) if keep else None,
    )


def run_ensemble(scenario: Scenario, config: RunConfig, keep_trajectories: bool = False) -> EnsembleReport:
    return summarize(scenario, config, run_trials(scenario, config), keep=keep_trajectories)


@dataclass
class BornResult:
    statistic: str
    frequencies: np.ndarray
    expected: np.ndarray
    se: np.ndarray
    z: np.ndarray
    n_eff: float
    passed: bool
    insufficient: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "statistic": self.statistic,
            "frequencies": _floats(self.frequencies),
            "expected": _floats(self.expected),
            "se": _floats(self.se),
            "z": _floats(self.z),
            "n_eff": self.n_eff,
            "passed": self.passed,
            "insufficient_statistics": self.insufficient,
        }


ROUNDOFF = 1e-12


def _z(diff: np.ndarray, se: np.ndarray) -> np.ndarray:
    """diff/se, with roundoff-sized differences and errors treated as exact zeros."""
    diff = np.where(np.abs(diff) <= ROUNDOFF, 0.0, diff)
    live = se > ROUNDOFF
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(live, diff / np.where(live, se, 1.0), np.where(diff == 0, 0.0, np.copysign(np.inf, diff)))


def born_test(
    report: EnsembleReport, expected: Sequence[float], statistic: str = "outcome", sigma: float = BORN_SIGMA
) -> BornResult:
    """z-scores of observed outcome frequencies against ``expected``.

    ``statistic="outcome"`` counts declared winners (binomial standard errors
    under the null, n = decided trials or their ESS).  ``statistic="mean_p"``
    uses the ensemble mean branch probability at the horizon, which is the
    finite-time average of the branch ratio.
    """
    e = np.asarray(expected, dtype=np.float64)
    if e.shape != (report.k,) or abs(e.sum() - 1) > 1e-9:
        raise ValidationError("expected must be a probability vector with one entry per branch")
    if statistic == "outcome":
        n = report.decided_ess
        if n <= 0:
            raise InsufficientStatistics("zero-variance report: no trial reached a decision")
        freq = report.frequencies
        se = np.sqrt(e * (1 - e) / n)
    elif statistic == "mean_p":
        freq = report.mean_p[-1]
        se = report.se_p[-1]
        n = float(report.ess[-1])
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    if not np.any(se > ROUNDOFF):
        raise InsufficientStatistics("zero-variance report")
    z = _z(freq - e, se)
    insufficient = report.trials < MIN_TRIALS
    return BornResult(statistic, freq, e, se, z, float(n), bool(np.all(np.abs(z) <= sigma)) and not insufficient,
                      insufficient)


@dataclass
class MartingaleResult:
    passed: bool
    max_abs_z: float
    z: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "max_abs_z": self.max_abs_z}


def martingale_test(report: EnsembleReport, sigma: float = MARTINGALE_SIGMA) -> MartingaleResult:
    """Raw scheme: mean squared norm stays 1.  Physical scheme: mean p_k(t) stays |a_k|^2."""
    scheme = report.scheme
    if scheme == "unitary":
        dev = np.abs(report.mean_p - report.initial_probs).max()
        return MartingaleResult(bool(dev <= 1e-12), 0.0, np.zeros(report.times.size))
    later = report.times > 0
    if scheme == "raw-weighted":
        z = _z(report.mean_sq_norm[later] - 1.0, report.se_sq_norm[later])
    elif scheme == "physical-drift":
        z = _z(report.mean_p[later] - report.initial_probs, report.se_p[later])
    else:
        raise ValidationError(f"martingale test does not apply to the {scheme} scheme")
    worst = float(np.abs(z).max()) if z.size else 0.0
    return MartingaleResult(worst <= sigma, worst, z)


@dataclass(frozen=True)
class CollapseTimes:
    q25: float
    median: float
    q75: float
    count: int

    def to_dict(self) -> dict[str, Any]:
        return {"q25": self.q25, "median": self.median, "q75": self.q75, "count": self.count}


def collapse_time_summary(report: EnsembleReport, min_collapsed: int = MIN_COLLAPSED) -> CollapseTimes:
    n = report.t_levels.size
    if n == 0:
        raise InsufficientStatistics("no trials collapsed")
    if n < min_collapsed:
        raise InsufficientStatistics(f"only {n} trials collapsed; need {min_collapsed}")
    q25, q50, q75 = weighted_quantiles(report.t_levels, report.level_weights, (0.25, 0.5, 0.75))
    return CollapseTimes(q25, q50, q75, n)


def predicted_collapse_time(lam: float, delta_n: float, level: float = 3.0) -> float:
    """t = level / (lambda * dN^2); infinite when dN = 0."""
    if delta_n == 0:
        return math.inf
    return level / (lam * delta_n**2)


@dataclass
class ScalingFit:
    points: list[tuple[float, float]]
    slope: float
    intercept: float
    residual: float
    summaries: list[CollapseTimes] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "points": [{"delta_n": d, "median_t_level": t} for d, t in self.points],
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
        }


def derived_seed(master_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


def collapse_point(
    params: ModelParams, delta_n: float, config: RunConfig, index: int = 0, a1_squared: float = 0.5,
    rescale_time: bool = True,
) -> CollapseTimes:
    """Collapse-time quartiles for one dN of a scaling study (see ``scaling_study``)."""
    scale = 1.0 / delta_n**2 if rescale_time else 1.0
    cfg = config.replace(
        dt=config.dt * scale,
        t_max=config.t_max * scale,
        sample_times=[t * scale for t in config.sample_times],
        master_seed=derived_seed(config.master_seed, index, int(delta_n)),
    )
    return collapse_time_summary(run_ensemble(two_branch_delta_scenario(params, delta_n, a1_squared), cfg))


def scaling_study(
    params: ModelParams,
    delta_n_list: Sequence[float],
    config: RunConfig,
    a1_squared: float = 0.5,
    rescale_time: bool = True,
) -> ScalingFit:
    """Median first-passage time to the collapse level for each dN, and its log-log slope.

    With ``rescale_time`` the config's dt and t_max are read in units of
    1/(lambda dN^2) relative to dN = 1, so every point is resolved with the same
    number of steps per collapse time.  Each point gets its own derived seed.
    """
    distinct = sorted(set(float(d) for d in delta_n_list))
    if len(distinct) < 3:
        raise ValidationError("need >= 3 distinct values")
    summaries = [collapse_point(params, dn, config, i, a1_squared, rescale_time) for i, dn in enumerate(distinct)]
    points = [(dn, s.median) for dn, s in zip(distinct, summaries)]
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return ScalingFit(points, float(slope), float(intercept), resid, summaries)


def decay_slope(trajectory: Trajectory, winner: int | None = None, min_points: int = 3) -> float:
    """Least-squares slope of log(|alpha_loser| / |alpha_winner|) after the decision time.

    The loser is the largest non-winning branch at each sample time.
    """
    if winner is None:
        winner = trajectory.winner
        if winner is None:
            raise ValidationError("trajectory has no declared winner")
    logs = trajectory.log_magnitudes
    if logs.shape[1] < 2:
        raise ValidationError("need at least two branches")
    start = trajectory.t_decision if trajectory.t_decision is not None else trajectory.times[0]
    sel = trajectory.times >= start
    if sel.sum() < min_points:
        raise InsufficientStatistics("window too short")
    others = np.delete(logs[sel], winner, axis=1).max(axis=1)
    ratio = others - logs[sel, winner]
    t = trajectory.times[sel]
    return float(np.polyfit(t, ratio, 1)[0])


def mean_decay_slope(trajs: Iterable[Trajectory], min_points: int = 3) -> tuple[float, float, int]:
    """Mean slope, its standard error and the number of trajectories used."""
    slopes = []
    for tr in trajs:
        if tr.winner is None or tr.failed:
            continue
        try:
            slopes.append(decay_slope(tr, min_points=min_points))
        except InsufficientStatistics:
            continue
    if not slopes:
        raise InsufficientStatistics("no trajectory had a usable post-decision window")
    s = np.array(slopes)
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.inf
    return float(s.mean()), se, int(s.size)


@dataclass(frozen=True)
class HookEntry:
    name: str
    delta_n: float
    t_collapse: float
    detectable: bool
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "delta_n": self.delta_n,
            "t_collapse": self.t_collapse if math.isfinite(self.t_collapse) else None,
            "detectable": self.detectable,
            "note": self.note,
        }


# Illustrative dN values; only the pointer figure is a quoted physical estimate.
DEFAULT_HOOKS: tuple[tuple[str, float], ...] = (
    ("pointer", 3e10),
    ("LCD-like", 1e3),
    ("film grain", 1e2),
    ("eye-brain", 10.0),
)


def hook_catalog(params: ModelParams, entries: Sequence[tuple[str, float]] = DEFAULT_HOOKS) -> list[HookEntry]:
    """Collapse time 3/(lambda dN^2) per hook; detectable means strictly below 1 ms."""
    out = []
    for name, dn in entries:
        if dn < 0:
            raise ValidationError(f"{name}: delta_n must be non-negative")
        if dn == 0:
            out.append(HookEntry(name, 0.0, math.inf, False, "never collapses"))
            continue
        t = predicted_collapse_time(params.lam, dn)
        ok = t < DETECTION_LIMIT
        out.append(HookEntry(name, float(dn), t, ok, "" if ok else "unacceptably long"))
    return out


def hook_table(entries: Sequence[HookEntry]) -> str:
    lines = [f"{'hook':<14}{'delta_n':>12}{'t_collapse [s]':>18}  verdict"]
    for e in entries:
        t = "inf" if not math.isfinite(e.t_collapse) else f"{e.t_collapse:.3e}"
        verdict = "ok (< 1 ms)" if e.detectable else e.note
        lines.append(f"{e.name:<14}{e.delta_n:>12.3g}{t:>18}  {verdict}")
    return "\n".join(lines)
