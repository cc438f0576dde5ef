"""Command-line front end.

Every command reads a JSON config, writes JSON/CSV outputs and a
``manifest.json`` into ``--out``, and exits with 0 (pass), 1 (scientific or
statistical failure) or 2 (usage or configuration error).  A config file may
also be an envelope ``{"command": ..., "config": {...}}``; recipes and
manifests both have that shape, so a manifest can be fed back as a config.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .branchlab import BranchOverlapError, init_two_packets, isolation_suite
from .constraints import CouplingSet, check_all
from .core import ModelParams, RunConfig, ValidationError, scenario_from_config, two_branch_delta_scenario
from .counterexample import ThreeWayConfig, born_requires_dependence_report, run_no_go
from .ensemble import (
    ESS_FRACTION,
    InsufficientStatistics,
    LowESSWarning,
    born_test,
    collapse_point,
    derived_seed,
    hook_catalog,
    hook_table,
    martingale_test,
    mean_decay_slope,
    predicted_collapse_time,
    run_ensemble,
    scaling_study,
)

log = logging.getLogger("csl_lab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


@dataclass
class Outputs:
    out_dir: Path
    files: list[str] = field(default_factory=list)

    def write_text(self, name: str, text: str) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / name).write_text(text, encoding="utf-8")
        self.files.append(name)

    def write_json(self, name: str, obj: Any) -> None:
        self.write_text(name, json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path: str | Path) -> tuple[dict[str, Any], str | None]:
    """Parsed config and the command named by its envelope, if any."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    if "config" in data and isinstance(data["config"], dict):
        return data["config"], data.get("command")
    return data, None


def _require(cfg: dict[str, Any], key: str) -> Any:
    if key not in cfg:
        raise ConfigError(f"missing field {key!r}")
    return cfg[key]


def _run_config(cfg: dict[str, Any], args: argparse.Namespace) -> RunConfig:
    run = dict(_require(cfg, "run"))
    if args.trials_override is not None:
        run["trials"] = args.trials_override
    if args.seed_override is not None:
        run["master_seed"] = args.seed_override
    return RunConfig.from_dict(run)


def _apply_overrides(cfg: dict[str, Any], args: argparse.Namespace, section: str | None = "run") -> dict[str, Any]:
    """Copy of ``cfg`` with CLI overrides folded in, as recorded in the manifest."""
    cfg = json.loads(json.dumps(cfg))
    target = cfg.setdefault(section, {}) if section else cfg
    if args.trials_override is not None:
        target["trials"] = args.trials_override
    if args.seed_override is not None:
        target["master_seed"] = args.seed_override
    return cfg


def _trajectory_dump(report, outputs: Outputs) -> None:
    k = report.k
    rows = ["trial,t," + ",".join(f"p_{j + 1}" for j in range(k)) + ",log_sq_norm"]
    trailers = []
    for tr in report.trajectories:
        for t, p, ln in zip(tr.times, tr.probs, tr.log_sq_norm):
            rows.append(",".join([str(tr.trial_index), repr(float(t)), *[repr(float(x)) for x in p], repr(float(ln))]))
        trailers.append({"trial": tr.trial_index, **tr.trailer()})
    outputs.write_text("trajectories.csv", "\n".join(rows) + "\n")
    outputs.write_json("trajectories_trailer.json", trailers)


def _mean_p_csv(report) -> str:
    k = report.k
    head = ["t"] + [f"mean_p_{j + 1}" for j in range(k)] + [f"se_p_{j + 1}" for j in range(k)] + ["ess"]
    lines = [",".join(head)]
    for r, t in enumerate(report.times):
        vals = [t, *report.mean_p[r], *report.se_p[r], report.ess[r]]
        lines.append(",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def cmd_born(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs) -> int:
    scenario = scenario_from_config(_require(cfg, "scenario"))
    run = _run_config(cfg, args)
    statistic = cfg.get("statistic", "mean_p" if run.scheme == "raw-weighted" else "outcome")
    emit = bool(args.emit_trajectories or cfg.get("emit_trajectories"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LowESSWarning)
        report = run_ensemble(scenario, run, keep_trajectories=emit)
    expected = [float(e) for e in (cfg.get("expected") or report.initial_probs)]
    notes = [str(w.message) for w in caught]
    try:
        born = born_test(report, expected, statistic=statistic)
    except InsufficientStatistics as exc:
        born = None
        notes.append(str(exc))
    if born is not None and born.insufficient:
        notes.append("insufficient statistics")
    martingale = None
    if run.scheme in ("raw-weighted", "physical-drift", "unitary"):
        martingale = martingale_test(report)
    if not report.healthy:
        notes.append("unhealthy: more than 1% of trajectories failed")
    passed = born is not None and born.passed and (martingale is None or martingale.passed) and report.healthy
    outputs.write_json("report.json", {
        "report": report.to_dict(),
        "born": None if born is None else born.to_dict(),
        "martingale": None if martingale is None else martingale.to_dict(),
        "passed": passed,
        "notes": notes,
    })
    outputs.write_text("mean_p.csv", _mean_p_csv(report))
    if emit:
        _trajectory_dump(report, outputs)
    freq = ", ".join(f"{f:.4f}" for f in report.frequencies)
    print(f"{scenario.name} [{run.scheme}] frequencies ({freq}) expected {[round(e, 4) for e in expected]}")
    for n in notes:
        print(f"note: {n}")
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_timing(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs) -> int:
    out: dict[str, Any] = {"notes": []}
    ok = True
    hooks_cfg = cfg.get("hooks")
    if hooks_cfg is not None:
        hparams = ModelParams.from_dict(_require(hooks_cfg, "params"))
        entries = [(str(n), float(d)) for n, d in _require(hooks_cfg, "entries")]
        catalog = hook_catalog(hparams, entries)
        out["hooks"] = [e.to_dict() for e in catalog]
        outputs.write_text("hooks.txt", hook_table(catalog) + "\n")
        print(hook_table(catalog))

    if "delta_n" in cfg:
        params = ModelParams.from_dict(_require(cfg, "params"))
        run = _run_config(cfg, args)
        a1 = float(cfg.get("a1_squared", 0.5))
        dns = [float(d) for d in cfg["delta_n"]]
        factor = float(cfg.get("time_factor", 2.0))
        distinct = sorted(set(dns))
        rescale = bool(cfg.get("rescale_time", True))
        summaries: dict[float, Any] = {}
        if len(distinct) >= 3:
            fit = scaling_study(params, distinct, run, a1, rescale)
            summaries = dict(zip(distinct, fit.summaries))
        else:
            out["notes"].append("fewer than 3 distinct delta_n values: scaling fit skipped")
            print("note: fewer than 3 distinct delta_n values, scaling fit skipped")
            for i, dn in enumerate(distinct):
                try:
                    summaries[dn] = collapse_point(params, dn, run, i, a1, rescale)
                except InsufficientStatistics as exc:
                    out["notes"].append(f"dN={dn:g}: {exc}")
                    ok = False
        points = []
        for dn, s in summaries.items():
            predicted = predicted_collapse_time(params.lam, dn, run.collapse_level)
            within = predicted / factor <= s.median <= predicted * factor
            ok &= within
            points.append({"delta_n": dn, "predicted": predicted, **s.to_dict(), "within_factor": within})
            print(f"dN={dn:g}: median t_level {s.median:.4g} (predicted {predicted:.4g})"
                  f" {'ok' if within else 'outside factor'} {factor:g}")
        out["points"] = points
        if len(distinct) >= 3:
            expected = float(cfg.get("expected_slope", -2.0))
            tol = float(cfg.get("slope_tolerance", 0.2))
            slope_ok = abs(fit.slope - expected) <= tol
            ok &= slope_ok
            out["fit"] = {**fit.to_dict(), "expected": expected, "tolerance": tol, "passed": slope_ok}
            print(f"scaling slope {fit.slope:.4f} (expected {expected} +/- {tol}) {'ok' if slope_ok else 'FAIL'}")

    decay = cfg.get("decay")
    if decay is not None:
        params = ModelParams.from_dict(decay.get("params", cfg.get("params")))
        rows = []
        for i, dn in enumerate(_require(decay, "delta_n")):
            horizon = float(decay.get("t_max", 10.0)) / (params.lam * dn**2)
            n_samples = int(decay.get("samples", 200))
            sub = RunConfig(
                dt=horizon / int(decay.get("steps", 2000)), t_max=horizon,
                trials=int(decay.get("trials", 1000)),
                master_seed=derived_seed(decay.get("master_seed", 0), 1000 + i),
                sample_times=tuple(np.linspace(0, horizon, n_samples + 1)),
            )
            report = run_ensemble(two_branch_delta_scenario(params, dn, float(decay.get("a1_squared", 0.5))), sub,
                                  keep_trajectories=True)
            slope, se, used = mean_decay_slope(report.trajectories)
            target = -params.lam * dn**2
            within = abs(slope - target) <= 0.1 * abs(target)
            ok &= within
            rows.append({"delta_n": dn, "mean_slope": slope, "se": se, "trajectories": used, "target": target,
                         "within_10pct": within})
            print(f"decay slope dN={dn}: {slope:.4g} +/- {se:.2g} (target {target:g}) {'ok' if within else 'FAIL'}")
        out["decay"] = rows
    out["passed"] = bool(ok)
    outputs.write_json("timing.json", out)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_nogo(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs) -> int:
    tw = dict(cfg.get("three_way", {}))
    if args.trials_override is not None:
        tw["trials"] = args.trials_override
    if args.seed_override is not None:
        tw["master_seed"] = args.seed_override
    config = ThreeWayConfig.from_dict(tw)
    table = born_requires_dependence_report(config)
    result: dict[str, Any] = {"three_way": table.to_dict()}
    ok = table.as_expected
    if cfg.get("pair", True):
        sc_a = config.scenario()
        flipped = ThreeWayConfig.from_dict({**config.to_dict(), "a_squared": list(reversed(config.a_squared))})
        run = RunConfig(dt=config.dt, t_max=config.t_max, trials=config.trials, master_seed=config.master_seed,
                        scheme="coefficient-independent")
        verdict = run_no_go((sc_a, flipped.scenario()), run)
        result["pair"] = verdict.to_dict()
        ok &= verdict.verdict == "no-go demonstrated"
        print(f"amplitude swap: {verdict.verdict}")
    result["passed"] = bool(ok)
    outputs.write_json("nogo.json", result)
    outputs.write_text("nogo.txt", table.text() + "\n")
    print(table.text())
    return EXIT_OK if ok else EXIT_FAIL


def cmd_branchlab(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs) -> int:
    try:
        wave = init_two_packets(
            int(cfg.get("grid_size", 4096)), float(cfg.get("dx", 1.0)),
            cfg.get("centers", [614.4, 3481.6]), cfg.get("widths", [20.0, 20.0]), cfg.get("momenta", [0.2, -0.2]),
            complex(cfg.get("a_plus", math.sqrt(2 / 3))), complex(cfg.get("a_minus", math.sqrt(1 / 3))),
            pad=int(cfg.get("pad", 16)),
        )
    except BranchOverlapError as exc:
        raise ConfigError(str(exc)) from exc
    report, final = isolation_suite(wave, float(cfg.get("dt", 0.1)), int(cfg.get("steps", 1000)),
                                    int(cfg.get("linearity_steps", 100)))
    outputs.write_json("invariants.json", report.to_dict())
    outputs.write_text("wave_initial.csv", wave.to_csv())
    outputs.write_text("wave_final.csv", final.to_csv())
    for key, val in report.to_dict().items():
        print(f"{key:<26}{val}")
    if report.collided:
        print(f"regions collided at step {report.collision_step}")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_constraints(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs | None) -> int:
    verdict = check_all(CouplingSet.from_dict(cfg))
    print(verdict.table())
    if outputs is not None:
        outputs.write_json("verdict.json", {"couplings": cfg, **verdict.to_dict()})
        outputs.write_text("verdict.txt", verdict.table() + "\n")
    return EXIT_OK if verdict.passed else EXIT_FAIL


def cmd_equivalence(cfg: dict[str, Any], args: argparse.Namespace, outputs: Outputs) -> int:
    """Raw-weighted against physical-drift weighted mean p_1(t) at every sample time."""
    scenario = scenario_from_config(_require(cfg, "scenario"))
    run = _run_config(cfg, args)
    sigma = float(cfg.get("sigma", 5.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowESSWarning)
        raw = run_ensemble(scenario, run.replace(scheme="raw-weighted", master_seed=derived_seed(run.master_seed, 0)))
    phys = run_ensemble(scenario, run.replace(scheme="physical-drift", master_seed=derived_seed(run.master_seed, 1)))
    res = scheme_agreement(raw, phys, sigma)
    outputs.write_json("equivalence.json", res)
    for row in res["rows"]:
        flag = "" if row["ess_ok"] else "  (ESS < 0.1 M)"
        print(f"t={row['t']:<8.4g} raw {row['raw']:.4f}  phys {row['phys']:.4f}  z={row['z']:+.2f}{flag}")
    print(f"agreement at all times: {res['agree_all']}; ESS >= {ESS_FRACTION} M at all times: {res['ess_ok_all']}")
    print("PASS" if res["passed"] else "FAIL")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def scheme_agreement(raw, phys, sigma: float = 5.0, branch: int = 0) -> dict[str, Any]:
    diff = raw.mean_p[:, branch] - phys.mean_p[:, branch]
    se = np.sqrt(raw.se_p[:, branch] ** 2 + phys.se_p[:, branch] ** 2)
    diff = np.where(np.abs(diff) <= 1e-12, 0.0, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 1e-12, diff / np.where(se > 1e-12, se, 1), np.where(diff == 0, 0.0, np.inf))
    ess_ok = raw.ess >= ESS_FRACTION * raw.trials
    agree = np.abs(z) <= sigma
    rows = [
        {"t": float(t), "raw": float(a), "phys": float(b), "z": float(zz), "ess": float(e), "ess_ok": bool(k)}
        for t, a, b, zz, e, k in zip(raw.times, raw.mean_p[:, branch], phys.mean_p[:, branch], z, raw.ess, ess_ok)
    ]
    return {
        "rows": rows,
        "agree_all": bool(agree.all()),
        "agree_where_ess_ok": bool(agree[ess_ok].all()),
        "ess_ok_all": bool(ess_ok.all()),
        "min_ess_fraction": float(raw.ess.min() / raw.trials),
        "passed": bool(agree.all() and ess_ok.all()),
    }


COMMANDS: dict[str, tuple[Callable[..., int], str | None]] = {
    "born": (cmd_born, "run"),
    "timing": (cmd_timing, "run"),
    "nogo": (cmd_nogo, "three_way"),
    "branchlab": (cmd_branchlab, None),
    "constraints": (cmd_constraints, None),
    "equivalence": (cmd_equivalence, "run"),
}


def execute(command: str, cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path | None) -> int:
    func, section = COMMANDS[command]
    if command == "constraints" and out_dir is None:
        return func(cfg, args, None)
    if out_dir is None:
        raise ConfigError("--out is required")
    outputs = Outputs(out_dir)
    started = _now()
    effective = _apply_overrides(cfg, args, section) if section else cfg
    if getattr(args, "emit_trajectories", False):
        effective = {**effective, "emit_trajectories": True}
    code = func(cfg, args, outputs)
    scenario = None
    if "scenario" in cfg:
        scenario = scenario_from_config(cfg["scenario"]).to_dict()
    seed = (effective.get(section or "", {}) if section else {}).get("master_seed")
    manifest = {
        "command": command,
        "config": effective,
        "scenario": scenario,
        "master_seed": seed,
        "artifact_version": __version__,
        "started": started,
        "finished": _now(),
        "exit_code": code,
        "outputs": list(outputs.files),
    }
    outputs.write_json("manifest.json", manifest)
    return code


def _recipe_dir() -> Path:
    return Path(str(resources.files("csl_lab") / "recipes"))


def list_recipes() -> list[Path]:
    return sorted(_recipe_dir().glob("*.json"))


def run_recipes(out_root: Path, args: argparse.Namespace, only: list[str] | None = None) -> int:
    worst = EXIT_OK
    for path in list_recipes():
        if only and path.stem not in only:
            continue
        data = json.loads(path.read_text(encoding="utf-8"))
        expect = int(data.get("expect_exit", 0))
        print(f"== {path.stem} ({data['command']}), expecting exit {expect}")
        code = execute(data["command"], data["config"], args, out_root / path.stem)
        status = "ok" if code == expect else "UNEXPECTED"
        print(f"== {path.stem}: exit {code} {status}\n")
        if code != expect:
            worst = max(worst, EXIT_FAIL)
    return worst


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="JSON config, recipe or manifest")
        p.add_argument("--out", help="output directory")
        p.add_argument("--trials-override", type=int)
        p.add_argument("--seed-override", type=int)
        p.add_argument("--emit-trajectories", action="store_true")

    for name in COMMANDS:
        common(sub.add_parser(name))
    rep = sub.add_parser("replay", help="re-run a manifest")
    rep.add_argument("--manifest", required=True)
    rep.add_argument("--out", required=True)
    rec = sub.add_parser("recipes", help="run every bundled recipe")
    rec.add_argument("--out", required=True)
    rec.add_argument("--only", nargs="*")
    rec.add_argument("--list", action="store_true")
    for p in (rep, rec):
        p.set_defaults(trials_override=None, seed_override=None, emit_trajectories=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "recipes":
            if args.list:
                for p in list_recipes():
                    print(p.stem)
                return EXIT_OK
            return run_recipes(Path(args.out), args, args.only)
        if args.command == "replay":
            cfg, command = load_config(args.manifest)
            if command is None:
                raise ConfigError("manifest has no command")
            return execute(command, cfg, args, Path(args.out))
        cfg, named = load_config(args.config)
        if named is not None and named != args.command:
            raise ConfigError(f"config was written for {named!r}, not {args.command!r}")
        return execute(args.command, cfg, args, Path(args.out) if args.out else None)
    except (ConfigError, ValidationError, KeyError, TypeError) as exc:
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
