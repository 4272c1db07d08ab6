"""Command-line front end.

Every subcommand reads the merged configuration, runs to completion in
memory and only then writes its files (plus ``manifest.json``) to the
output directory, so a failed run leaves no partial outputs.  Exit codes:
0 success, 1 unexpected error, 2 invalid configuration or input data,
3 sampler non-convergence (diagnostics are still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from . import rng as rngmod
from . import simlab
from .analysis import analyze, borrowing_weights
from .config import (ConfigError, analysis_spec, decision_rule, deep_merge, file_digest, jsonable,
                     load_config, load_data, nu_grid, sampler_config)
from .dataset import DataError, FormulaError, SchemaError, concat_datasets, write_dataset
from .design import (DesignError, calibrate_nu, external_posterior, operating_characteristics,
                     power_curve, sample_size, split_design_priors, synthesize_external)
from .estimand import histogram, subgroup_reference
from .inference import PriorSpec
from .similarity import SimilarityError

__all__ = ["main", "build_parser", "COMMANDS"]

log = logging.getLogger("iwborrow")


class NonConvergence(RuntimeError):
    """Raised after outputs (including diagnostics) have been prepared."""


# -- output helpers -----------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def csv_bytes(rows: Sequence[Mapping[str, Any]], columns: Sequence[str] | None = None) -> bytes:
    """Deterministic CSV text: shortest round-trip float formatting, fixed column order."""
    columns = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue().encode()


def json_bytes(obj: Any) -> bytes:
    return (json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n").encode()


class Run:
    """Collects outputs in memory; :meth:`commit` writes them all at once."""

    def __init__(self, args, config: dict, base_dir: Path):
        self.args = args
        self.config = config
        self.base_dir = base_dir
        self.seed = int(config["seed"])
        self.threads = args.threads
        self.outputs: dict[str, bytes] = {}
        self.inputs: dict[str, Path] = {}

    def add(self, name: str, data: bytes):
        self.outputs[name] = data

    def commit(self, started: float):
        out = Path(self.args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.args.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in sorted(self.inputs.items())},
            "outputs": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(self.outputs.items())},
            "threads": self.threads,
            "duration_seconds": round(time.perf_counter() - started, 3),
        }
        for name, data in self.outputs.items():
            (out / name).write_bytes(data)
        (out / "manifest.json").write_bytes(json_bytes(manifest))


# -- shared setup -------------------------------------------------------------

def _data(run: Run):
    internal, external, paths = load_data(run.config, run.base_dir)
    run.inputs.update(paths)
    return internal, external


def _posterior_summary(draws) -> list[dict]:
    rows = []
    for j, name in enumerate(draws.names):
        col = draws.draws[:, j]
        rows.append({"parameter": name, "mean": float(col.mean()), "sd": float(col.std(ddof=1)),
                     "q2.5": float(np.quantile(col, 0.025)), "q97.5": float(np.quantile(col, 0.975)),
                     "rhat": draws.diagnostics["split_rhat"][j],
                     "bulk_ess": draws.diagnostics["bulk_ess"][j]})
    return rows


def _diagnostics(draws) -> dict:
    return {"converged": draws.converged, "messages": list(draws.messages),
            "diagnostics": draws.diagnostics, "summary": _posterior_summary(draws)}


def _design_setup(run: Run):
    cfg = run.config
    d = cfg.get("design") or {}
    internal, external = _data(run)
    if not external:
        raise ConfigError("design commands need at least one external data set")
    spec = analysis_spec(cfg)
    rule = decision_rule(cfg)
    dim = len(spec.formula.coef_names(internal.schema))
    baseline = PriorSpec.normal(dim, 0.0, float(d.get("baseline_prior_scale", 2.5)))
    post_seed = int(rngmod.stream(run.seed, "design-posterior").integers(2**63))
    sampler = sampler_config(d.get("posterior_sampler"), post_seed, base=cfg.get("sampler"))
    post = external_posterior(external, None, baseline, spec.formula, sampler)
    if not post.converged:
        run.add("design_posterior_diagnostics.json", json_bytes(_diagnostics(post)))
        raise NonConvergence("external posterior did not converge: " + "; ".join(post.messages))
    ref = subgroup_reference(internal, spec.formula, spec.subgroup, spec.restrict_reference)
    priors = split_design_priors(post, rule.interval, ref, internal, spec.formula,
                                 int(d.get("min_draws", 200)))
    n_syn = d.get("synthesize_n")
    borrow = external
    if n_syn:
        borrow = synthesize_external(concat_datasets(external), int(n_syn),
                                     rngmod.stream(run.seed, "synthesize-external"))
    analysis_sampler = deep_merge(cfg.get("sampler") or {}, d.get("analysis_sampler") or {})
    return d, spec, rule, priors, borrow, analysis_sampler


def _prior_rows(priors) -> list[dict]:
    rows = []
    for label, pr in priors.items():
        lo = float(min(p.gamma.min() for p in priors.values()))
        hi = float(max(p.gamma.max() for p in priors.values()))
        for b in histogram(pr.gamma, 40, (lo, hi)):
            rows.append({"hypothesis": label, "retained_fraction": pr.retained_fraction, **b})
    return rows


# -- subcommands --------------------------------------------------------------

def cmd_weights(run: Run):
    internal, external = _data(run)
    spec = analysis_spec(run.config)
    w = borrowing_weights(internal, external, spec.weighting)
    rows, i = [], 0
    for src in external:
        for k in range(src.n):
            rows.append({"external_row_index": k, "source": src.source_id,
                         "raw_weight": float(w.raw[i]) if w.raw is not None else float(w.weights[i]),
                         "weight": float(w.effective[i]), "retained": int(w.retained[i])})
            i += 1
    run.add("weights.csv", csv_bytes(rows, ["external_row_index", "source", "raw_weight", "weight", "retained"]))
    run.add("weights_summary.json", json_bytes(w.summary()))


def _fit(run: Run, with_rule: bool):
    internal, external = _data(run)
    spec = analysis_spec(run.config)
    rule = decision_rule(run.config) if with_rule else None
    return analyze(internal, external, spec, seed=run.seed, rule=rule), spec, rule


def cmd_fit(run: Run):
    res, _, _ = _fit(run, False)
    draws = res.posterior
    rows = [{"chain": int(c), **{n: float(v) for n, v in zip(draws.names, row)}}
            for c, row in zip(draws.chain_ids, draws.draws)]
    run.add("draws.csv", csv_bytes(rows, ["chain", *draws.names]))
    run.add("diagnostics.json", json_bytes({**_diagnostics(draws), "weights": res.weights.summary()}))
    if not draws.converged:
        raise NonConvergence("; ".join(draws.messages))


def cmd_estimate(run: Run):
    res, spec, rule = _fit(run, True)
    est = res.estimand
    run.add("gamma_draws.csv", csv_bytes([{"gamma": float(g)} for g in est.gamma_draws], ["gamma"]))
    summary = est.summary(rule.interval)
    summary.update({"threshold": rule.threshold, "reject": bool(res.tau > rule.threshold),
                    "reference": est.subgroup.provenance, "weights": res.weights.summary()})
    run.add("estimate_summary.json", json_bytes(summary))
    bins = int((run.config.get("estimand") or {}).get("bins", 40))
    run.add("histogram.csv", csv_bytes(histogram(est.gamma_draws, bins), ["lower", "upper", "count"]))
    run.add("diagnostics.json", json_bytes(_diagnostics(res.posterior)))
    if not res.converged:
        raise NonConvergence("; ".join(res.posterior.messages))


def _scenarios(run: Run):

    sim = run.config.get("simulation") or {}
    source = sim.get("scenarios", "default")
    if source in (None, "default"):
        scenarios = simlab.default_scenarios()
    else:
        path = Path(source)
        path = path if path.is_absolute() else run.base_dir / path
        if not path.is_file():
            raise ConfigError(f"scenario file {source!r} not found")
        run.inputs["scenarios"] = path
        raw = yaml.safe_load(path.read_text())
        items = raw.get("scenarios", raw) if isinstance(raw, Mapping) else raw
        try:
            scenarios = [simlab.ScenarioConfig.from_dict(d) for d in items]
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"scenario file: {exc}") from None
    labels = sim.get("labels")
    if labels:
        labels = [str(v) for v in labels]
        known = {s.label for s in scenarios}
        missing = set(labels) - known
        if missing:
            raise ConfigError(f"unknown scenario labels {sorted(missing)}")
        scenarios = [s for s in scenarios if s.label in labels]
    return scenarios


def cmd_simulate(run: Run):
    scenarios = _scenarios(run)
    if run.args.scenario_table:
        rows = simlab.scenario_table(scenarios)
        run.add("scenarios.csv", csv_bytes(rows))
        run.add("scenarios.json", json_bytes([s.to_dict() for s in scenarios]))
        return
    sim = run.config.get("simulation") or {}
    thresholds = [float(t) for t in sim.get("thresholds", [0.95, 0.975])]
    sampler = sampler_config(sim.get("sampler"), 0, base=run.config.get("sampler"))
    rule = decision_rule(run.config).with_threshold(thresholds[0])
    methods = list(sim.get("methods") or simlab.METHODS)
    all_rows, metrics, failed = [], [], []
    for k, sc in enumerate(scenarios):
        log.info("scenario %s: %d reps", sc.label, int(sim.get("n_reps", 100)))
        rows = simlab.run_study(sc, int(sim.get("n_reps", 100)), run.seed, methods, rule, thresholds,
                                sampler, sim.get("weighting"), run.threads)
        truth, truth_se = simlab.true_marginal_effect(
            sc, int(sim.get("n_oracle", 1_000_000)), rngmod.stream(run.seed, f"oracle/{sc.label}"))
        for r in rows:
            r["truth"] = truth
        for m in simlab.aggregate_metrics(rows, truth, thresholds):
            row = {**m.flat(), "truth": truth, "truth_se": truth_se, "hypothesis": sc.hypothesis}
            metrics.append(row)
            if m.n_excluded > 0.05 * (m.n_reps + m.n_excluded):
                failed.append(f"{sc.label}/{m.method}: {m.n_excluded} non-converged reps")
        all_rows.extend(rows)
    rep_cols = ["scenario", "rep", "method", "median", "mean", "sd", "lower", "upper", "tau", "ess",
                "converged", "max_rhat", *[f"reject_{t:g}" for t in thresholds], "truth"]
    met_cols = ["scenario", "hypothesis", "method", "coverage", "bias", "bias_se", "rmse",
                *[f"rejection_{t:g}" for t in thresholds], "n_reps", "n_excluded", "truth", "truth_se"]
    run.add("replicates.csv", csv_bytes(all_rows, rep_cols))
    run.add("metrics.csv", csv_bytes(metrics, met_cols))
    if failed:
        raise NonConvergence("; ".join(failed))


def cmd_oc(run: Run):
    d, spec, rule, priors, borrow, samp = _design_setup(run)
    hyp = str(d.get("hypothesis", "alternative"))
    if hyp not in priors:
        raise ConfigError("design.hypothesis must be 'null' or 'alternative'")
    spec = analysis_spec(run.config, sampler=samp)
    oc = operating_characteristics(priors[hyp], spec, int(d["n_internal"]), rule, int(d["n_reps"]),
                                   run.seed, external=borrow, allocation=float(d.get("allocation", 0.5)),
                                   threads=run.threads)
    run.add("oc.json", json_bytes(oc.to_dict()))
    run.add("oc_taus.csv", csv_bytes([{"rep_kept": i, "tau": t} for i, t in enumerate(oc.taus)]))
    run.add("design_priors.csv", csv_bytes(_prior_rows(priors)))


def cmd_calibrate(run: Run):
    d, spec, rule, priors, borrow, samp = _design_setup(run)
    spec = analysis_spec(run.config, sampler=samp)
    nu, oc = calibrate_nu(priors["null"], spec, int(d["n_internal"]), float(d["alpha"]),
                          nu_grid(d["nu_grid"]), int(d["n_reps"]), run.seed, external=borrow,
                          interval=rule.interval, allocation=float(d.get("allocation", 0.5)),
                          threads=run.threads)
    run.add("calibrate.json", json_bytes({"nu": nu, **oc.to_dict()}))
    run.add("calibrate_taus.csv", csv_bytes([{"rep_kept": i, "tau": t} for i, t in enumerate(oc.taus)]))


def _curve(run: Run):
    d, spec, rule, priors, borrow, samp = _design_setup(run)
    variants = {name: analysis_spec(run.config, weighting=w or {}, sampler=samp)
                for name, w in (d.get("variants") or {}).items()}
    if not variants:
        raise ConfigError("design.variants is empty")
    alpha = d.get("alpha")
    rows = power_curve(priors["alternative"], variants, [int(n) for n in d["n_grid"]], rule,
                       int(d["n_reps"]), run.seed, external=borrow,
                       null_prior=priors["null"] if alpha is not None else None,
                       alpha=None if alpha is None else float(alpha),
                       nu_grid=nu_grid(d["nu_grid"]), calibrate_on=d.get("calibrate_on"),
                       allocation=float(d.get("allocation", 0.5)), threads=run.threads)
    run.add("power_curve.csv", csv_bytes(rows, ["N", "variant", "nu", "power", "mc_se", "type1",
                                                "n_reps", "n_excluded"]))
    run.add("design_priors.csv", csv_bytes(_prior_rows(priors)))
    return d, rows, variants


def cmd_power_curve(run: Run):
    _curve(run)


def cmd_ssd(run: Run):
    d, rows, variants = _curve(run)
    out = []
    for name in variants:
        for target in d.get("target_power", [0.7]):
            try:
                n_grid, n_interp = sample_size(rows, name, float(target))
                out.append({"variant": name, "target_power": float(target), "N": n_grid,
                            "N_interpolated": n_interp, "reached": 1})
            except DesignError:
                out.append({"variant": name, "target_power": float(target), "N": None,
                            "N_interpolated": None, "reached": 0})
    run.add("sample_size.csv", csv_bytes(out, ["variant", "target_power", "N", "N_interpolated", "reached"]))


def cmd_synthesize_external(run: Run):
    _, external = _data(run)
    if not external:
        raise ConfigError("no external data configured")
    s = run.config.get("synthesize") or {}
    syn = synthesize_external(concat_datasets(external), int(s.get("n", 1000)),
                              rngmod.stream(run.seed, "synthesize-external"), tuple(s.get("strata") or ()))
    run.add("synthetic_external.csv", _dataset_bytes(syn))


def _dataset_bytes(ds) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.csv"
        write_dataset(ds, path)
        return path.read_bytes()


COMMANDS: dict[str, Callable[[Run], None]] = {
    "weights": cmd_weights,
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "oc": cmd_oc,
    "calibrate": cmd_calibrate,
    "power-curve": cmd_power_curve,
    "ssd": cmd_ssd,
    "synthesize-external": cmd_synthesize_external,
}


def _threads(value: str) -> int:
    if value == "max":
        return os.cpu_count() or 1
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1 or 'max'")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iwborrow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config merged over the packaged defaults")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out-dir", default=f"out-{name}", help="output directory")
        sp.add_argument("--threads", type=_threads, default=1, help="worker processes, or 'max'")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable), e.g. sampler.draws=2000")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            sp.add_argument("--scenario-table", action="store_true",
                            help="only write the scenario definitions")
    return p


def _report(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        config, base_dir = load_config(args.config, args.overrides)
        if args.seed is not None:
            config["seed"] = args.seed
        if not isinstance(config.get("seed"), int) or config["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        run = Run(args, config, base_dir)
        try:
            COMMANDS[args.command](run)
        except NonConvergence as exc:
            run.commit(started)
            return _report("non_convergence", exc, 3)
        run.commit(started)
        return 0
    except (ConfigError, SchemaError, DataError, FormulaError, SimilarityError) as exc:
        return _report(type(exc).__name__, exc, 2)
    except DesignError as exc:
        return _report("DesignError", exc, 1)
    except (ValueError, KeyError) as exc:
        return _report(type(exc).__name__, exc, 2)


if __name__ == "__main__":
    sys.exit(main())
