"""Batch command-line front end.

Subcommands: aggregate, efa, sem, regress, rdd, simulate, report.
Exit status taxonomy: 0 success; 2 input/usage error; 3 numerical
failure (non-convergence, singular systems); 4 internal error. Every
stochastic subcommand requires an explicit ``--seed``. All files are
written atomically and each run ends by writing a manifest listing its
inputs and outputs.

Flag precedence: command-line flag > ``--config`` key=value file >
built-in default.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import pandas as pd

from . import aggregation, inference, rdd, sem, simulate, tables
from .cohort import CohortError, CohortTable, load_cohort, select_complete

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_INTERNAL = 4

#: error types that indicate bad inputs or configuration
_INPUT_ERRORS = (
    CohortError,
    simulate.SimulationError,
    rdd.RddError,
    FileNotFoundError,
    KeyError,
)
#: error types produced by estimation itself
_NUMERICAL_ERRORS = (
    aggregation.AggregationError,
    sem.SemError,
    inference.InferenceError,
    np.linalg.LinAlgError,
)


class CliInputError(ValueError):
    """Usage or input problem detected by the front end itself."""


def _read_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliInputError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliInputError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _setting(args, config: dict[str, str], name: str, default=None, cast=str):
    """CLI flag beats config file beats default."""
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    if name in config:
        return cast(config[name])
    return default


def _load_table(args, config) -> CohortTable:
    path = _setting(args, config, "input")
    if path is None:
        raise CliInputError("--input is required")
    return load_cohort(path)


def _clock_columns(args, config, table: CohortTable) -> list[str]:
    clocks = _setting(args, config, "clocks")
    if clocks:
        if isinstance(clocks, str):
            clocks = clocks.split(",")
        return list(clocks)
    found = [c for c in table.data.columns if c.startswith("clock_")]
    if len(found) < 2:
        raise CliInputError("no clock columns given and fewer than two clock_* columns found")
    return found


def _out_path(args, config, filename: str) -> str:
    out_dir = _setting(args, config, "out_dir", default=".")
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, filename)


def _require_seed(args) -> int:
    if args.seed is None:
        raise CliInputError("--seed is required for stochastic subcommands")
    return args.seed


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_aggregate(args) -> int:
    config = _read_config(args.config)
    table = _load_table(args, config)
    clocks = _clock_columns(args, config, table)
    methods = (_setting(args, config, "methods", default="wgt,fa") or "wgt,fa").split(",")
    methods = [m.strip() for m in methods if m.strip()]
    unknown = set(methods) - {"wgt", "fa"}
    if unknown:
        raise CliInputError(f"unknown method(s): {sorted(unknown)}")

    table = select_complete(table, clocks)
    panel = aggregation.ClockPanel.from_table(table, clocks)
    cov = aggregation.sample_covariance(panel)

    scores: dict[str, np.ndarray] = {"subject_id": table.data["subject_id"].to_numpy()}
    weight_rows = []
    diagnostics_lines = []

    if "wgt" in methods:
        w = aggregation.weighted_index_weights(cov)
        scores["mega_wgt"] = aggregation.mega_wgt(panel, w)
        weight_rows += [("wgt", c, wt) for c, wt in zip(clocks, w.normalized_weights)]
        for name in clocks:
            scores[f"mega_wgt_wo_{name}"] = aggregation.leave_one_out(panel, name, "wgt")
    if "fa" in methods:
        solution = aggregation.efa(panel)
        w = aggregation.factor_weights(solution, cov)
        scores["mega_fa"] = aggregation.mega_fa(panel, solution, cov)
        weight_rows += [("fa", c, wt) for c, wt in zip(clocks, w.normalized_weights)]
        diagnostics_lines.append(f"n_retained={solution.n_retained}")
        diagnostics_lines.append(
            "eigenvalues=" + ",".join(f"{v:.6f}" for v in solution.eigenvalues))
        diagnostics_lines.append(
            "factor_eigenvalues=" + ",".join(f"{v:.6f}" for v in solution.factor_eigenvalues))
        for c, load, uniq in zip(clocks, solution.loadings, solution.uniqueness):
            diagnostics_lines.append(f"clock={c} loading={load:.6f} uniqueness={uniq:.6f}")
        for name in clocks:
            scores[f"mega_fa_wo_{name}"] = aggregation.leave_one_out(panel, name, "fa")

    outputs = []
    scores_path = _out_path(args, config, "scores.csv")
    tables.atomic_write_frame(scores_path, pd.DataFrame(scores))
    outputs.append(scores_path)
    weights_path = _out_path(args, config, "weights.csv")
    tables.atomic_write_frame(
        weights_path, pd.DataFrame(weight_rows, columns=["method", "clock", "weight"]))
    outputs.append(weights_path)
    if diagnostics_lines:
        diag_path = _out_path(args, config, "factor_diagnostics.txt")
        tables.atomic_write_text(diag_path, "\n".join(diagnostics_lines) + "\n")
        outputs.append(diag_path)

    manifest_path = _out_path(args, config, "manifest.txt")
    tables.write_manifest(manifest_path, "aggregate", [args.input], outputs,
                          settings={"clocks": ",".join(clocks), "methods": ",".join(methods)})
    print(f"aggregate: wrote {len(outputs)} file(s) for {panel.n} subjects, {panel.k} clocks")
    return EXIT_OK


def cmd_efa(args) -> int:
    config = _read_config(args.config)
    table = _load_table(args, config)
    clocks = _clock_columns(args, config, table)
    table = select_complete(table, clocks)
    panel = aggregation.ClockPanel.from_table(table, clocks)
    solution = aggregation.efa(panel)

    frame = pd.DataFrame({
        "clock": clocks,
        "loading": solution.loadings,
        "uniqueness": solution.uniqueness,
    })
    outputs = []
    path = _out_path(args, config, "efa.csv")
    tables.atomic_write_frame(path, frame)
    outputs.append(path)
    text = [
        f"n_retained={solution.n_retained}",
        "eigenvalues=" + ",".join(f"{v:.6f}" for v in solution.eigenvalues),
        "factor_eigenvalues=" + ",".join(f"{v:.6f}" for v in solution.factor_eigenvalues),
    ]
    txt_path = _out_path(args, config, "efa.txt")
    tables.atomic_write_text(txt_path, "\n".join(text) + "\n")
    outputs.append(txt_path)
    tables.write_manifest(_out_path(args, config, "manifest.txt"), "efa",
                          [args.input], outputs, settings={"clocks": ",".join(clocks)})
    print(f"efa: retained {solution.n_retained} factor(s) from {panel.k} clocks")
    return EXIT_OK


def cmd_sem(args) -> int:
    config = _read_config(args.config)
    seed = _require_seed(args)
    table = _load_table(args, config)
    model_path = _setting(args, config, "model")
    if model_path is None:
        raise CliInputError("--model file is required")
    if not os.path.exists(model_path):
        raise CliInputError(f"model file not found: {model_path}")
    with open(model_path, encoding="utf-8") as handle:
        model = sem.parse_model_file(handle.read())

    needed = model.indicator_names + list(model.covariates) + list(model.outcome_controls)
    if model.outcome:
        needed.append(model.outcome)
    table = select_complete(table, needed)
    fit = sem.fit_sem(model, table, seed=seed)
    if not fit.converged:
        raise sem.SemError(
            f"optimizer did not converge (max |gradient| = {fit.gradient_norm:.2e})")

    references = _setting(args, config, "references")
    if references:
        if isinstance(references, str):
            references = references.split(",")
    else:
        references = [model.blocks[0].reference]

    outputs = []
    score_cols: dict[str, np.ndarray] = {"subject_id": table.data["subject_id"].to_numpy()}
    log_lines = [
        f"log_likelihood={fit.log_likelihood:.6f}",
        f"n_obs={fit.n_obs}",
        f"iterations={fit.n_iterations}",
        f"gradient_norm={fit.gradient_norm:.3e}",
        f"restarts={fit.n_restarts}",
        f"converged={fit.converged}",
    ]
    for ref in references:
        refit = fit if ref == model.blocks[0].reference else sem.rescale_reference(fit, ref)
        score_cols[f"mega_sem_{ref}"] = sem.latent_scores(refit)
        log_lines.append(f"reference={ref} log_likelihood={refit.log_likelihood:.6f}")
        params_path = _out_path(args, config, f"sem_params_{ref}.csv")
        tables.atomic_write_frame(params_path, refit.to_frame())
        outputs.append(params_path)

    scores_path = _out_path(args, config, "sem_scores.csv")
    tables.atomic_write_frame(scores_path, pd.DataFrame(score_cols))
    outputs.append(scores_path)
    log_path = _out_path(args, config, "sem_convergence.txt")
    tables.atomic_write_text(log_path, "\n".join(log_lines) + "\n")
    outputs.append(log_path)

    if args.mc:
        coverage = _sem_monte_carlo(fit, model, args.mc, seed, args.jobs or 1)
        mc_path = _out_path(args, config, "sem_mc_coverage.csv")
        tables.atomic_write_frame(mc_path, coverage)
        outputs.append(mc_path)

    tables.write_manifest(_out_path(args, config, "manifest.txt"), "sem",
                          [args.input, model_path], outputs, seed=seed,
                          settings={"references": ",".join(references)})
    print(f"sem: converged at log-likelihood {fit.log_likelihood:.3f} "
          f"({fit.n_obs} subjects)")
    return EXIT_OK


def _sem_mc_one(task) -> dict:
    truth, model_desc, n, seed = task
    config = simulate.SimConfig(
        seed=seed, n=n,
        loadings=truth["loadings"], error_sds=truth["error_sds"],
        age_slope=0.0, age_sd=0.0, omega_sd=truth["omega_sd"],
        covariate_effects=truth["covariate_effects"],
    )
    table = simulate.simulate_clock_panel(config)
    model = sem.build_mimic(*model_desc)
    fit = sem.fit_sem(model, table, seed=seed)
    out = {}
    for name, true_value in truth["targets"].items():
        est = fit[name]
        se = fit.se(name)
        out[name] = abs(est - true_value) <= 1.96 * se
    return out


def _sem_monte_carlo(fit: sem.SemFit, model: sem.SemModel, reps: int, seed: int,
                     jobs: int) -> pd.DataFrame:
    """Parametric-bootstrap coverage check around the fitted parameters."""
    clocks = [f"clock_{i + 1}" for i in range(model.n_indicators)]
    covariates = [f"covariate:{i}" for i in range(len(model.covariates))]
    cov_names = [c.split(":", 1)[1] if ":" in c else c for c in covariates]
    loadings = [fit.loading(name) for name in model.indicator_names]
    error_sds = [np.sqrt(max(fit[f"resid_var:{name}"], 0.0))
                 for name in model.indicator_names]
    latent = model.blocks[0].latent
    gamma = fit.gamma(latent)
    omega_sd = float(np.sqrt(max(fit[f"latent_var:{latent}"], 0.0)))
    truth = {
        "loadings": tuple(loadings),
        "error_sds": tuple(error_sds),
        "omega_sd": omega_sd,
        "covariate_effects": {name: g for name, g in zip(cov_names, gamma)},
        "targets": {},
    }
    sim_model_desc = ([(latent, clocks, "clock_1")], cov_names)
    for i, name in enumerate(model.indicator_names[1:], start=1):
        truth["targets"][f"loading:clock_{i + 1}"] = loadings[i]
    for name, g in zip(cov_names, gamma):
        truth["targets"][f"gamma:{latent}:{name}"] = g

    tasks = [(truth, sim_model_desc, fit.n_obs, seed + 1 + r) for r in range(reps)]
    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs) as pool:
            results = pool.map(_sem_mc_one, tasks)
    else:
        results = [_sem_mc_one(t) for t in tasks]
    frame = pd.DataFrame(results)
    return pd.DataFrame({"parameter": frame.columns,
                         "coverage": frame.mean(axis=0).to_numpy(),
                         "replications": reps})


def cmd_regress(args) -> int:
    config = _read_config(args.config)
    table = _load_table(args, config)
    outcome = _setting(args, config, "outcome")
    regressors = _setting(args, config, "regressors")
    if outcome is None or not regressors:
        raise CliInputError("--outcome and --regressors are required")
    if isinstance(regressors, str):
        regressors = regressors.split(",")
    se_type = _setting(args, config, "se", default="classical")
    spec = inference.LinearModelSpec(outcome=outcome, regressors=list(regressors),
                                     se_type=se_type)
    table = select_complete(table, [outcome] + list(regressors))
    fit = inference.ols_fit(spec, table)

    outputs = []
    csv_path = _out_path(args, config, "regression.csv")
    tables.atomic_write_frame(csv_path, fit.to_frame())
    outputs.append(csv_path)
    txt_path = _out_path(args, config, "regression.txt")
    tables.atomic_write_text(txt_path, tables.regression_table({outcome: fit}))
    outputs.append(txt_path)
    tables.write_manifest(_out_path(args, config, "manifest.txt"), "regress",
                          [args.input], outputs,
                          settings={"outcome": outcome, "se": se_type,
                                    "regressors": ",".join(regressors)})
    print(f"regress: {outcome} on {len(regressors)} regressor(s), N={fit.n}")
    return EXIT_OK


_PANEL_TITLES = {4: "Panel A: May - December", 3: "Panel B: June - November",
                 2: "Panel C: July - October"}


def cmd_rdd(args) -> int:
    config = _read_config(args.config)
    table = _load_table(args, config)
    outcome = _setting(args, config, "outcome")
    month_column = _setting(args, config, "month_column", default="mob")
    if outcome is None:
        raise CliInputError("--outcome is required")
    bandwidths = args.bandwidths or [4, 3, 2]
    covariates = _setting(args, config, "covariates")
    if isinstance(covariates, str):
        covariates = covariates.split(",") if covariates else []
    covariates = list(covariates or [])
    group = _setting(args, config, "group")

    needed = [outcome, month_column] + covariates + ([group] if group else [])
    table = select_complete(table, needed)

    panels: dict[str, dict[str, rdd.RddFit]] = {}
    effect_fits: dict[str, rdd.RddFit] = {}
    for bw in bandwidths:
        spec = rdd.RddSpec(outcome=outcome, month_column=month_column, bandwidth=bw,
                           covariates=covariates)
        title = _PANEL_TITLES.get(bw, f"Panel: bandwidth {bw}")
        if group:
            fits = rdd.rdd_heterogeneity(table, spec, group)
            panels[title] = fits
            if bw == bandwidths[0]:
                effect_fits = fits
        else:
            panels[title] = {outcome: rdd.rdd_fit(table, spec)}

    outputs = []
    txt_path = _out_path(args, config, "rdd.txt")
    tables.atomic_write_text(txt_path, tables.rdd_panel_table(panels))
    outputs.append(txt_path)
    rows = []
    for title, fits in panels.items():
        for label, fit in fits.items():
            rows.append({"panel": title, "column": label, "estimate": fit.estimate,
                         "std_error": fit.standard_error, "p_value": fit.p_value,
                         "n": fit.n, "bandwidth": fit.bandwidth})
    csv_path = _out_path(args, config, "rdd.csv")
    tables.atomic_write_frame(csv_path, pd.DataFrame(rows))
    outputs.append(csv_path)
    if effect_fits:
        plot_path = _out_path(args, config, "rdd_effects.csv")
        tables.atomic_write_frame(plot_path, tables.effect_ci_frame(effect_fits))
        outputs.append(plot_path)
    tables.write_manifest(_out_path(args, config, "manifest.txt"), "rdd",
                          [args.input], outputs,
                          settings={"outcome": outcome,
                                    "bandwidths": ",".join(map(str, bandwidths))})
    print(f"rdd: {len(bandwidths)} bandwidth panel(s) for outcome {outcome}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config_file = _read_config(args.config)
    seed = _require_seed(args)
    kind = args.kind
    known = {f.name for f in simulate.SimConfig.__dataclass_fields__.values()}
    kwargs: dict = {}
    for key, value in config_file.items():
        if key in ("input", "out_dir"):
            continue
        if key not in known:
            raise CliInputError(f"unknown simulation setting {key!r}")
        kwargs[key] = _parse_sim_value(key, value)
    if args.n is not None:
        kwargs["n"] = args.n
    kwargs["seed"] = seed
    sim_config = simulate.SimConfig(**kwargs)

    generator = {"panel": simulate.simulate_clock_panel,
                 "abuse": simulate.simulate_abuse_cohort,
                 "rdd": simulate.simulate_rdd_cohort}[kind]
    table = generator(sim_config)

    outputs = []
    data_path = _out_path(args, config_file, "cohort.csv")
    tables.atomic_write_frame(data_path, table.export_frame())
    outputs.append(data_path)
    if table.hidden_columns:
        truth_path = _out_path(args, config_file, "truth.csv")
        truth_cols = ["subject_id"] + sorted(table.hidden_columns)
        tables.atomic_write_frame(truth_path, table.data[truth_cols])
        outputs.append(truth_path)
    tables.write_manifest(_out_path(args, config_file, "manifest.txt"), "simulate",
                          [args.config] if args.config else [], outputs, seed=seed,
                          settings={"kind": kind, "n": sim_config.n})
    print(f"simulate: wrote {sim_config.n} subjects ({kind} design)")
    return EXIT_OK


def _parse_sim_value(key: str, value: str):
    if key in ("n", "seed"):
        return int(value)
    if key == "layer_clocks":
        return value.lower() in ("1", "true", "yes")
    if key in ("loadings", "error_sds", "intercepts", "month_weights"):
        return tuple(float(v) for v in value.split(","))
    if key in ("covariate_effects", "rater_miss"):
        out = {}
        for part in value.split(","):
            if part.strip():
                name, _, raw = part.partition(":")
                out[name.strip()] = float(raw)
        return out
    return float(value)


def cmd_report(args) -> int:
    config = _read_config(args.config)
    manifest_path = _setting(args, config, "manifest", default="manifest.txt")
    if not os.path.exists(manifest_path):
        raise CliInputError(f"manifest not found: {manifest_path}")
    missing = []
    lines = []
    with open(manifest_path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            lines.append(line)
            if line.startswith("output="):
                path = line.split("=", 1)[1]
                if not os.path.exists(path):
                    missing.append(path)
    print(f"report: manifest {manifest_path} lists "
          f"{sum(1 for ln in lines if ln.startswith('output='))} output(s)")
    if missing:
        print("missing outputs:", file=sys.stderr)
        for path in missing:
            print(f"  {path}", file=sys.stderr)
        raise CliInputError(f"{len(missing)} manifest output(s) missing")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="megaclock",
        description="Aggregate noisy epigenetic-clock readings and run the "
                    "associated regressions and discontinuity analyses.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--input", help="cohort CSV path")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="random seed (required when stochastic)")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        return p

    p = common(sub.add_parser("aggregate", help="weighted-index and factor scores"))
    p.add_argument("--clocks", help="comma-separated clock columns")
    p.add_argument("--methods", help="comma-separated subset of wgt,fa")
    p.set_defaults(func=cmd_aggregate)

    p = common(sub.add_parser("efa", help="factor-analysis diagnostics"))
    p.add_argument("--clocks", help="comma-separated clock columns")
    p.set_defaults(func=cmd_efa)

    p = common(sub.add_parser("sem", help="latent-variable maximum likelihood"))
    p.add_argument("--model", help="model description file")
    p.add_argument("--references", help="comma-separated reference indicators to cycle")
    p.add_argument("--mc", type=int, help="Monte-Carlo coverage replications")
    p.set_defaults(func=cmd_sem)

    p = common(sub.add_parser("regress", help="linear regression"))
    p.add_argument("--outcome")
    p.add_argument("--regressors", help="comma-separated regressor columns")
    p.add_argument("--se", choices=["classical", "hc1"])
    p.set_defaults(func=cmd_regress)

    p = common(sub.add_parser("rdd", help="school-entry discontinuity"))
    p.add_argument("--outcome")
    p.add_argument("--month-column", dest="month_column")
    p.add_argument("--bandwidths", type=int, nargs="+", help="month windows, e.g. 4 3 2")
    p.add_argument("--covariates", help="comma-separated control columns")
    p.add_argument("--group", help="binary column for class-specific jumps")
    p.set_defaults(func=cmd_rdd)

    p = common(sub.add_parser("simulate", help="synthetic cohort generation"))
    p.add_argument("--kind", choices=["panel", "abuse", "rdd"], default="panel")
    p.add_argument("-n", type=int, help="number of subjects")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("report", help="verify a run manifest"))
    p.add_argument("--manifest", help="manifest file to verify")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (CliInputError, *_INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001 - last-resort taxonomy boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
