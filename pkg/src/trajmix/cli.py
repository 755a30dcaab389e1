"""Command-line front end: ``trajmix <command> ...``.

Exit codes: 0 success, 2 malformed input or usage, 3 estimation failure,
4 adequacy criteria not met under ``--strict``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from ._version import __version__
from .data import DEFAULT_GRID, Cohort
from .diagnostics import adequacy, assign
from .errors import EstimationError, SchemaError
from .gbtm import FittedModel, InitStrategy, ModelSpec, fit, model_search, sensitivity_refit, trajectory_band
from .gbtm.model import AgeTransform, predict_mean
from .manifest import RunManifest, utc_now
from .mnlogit import DEFAULT_FORCED, factor_report_rows, odds_ratios, select_reference, two_stage
from .preprocess import impute_simple, plausibility_flags
from .simulate import PRESETS, GeneratorConfig, generate_cohort

log = logging.getLogger("trajmix")

EXIT_OK, EXIT_SCHEMA, EXIT_ESTIMATION, EXIT_ADEQUACY = 0, 2, 3, 4
PATH_KEYS = frozenset({
    "input", "output", "model", "covariates", "schema", "assignments", "outdir", "table",
    "sensitivity", "json", "screening", "labels", "errors", "config", "config_out", "manifest",
})


# ---------------------------------------------------------------------------
# argument helpers


def parse_k(text: str) -> list[int]:
    """``2..5``, ``2,3,5`` or a single count."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            ks = list(range(int(lo), int(hi) + 1))
        else:
            ks = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed group range {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"group counts must be >= 1: {text!r}")
    return ks


def parse_band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed band {text!r}; expected LO:HI") from None
    if not lo <= hi:
        raise argparse.ArgumentTypeError("band must satisfy LO <= HI")
    return lo, hi


def parse_grid_arg(text: str) -> tuple[float, ...]:
    try:
        return tio.parse_grid(text)
    except SchemaError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_names(text: str) -> tuple[str, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    return tuple(s.strip() for s in text.split(",") if s.strip())


def parse_degrees(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed degree list {text!r}") from None


def parse_censor(text: str):
    lo, _, hi = text.partition(":")
    try:
        return (float(lo) if lo else None, float(hi) if hi else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed censoring bounds {text!r}; expected LO:HI") from None


# ---------------------------------------------------------------------------
# run bookkeeping


class Run:
    """Reads inputs and writes outputs while recording digests in a manifest."""

    def __init__(self, args, command: str):
        self.args = args
        config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
        config = json.loads(json.dumps(config, default=str))
        self.manifest = RunManifest(command, config, seed=config.get("seed"), path_keys=tuple(PATH_KEYS))

    def set_seed(self, seed: int) -> None:
        self.manifest.seed = seed
        self.manifest.config["seed"] = seed

    def read(self, role: str, path) -> str:
        text = tio.read_text(path)
        self.manifest.add_input(role, path, text)
        return text

    def read_json(self, role: str, path) -> dict:
        text = self.read(role, path)
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None

    def emit(self, role: str, path, text: str) -> None:
        tio.write_text(path, text)
        self.manifest.add_output(role, path, text)

    def emit_json(self, role: str, path, obj: dict) -> None:
        self.emit(role, path, tio.dumps_json({**obj, "run_id": self.manifest.run_id}))

    def finish(self, path=None) -> None:
        self.manifest.finished = utc_now()
        target = getattr(self.args, "manifest", None) or path
        if target is None or str(target) == "-":
            sys.stderr.write(self.manifest.to_json())
        else:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            Path(target).write_text(self.manifest.to_json(), encoding="utf-8")


def _default_manifest(output) -> str | None:
    return None if str(output) == "-" else f"{output}.manifest.json"


def _resolve_seed(run: Run, seed) -> int:
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**32))
        log.info("no --seed given; using entropy seed %d", seed)
    run.set_seed(int(seed))
    return int(seed)


def _load_cohort(run: Run, path, grid, min_observed: int) -> Cohort:
    cohort = tio.parse_long_csv(run.read("measurements", path), grid, str(path))
    keep = cohort.n_observed >= min_observed
    if not keep.any():
        raise SchemaError(f"no subject has at least {min_observed} observed values")
    if not keep.all():
        log.info("eligibility: %d of %d subjects kept (>= %d observations)",
                 int(keep.sum()), cohort.n_subjects, min_observed)
    return cohort.subset(keep)


def _load_model(run: Run, path) -> FittedModel:
    d = run.read_json("model", path)
    try:
        return FittedModel.from_dict(d)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed model file ({exc})") from None


def _model_grid(args, model: FittedModel):
    grid = args.grid if args.grid is not None else tuple(model.grid.tolist())
    if len(grid) != model.grid.size or not np.allclose(grid, model.grid, atol=1e-9, rtol=0):
        raise SchemaError(f"--grid {list(grid)} disagrees with the model grid {model.grid.tolist()}")
    return grid


def _adequacy_of(model: FittedModel, cohort: Cohort):
    return adequacy(model, model.posterior(cohort))


def _search_table_rows(result) -> list[dict]:
    return result.table()


# ---------------------------------------------------------------------------
# commands


def cmd_durations(args) -> int:
    run = Run(args, "durations")
    rows = tio.parse_durations(run.read("clock_times", args.input), str(args.input))
    run.emit("measurements", args.output, tio.durations_csv_text(rows))
    bad = [r for r in rows if r.error]
    for r in bad:
        sys.stderr.write(f"line {r.line}: subject {r.subject_id!r}: {r.error}\n")
    hours = np.array([np.nan if r.hours is None else r.hours for r in rows])
    for r, flag in zip(rows, plausibility_flags(hours)):
        if flag:
            sys.stderr.write(f"line {r.line}: subject {r.subject_id!r}: implausible duration {r.hours:.2f} h\n")
    if args.errors:
        run.emit("errors", args.errors, tio.csv_text(("line", "subject_id", "age_years", "error"),
                                                      [(r.line, r.subject_id, r.age, r.error) for r in bad]))
    run.finish(_default_manifest(args.output))
    if bad and args.strict:
        return EXIT_SCHEMA
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = Run(args, "simulate")
    if args.config:
        cfg = GeneratorConfig.from_dict(run.read_json("config", args.config))
    else:
        cfg = PRESETS[args.preset]()
    seed = _resolve_seed(run, args.seed if args.seed is not None else (cfg.seed if args.config else None))
    changes = {"seed": seed}
    if args.n_subjects is not None:
        changes["n_subjects"] = args.n_subjects
    cfg = cfg.with_(**changes)
    sim = generate_cohort(cfg)
    run.emit("measurements", args.output, tio.long_csv_text(sim.cohort))
    if args.covariates:
        if sim.covariates is None:
            raise SchemaError("this configuration generates no covariates")
        run.emit("covariates", args.covariates, tio.covariates_csv_text(sim.covariates))
        schema_path = args.schema or f"{args.covariates}.schema.json"
        run.emit("schema", schema_path, json.dumps(tio.covariate_schema(sim.covariates), indent=2) + "\n")
    if args.labels:
        names = cfg.group_names
        run.emit("labels", args.labels, tio.csv_text(
            ("subject_id", "group", "name"),
            [(s, int(k) + 1, names[k]) for s, k in zip(sim.cohort.subject_ids, sim.labels)],
        ))
    if args.config_out:
        run.emit("config", args.config_out, cfg.to_json())
    run.finish(_default_manifest(args.output))
    return EXIT_OK


def _strict_adequacy(args, model, cohort) -> int:
    rep = _adequacy_of(model, cohort)
    if not rep.passed:
        log.warning("adequacy criteria not met:\n%s", rep.to_table())
        if args.strict:
            return EXIT_ADEQUACY
    return EXIT_OK


def cmd_search(args) -> int:
    run = Run(args, "search")
    seed = _resolve_seed(run, args.seed)
    grid = args.grid or DEFAULT_GRID
    cohort = _load_cohort(run, args.input, grid, args.min_observed)
    init = InitStrategy(starts=args.starts, seed=seed)
    kw = dict(degree_policy=args.degree_policy, degree=args.degree, sigma_mode=args.sigma_mode, init=init,
              tol=args.tol, max_iter=args.max_iter, n_jobs=args.jobs)
    result = model_search(cohort, args.k, **kw)
    best = result.best
    log.info("selected K=%d degrees=%s BIC=%.3f", best.n_groups, list(best.spec.degrees), best.bic)
    doc = best.to_dict()
    doc["search"] = {"k_range": list(args.k), "degree_policy": result.degree_policy,
                     "parsimony_delta": result.parsimony_delta, "candidates": result.table()}
    run.emit_json("model", args.output, doc)
    if args.table:
        run.emit("candidates", args.table, tio.dicts_to_csv_text(result.table()))
    if args.sensitivity:
        sens_kw = {k: v for k, v in kw.items() if k != "degree_policy"}
        rep = sensitivity_refit(cohort, result, adequacy=lambda m, c: _adequacy_of(m, c).passed, **sens_kw)
        run.emit_json("sensitivity", args.sensitivity, rep.to_dict())
    code = _strict_adequacy(args, best, cohort)
    run.finish(_default_manifest(args.output))
    return code


def cmd_fit(args) -> int:
    run = Run(args, "fit")
    seed = _resolve_seed(run, args.seed)
    grid = args.grid or DEFAULT_GRID
    cohort = _load_cohort(run, args.input, grid, args.min_observed)
    degrees = args.degrees if args.degrees is not None else (args.degree,) * args.k
    if len(degrees) != args.k:
        raise SchemaError(f"--degrees lists {len(degrees)} values for {args.k} groups")
    spec = ModelSpec(args.k, degrees, sigma_mode=args.sigma_mode, transform=AgeTransform.from_grid(grid),
                     censor=args.censor)
    model = fit(spec, cohort, InitStrategy(starts=args.starts, seed=seed), tol=args.tol, max_iter=args.max_iter,
                n_jobs=args.jobs)
    run.emit_json("model", args.output, model.to_dict())
    code = _strict_adequacy(args, model, cohort)
    run.finish(_default_manifest(args.output))
    return code


def cmd_diagnose(args) -> int:
    run = Run(args, "diagnose")
    model = _load_model(run, args.model)
    cohort = _load_cohort(run, args.input, _model_grid(args, model), args.min_observed)
    rep = _adequacy_of(model, cohort)
    if args.format == "json":
        run.emit_json("adequacy", args.output, rep.to_dict())
    else:
        run.emit("adequacy", args.output, rep.to_table() + "\n")
    run.finish(_default_manifest(args.output))
    return EXIT_ADEQUACY if (args.strict and not rep.passed) else EXIT_OK


def cmd_assign(args) -> int:
    run = Run(args, "assign")
    model = _load_model(run, args.model)
    cohort = _load_cohort(run, args.input, _model_grid(args, model), args.min_observed)
    post = model.posterior(cohort)
    run.emit("assignments", args.output, tio.assignment_csv_text(assign(post), post.probs))
    run.finish(_default_manifest(args.output))
    return EXIT_OK


def _read_covariates(run: Run, args):
    if not args.covariates:
        raise SchemaError("regression needs --covariates")
    schema = args.schema or f"{args.covariates}.schema.json"
    return tio.parse_covariates(run.read("covariates", args.covariates),
                                run.read_json("schema", schema), str(args.covariates))


def _run_regression(run: Run, args, table, assignment, model: FittedModel | None, out: dict) -> None:
    if args.reference is not None:
        reference = args.reference - 1
        if not 0 <= reference < assignment.n_groups:
            raise SchemaError(f"--reference {args.reference} outside 1..{assignment.n_groups}")
    elif model is not None:
        reference = select_reference(model, args.ref_band)
    else:
        raise SchemaError("give --model (reference chosen by --ref-band) or --reference")
    table = table.select(assignment.subject_ids)
    unknown = [f for f in args.exclude_factors if f not in table.names]
    if unknown:
        raise SchemaError(f"--exclude-factors names unknown columns {unknown}")
    table = impute_simple(table.drop(args.exclude_factors))
    forced = [f for f in args.force_factors if f in table.names]
    result = two_stage(table, assignment, reference, alpha=args.screen_alpha, forced=forced,
                       n_classes=assignment.n_groups, n_jobs=args.jobs)
    names = [f"group{k + 1}" for k in range(assignment.n_groups)]
    rows = factor_report_rows(result, class_names=names)
    fit_ = result.fit
    doc = {
        "reference_group": reference + 1,
        "global_test": "lrt",
        "screen_alpha": args.screen_alpha,
        "forced_factors": forced,
        "excluded_factors": list(args.exclude_factors),
        "n_subjects": int(fit_.y.size),
        "n_imputed_cells": len(table.imputation_log),
        "fit": {"loglik": fit_.loglik, "converged": fit_.converged, "iterations": fit_.iterations},
        "screening": [r.__dict__ for r in result.screening],
        "global_p": {f: {"statistic": t.statistic, "df": t.df, "p_value": t.p_value}
                     for f, t in result.global_tests.items()},
        "odds_ratios": [{**o.__dict__, "cls": o.cls + 1} for o in odds_ratios(fit_)],
        "table": rows,
    }
    run.emit("regression_table", out["csv"], tio.dicts_to_csv_text(rows))
    if out.get("json"):
        run.emit_json("regression", out["json"], doc)
    if out.get("screening"):
        run.emit("screening", out["screening"], tio.dicts_to_csv_text([r.__dict__ for r in result.screening]))


def cmd_regress(args) -> int:
    run = Run(args, "regress")
    assignment = tio.parse_assignments(run.read("assignments", args.assignments), str(args.assignments))
    model = _load_model(run, args.model) if args.model else None
    if model is not None and model.n_groups != assignment.n_groups:
        raise SchemaError("model and assignment file disagree on the number of groups")
    table = _read_covariates(run, args)
    _run_regression(run, args, table, assignment, model, {"csv": args.output, "json": args.json,
                                                          "screening": args.screening})
    run.finish(_default_manifest(args.output))
    return EXIT_OK


def lattice(grid, step: float) -> np.ndarray:
    lo, hi = float(np.min(grid)), float(np.max(grid))
    n = int(round((hi - lo) / step)) + 1
    return np.round(np.linspace(lo, hi, n), 10)


def cmd_report(args) -> int:
    run = Run(args, "report")
    model = _load_model(run, args.model)
    cohort = _load_cohort(run, args.input, _model_grid(args, model), args.min_observed)
    # every input is read before the first output so all JSON files carry the final run_id
    table = _read_covariates(run, args) if args.covariates else None
    outdir = tio.ensure_dir(args.outdir)
    ages = lattice(model.grid, args.lattice_step)
    for k in range(model.n_groups):
        mean = predict_mean(model, k, ages)
        lo, hi = trajectory_band(model, k, ages, args.level)
        rows = [(tio.fmt_float(a), tio.fmt_float(m), tio.fmt_float(l), tio.fmt_float(h))
                for a, m, l, h in zip(ages, mean, lo, hi)]
        run.emit(f"band_group{k + 1}", outdir / f"band_group{k + 1}.csv",
                 tio.csv_text(("age", "mean", "band_lo", "band_hi"), rows))
    post = model.posterior(cohort)
    assignment = assign(post)
    rep = adequacy(model, post, assignment)
    run.emit_json("adequacy", outdir / "adequacy.json", rep.to_dict())
    run.emit("adequacy_table", outdir / "adequacy.txt", rep.to_table() + "\n")
    run.emit("assignments", outdir / "assignments.csv", tio.assignment_csv_text(assignment, post.probs))
    if table is not None:
        _run_regression(run, args, table, assignment, model, {
            "csv": outdir / "regression.csv", "json": outdir / "regression.json",
            "screening": outdir / "screening.csv"})
    run.finish(outdir / "manifest.json")
    return EXIT_ADEQUACY if (args.strict and not rep.passed) else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, manifest=True):
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    if manifest:
        p.add_argument("--manifest", help="where to write the run manifest (default: next to the output)")


def _estimation(p):
    p.add_argument("--starts", type=int, default=20, help="random EM starts per model (default 20)")
    p.add_argument("--seed", type=int, default=None, help="master seed; omitted = fresh entropy, recorded")
    p.add_argument("--tol", type=float, default=1e-8, help="relative log-likelihood tolerance")
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--sigma-mode", choices=("shared", "per-group"), default="shared")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (-1 = all cores)")


def _data(p, grid_default=None):
    p.add_argument("input", nargs="?", default="-", help="long-format measurement CSV ('-' = stdin)")
    p.add_argument("--grid", type=parse_grid_arg, default=grid_default,
                   help="comma-separated age grid (default 2,3,5.5 or the model's grid)")
    p.add_argument("--min-observed", type=int, default=2, help="eligibility: minimum observed ages")


def _regression_flags(p):
    p.add_argument("--covariates", help="wide covariate CSV")
    p.add_argument("--schema", help="JSON schema sidecar (default <covariates>.schema.json)")
    p.add_argument("--reference", type=int, help="reference group (1-based); overrides --ref-band")
    p.add_argument("--ref-band", type=parse_band, default=(11.0, 11.5),
                   help="band for choosing the reference group (default 11:11.5)")
    p.add_argument("--screen-alpha", type=float, default=0.20)
    p.add_argument("--force-factors", type=parse_names, default=DEFAULT_FORCED,
                   help="factors kept regardless of screening (default education,income,center; 'none')")
    p.add_argument("--exclude-factors", type=parse_names, default=(), help="covariates left out entirely")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajmix", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"trajmix {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("durations", help="night-sleep durations from bed/wake clock times")
    p.add_argument("input", nargs="?", default="-", help="CSV with subject_id,age_years,bedtime,waketime")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--errors", help="write itemized row errors to this CSV")
    p.add_argument("--strict", action="store_true", help="exit 2 if any row is malformed")
    _common(p)
    p.set_defaults(func=cmd_durations)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS), default="eden")
    src.add_argument("--config", help="generator config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("-o", "--output", default="-", help="long-format measurement CSV")
    p.add_argument("--covariates", help="write the covariate table here")
    p.add_argument("--schema", help="covariate schema path (default <covariates>.schema.json)")
    p.add_argument("--labels", help="write true group labels here")
    p.add_argument("--config-out", help="write the resolved generator config here")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("search", help="BIC search over group counts with degree pruning")
    _data(p)
    p.add_argument("--k", type=parse_k, default=parse_k("2..5"), help="group counts, e.g. 2..5 (default)")
    p.add_argument("--degree-policy", choices=("prune", "fixed"), default="prune")
    p.add_argument("--degree", type=int, default=2, help="starting polynomial order (default 2)")
    _estimation(p)
    p.add_argument("-o", "--output", default="-", help="selected model JSON")
    p.add_argument("--table", help="write the candidate table CSV")
    p.add_argument("--sensitivity", help="also refit on complete cases and write the comparison JSON")
    p.add_argument("--strict", action="store_true", help="exit 4 if the selected model fails adequacy")
    _common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fit", help="fit one mixture specification")
    _data(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--degrees", type=parse_degrees, help="per-group orders, e.g. 2,1,1,2,1")
    p.add_argument("--censor", type=parse_censor, help="censored-Normal bounds LO:HI (either may be empty)")
    _estimation(p)
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--strict", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="adequacy criteria of a fitted model")
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--strict", action="store_true", help="exit 4 if any criterion fails")
    _common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("assign", help="maximum-posterior group assignment")
    _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output", default="-")
    _common(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("regress", help="multinomial logit of covariates on assigned group")
    p.add_argument("--assignments", required=True)
    p.add_argument("--model", help="fitted model, used to choose the reference group")
    _regression_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output", default="-", help="odds-ratio table CSV")
    p.add_argument("--json", help="full regression results JSON")
    p.add_argument("--screening", help="screening ledger CSV")
    _common(p)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("report", help="bands, adequacy, assignments and regression in one directory")
    _data(p)
    p.add_argument("--model", required=True)
    _regression_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--outdir", required=True)
    p.add_argument("--lattice-step", type=float, default=0.05, help="age spacing of band files (years)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--strict", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="trajmix: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        sys.stderr.write(f"trajmix: error: {exc}\n")
        return EXIT_SCHEMA
    except EstimationError as exc:
        sys.stderr.write(f"trajmix: estimation failed: {exc}\n")
        return EXIT_ESTIMATION
    except ValueError as exc:
        sys.stderr.write(f"trajmix: error: {exc}\n")
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
