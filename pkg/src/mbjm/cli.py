"""``mbjm`` command line: fit, predict, validate, simulate, bench, cmt.

Exit codes: 0 success, 1 numerical failure, 2 input or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .cmt import MONTH, cmt_slopes, conditional_mean_trajectory, write_cmt_csv
from .data import ColumnMap, DataError, ModelConfig, load_csv_long, write_csv_long
from .datasets import load_pbc, pbc_config
from .engine import FittedMbjm, LayerFitError, PredictionError, RiskQuery, dynamic_risk, fit_mbjm
from .evaluation import bootstrap_fit, cross_validate, prediction_ci
from .simulation import SimScenario, accuracy_experiment, bias_experiment, generate, \
    timing_benchmark
from .survival import ConvergenceError, FitError

THREADS_ENV = "MBJM_THREADS"
log = logging.getLogger("mbjm")


class InputError(Exception):
    pass


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"config {path}: invalid JSON ({e})") from None


def _load_dataset(args, cfg):
    """Dataset and model config from ``--input`` and the JSON config.

    ``"format": "pbc"`` in the config reads a pbcseq/pbc2 export with the
    built-in PBC layout; otherwise the config's column map is used.
    """
    model_cfg = ModelConfig.from_json(cfg.get("model", {})) if "model" in cfg else None
    if cfg.get("format") == "pbc":
        ds = load_pbc(args.input)
        return ds, model_cfg or pbc_config()
    if args.input is None:
        raise InputError("--input is required")
    if not Path(args.input).exists():
        raise InputError(f"input file not found: {args.input}")
    if not cfg.get("biomarkers"):
        raise InputError("config must list the biomarkers (or set \"format\": \"pbc\")")
    ds = load_csv_long(args.input, ColumnMap.from_json(cfg))
    return ds, model_cfg or ModelConfig()


def _seeded(cfg: ModelConfig, seed):
    if seed is None:
        return cfg
    d = cfg.to_json()
    d["rng_seed"] = seed
    return ModelConfig.from_json(d)


def _out(path):
    return open(path, "w", newline="") if path else contextlib.nullcontext(sys.stdout)


def _dump_json(obj, path):
    with _out(path) as fh:
        json.dump(obj, fh, indent=1, default=float)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args):
    cfg = _read_config(args.config)
    ds, model_cfg = _load_dataset(args, cfg)
    model_cfg = _seeded(model_cfg, args.seed)
    fit = fit_mbjm(ds, model_cfg, threads=args.threads)
    out = fit.to_json()
    if args.bootstrap:
        bs = bootstrap_fit(ds, model_cfg, B=args.bootstrap, seed=model_cfg.rng_seed,
                           keep_models=True, estimate=fit)
        out["bootstrap"] = {"table": bs.table(), "failed": bs.n_failed,
                            "replicates": [m.to_json() for m in bs.models]}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=1)
    report = dict(fit.report)
    report["biomarkers"] = list(ds.biomarker_names)
    _dump_json(report, args.report)
    return 0


def _load_model(path):
    if path is None:
        raise InputError("--model is required")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"model file not found: {path}") from None
    reps = [FittedMbjm.from_json(r) for r in d.get("bootstrap", {}).get("replicates", [])]
    return FittedMbjm.from_json(d), reps


def cmd_predict(args):
    model, reps = _load_model(args.model)
    cfg = _read_config(args.config)
    if cfg.get("format") == "pbc":
        ds = load_pbc(args.input)
    else:
        if args.input is None:
            raise InputError("--input is required")
        schema = ColumnMap.from_json(cfg) if cfg.get("biomarkers") else \
            ColumnMap(covariates=model.covariate_names, biomarkers=model.biomarkers)
        ds = load_csv_long(args.input, schema, strict=False)
    if ds.biomarker_names != tuple(b.name for b in model.biomarkers):
        raise InputError("query biomarkers do not match the model: "
                         f"{list(ds.biomarker_names)}")
    horizons = args.horizon or [1.0]
    with _out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "s", "horizon", "risk", "lo", "hi"])
        for i in range(ds.n_subjects):
            t, y = ds.visits_of(i)
            ok = np.all(np.isfinite(y), axis=1)
            for j in np.flatnonzero(~ok):
                log.warning("subject %s: visit at %.4g has missing values, skipped",
                            ds.subject_ids[i], t[j])
            t, y = t[ok], y[ok]
            for j, s in enumerate(t):
                for h in horizons:
                    q = RiskQuery(ds.V[i], t[:j + 1], y[:j + 1], s, h)
                    try:
                        r = dynamic_risk(model, q)
                    except PredictionError as e:
                        log.warning("subject %s at s=%.4g: %s", ds.subject_ids[i], s, e)
                        continue
                    lo = hi = float("nan")
                    if reps:
                        rr = []
                        for m in reps:
                            try:
                                rr.append(dynamic_risk(m, q))
                            except PredictionError:
                                pass
                        lo, hi = prediction_ci(r, rr)
                    w.writerow([ds.subject_ids[i], repr(float(s)), h, repr(r), lo, hi])
    return 0


def cmd_validate(args):
    cfg = _read_config(args.config)
    ds, model_cfg = _load_dataset(args, cfg)
    models = tuple(args.models.split(","))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = cross_validate(ds, model_cfg, k=args.folds, landmarks=args.landmark or (1, 3, 5),
                             horizons=args.horizon or (1, 3), models=models,
                             seed=0 if args.seed is None else args.seed)
    if rep.failures:
        log.error("%d fold(s) failed: %s", len(rep.failures), rep.failures)
    if args.out:
        rep.to_csv(args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["model", "s", "horizon", "auc", "brier", "n_at_risk", "n_cases"])
        for r in rep.rows:
            w.writerow([r.model, r.s, r.horizon, r.auc, r.brier, r.n_at_risk, r.n_cases])
    return 1 if len(rep.failures) == args.folds else 0


def _scenario(args):
    if args.config:
        try:
            sc = SimScenario.load(args.config)
        except FileNotFoundError:
            raise InputError(f"scenario file not found: {args.config}") from None
        except (KeyError, TypeError) as e:
            raise InputError(f"scenario {args.config}: {e}") from None
    else:
        sc = SimScenario(args.kind, n=args.n, seed=0)
    if args.n is not None:
        sc.n = args.n
    if args.seed is not None:
        sc.seed = args.seed
    return sc


def cmd_simulate(args):
    sc = _scenario(args)
    if args.experiment == "data":
        if not args.out:
            raise InputError("--out directory is required for simulated data")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        train, valid = generate(sc)
        write_csv_long(train, out / "train.csv")
        write_csv_long(valid, out / "validation.csv")
        sc.save(out / "scenario.json")
        cfg = ColumnMap(covariates=train.covariate_names, biomarkers=train.biomarkers).to_json()
        cfg["model"] = ModelConfig("TP", sc.tau_max).to_json() if sc.kind == "MBJM-TP" \
            else ModelConfig().to_json()
        with open(out / "config.json", "w") as fh:
            json.dump(cfg, fh, indent=1)
        return 0
    if args.experiment == "bias":
        tab = bias_experiment(sc, n_grid=args.sizes or (300, 1500), reps=args.reps,
                              workers=args.threads)
        if args.out:
            tab.to_csv(args.out)
        else:
            rows = list(tab.rows())
            w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return 0
    models = ("MBJM-EX", "ORACLE") if sc.kind == "SJM" else ("MBJM-EX", "SPM")
    exp = accuracy_experiment(sc, reps=args.reps, landmarks=args.landmark or (1, 3, 5),
                              horizons=args.horizon or (1, 3), models=models,
                              workers=args.threads)
    rows = exp.table()
    with _out(args.out) as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_bench(args):
    res = timing_benchmark(args.sizes or (200, 500, 1000, 1500, 2000, 3000), reps=args.reps,
                           seed=0 if args.seed is None else args.seed)
    with _out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mean_seconds", "convergence_rate"])
        for n, t, c in zip(res.n_grid, res.mean_seconds, res.convergence_rate):
            w.writerow([n, t, c])
    log.info("log-log slope %.3f", res.loglog_slope())
    return 0


def cmd_cmt(args):
    cfg = _read_config(args.config)
    ds, _ = _load_dataset(args, cfg)
    if args.biomarker not in ds.biomarker_names:
        raise InputError(f"unknown biomarker {args.biomarker!r}; "
                         f"available: {list(ds.biomarker_names)}")
    rows = conditional_mean_trajectory(ds, args.biomarker, strata=args.strata,
                                       bin_width=args.bin_width)
    if args.out:
        write_cmt_csv(rows, args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["stratum", "bin_start", "bin_end", "mean", "count"])
        for r in rows:
            w.writerow([r.stratum, r.bin_start, r.bin_end, r.mean, r.count])
    for k, b in cmt_slopes(rows).items():
        log.info("stratum %d: slope %.4g per year", k, b)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mbjm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (column map and model settings)")
        sp.add_argument("--input", help="long-format CSV")
        sp.add_argument("--out", help="output path (stdout if omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--horizon", type=float, action="append")
        sp.add_argument("--landmark", type=float, action="append")
        return sp

    sp = common(sub.add_parser("fit", help="fit an MBJM and write its JSON"))
    sp.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates B")
    sp.add_argument("--report", help="fit report JSON (stdout if omitted)")
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("predict", help="risk at every visit of every subject"))
    sp.add_argument("--model", help="model JSON from `fit`")
    sp.set_defaults(func=cmd_predict)

    sp = common(sub.add_parser("validate", help="k-fold cross-validated AUC and Brier"))
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--models", default="MBJM,SPM")
    sp.set_defaults(func=cmd_validate)

    sp = common(sub.add_parser("simulate", help="simulated data or Monte Carlo experiments"))
    sp.add_argument("--kind", default="MBJM-EX", choices=("MBJM-EX", "MBJM-TP", "SJM"))
    sp.add_argument("--experiment", default="data", choices=("data", "bias", "accuracy"))
    sp.add_argument("-n", type=int)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--sizes", type=int, nargs="+")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("bench", help="fit time versus sample size"))
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--sizes", type=int, nargs="+")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("cmt", help="conditional mean trajectories"))
    sp.add_argument("--biomarker", required=True)
    sp.add_argument("--strata", type=int, nargs="+")
    sp.add_argument("--bin-width", type=float, default=MONTH)
    sp.set_defaults(func=cmd_cmt)
    return p


def _classify(exc):
    wrapped = isinstance(exc, LayerFitError)
    if wrapped:
        exc = exc.__cause__ or exc
    if isinstance(exc, (InputError, DataError, FileNotFoundError)):
        return 2
    if isinstance(exc, (ConvergenceError, FitError, PredictionError, LayerFitError,
                        FloatingPointError, np.linalg.LinAlgError)) or wrapped:
        return 1
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="mbjm: %(levelname)s: %(message)s")
    if args.threads < 1:
        print("mbjm: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped onto exit codes below
        code = _classify(e)
        if code is None:
            raise
        kind = "input error" if code == 2 else "numerical failure"
        print(json.dumps({"error": kind, "type": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
