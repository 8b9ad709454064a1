"""Command-line front end: simulate, fit, cv, evaluate, predict, diagnose.

Every command reads/writes UTF-8 CSV and JSON under --out and stamps a
manifest with the hash of its effective configuration, so rerunning a
command sequence with the same seeds reproduces the artifacts byte for
byte.  Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .fit import (
    AdamConfig,
    CVGrid,
    ElasticNetConfig,
    cross_validate,
    fit_baseline_cox,
    fit_coxsig,
    fit_ncde,
    mixed_metric,
)
from .intensity import (
    CoxSigParams,
    QuadratureConfig,
    conditional_survival,
    params_from_json,
    risk_matrix,
)
from .latentcde import standardize_apply, standardize_fit
from .metrics import EvalPoint, build_report
from .simulate import (
    OUConfig,
    TumorConfig,
    fbm_paths,
    ou_hitting_dataset,
    simulate_from_intensity,
    tumor_growth_dataset,
)
from .timeseries import Dataset, load_dataset, save_dataset

METHODS = ("coxsig", "coxsig+", "ncde", "cox-baseline")


def _config_hash(args_dict) -> str:
    blob = json.dumps(args_dict, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, args_dict, extra=None):
    manifest = {
        "command": command,
        "config": args_dict,
        "config_hash": _config_hash(args_dict),
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> Dataset:
    return load_dataset(args.dataset, args.records)


def _quad(args) -> QuadratureConfig:
    return QuadratureConfig(substeps_per_interval=args.quad_substeps)


def _eval_points(dataset: Dataset, args):
    events = dataset.event_times(events_only=True)
    if events.size == 0:
        raise ValidationError("no observed events to anchor the time grid")
    lo, hi = np.percentile(events, args.percentiles)
    if not lo < hi:
        raise ValidationError("degenerate percentile range for the time grid")
    h = (hi - lo) / args.n_points
    return [EvalPoint(t=float(lo + j * h), delta_t=args.delta_t)
            for j in range(args.n_points)]


def _write_csv(path: Path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    if args.gen == "ou":
        cfg = OUConfig(n=args.n, seed=args.seed, keep_every=args.keep_every,
                       grid_points=args.grid_points, horizon=args.horizon)
        dataset, _ = ou_hitting_dataset(cfg)
        cfg_dict = cfg.__dict__
    elif args.gen == "tumor":
        cfg = TumorConfig(n=args.n, seed=args.seed, keep_every=args.keep_every,
                          grid_points=args.grid_points, horizon=args.horizon)
        dataset, _ = tumor_growth_dataset(cfg)
        cfg_dict = cfg.__dict__
    elif args.gen == "thinning":
        if not args.model:
            raise ValidationError("--model is required for the thinning generator")
        truth = params_from_json(json.loads(Path(args.model).read_text()))
        if not isinstance(truth, CoxSigParams):
            raise ValidationError("thinning truth must be a signature model")
        drivers = fbm_paths(args.hurst, args.grid_points, args.horizon,
                            channels=truth.d_channels - 1, seed=args.seed,
                            n_paths=args.n)
        dataset = simulate_from_intensity(truth, drivers, args.horizon,
                                          seed=args.seed)
        cfg_dict = {"model": args.model, "hurst": args.hurst, "n": args.n,
                    "grid_points": args.grid_points, "horizon": args.horizon,
                    "seed": args.seed}
    else:
        raise ValidationError(f"unknown generator {args.gen!r}")

    save_dataset(dataset, out / "longitudinal.csv", out / "records.csv")
    censoring = float(np.mean([1 - r.event_indicator for r in dataset.records]))
    avg_obs = float(np.mean([r.path.n_obs for r in dataset.records]))
    extra = {"censoring_rate": censoring, "avg_observations": avg_obs,
             "n_records": dataset.n}
    if not args.no_figures:
        from .plotting import event_histogram_figure

        (out / "figures").mkdir(exist_ok=True)
        event_histogram_figure(dataset, out / "figures" / "event_times.png")
    _write_manifest(out, "simulate", {"gen": args.gen, **cfg_dict}, extra)
    print(f"censoring rate: {censoring:.4f}")
    print(f"average observations per record: {avg_obs:.1f}")
    return 0


def _fit_one(dataset, method, args, quad, seed):
    pen = ElasticNetConfig(eta1=args.eta1, eta2=args.eta2, gamma=args.gamma)
    if method == "coxsig":
        return fit_coxsig(dataset, args.depth, pen, quad)
    if method == "coxsig+":
        return fit_coxsig(dataset, args.depth, pen, quad, plus_variant=True)
    if method == "cox-baseline":
        return fit_baseline_cox(dataset, pen, quad, depth=args.depth)
    if method == "ncde":
        cfg = AdamConfig(learning_rate=args.lr, epochs=args.epochs,
                         batch_size=args.batch_size)
        return fit_ncde(dataset, cfg, quad, seed=seed)
    raise ValidationError(f"unknown method {method!r}")


def _model_blob(params, extra=None):
    blob = params.to_json()
    if extra:
        blob.update(extra)
    return blob


def cmd_fit(args) -> int:
    out = _out_dir(args)
    quad = _quad(args)
    dataset = _load(args)
    train, test, test_idx = dataset.split(0.2, args.seed)
    extra_blob = {"test_ids": [r.record_id for r in test.records]}
    if args.method == "ncde":
        mean, std = standardize_fit(train)
        train_std = standardize_apply(train, mean, std)
        params, trace = _fit_one(train_std, args.method, args, quad, args.seed)
        extra_blob["standardization"] = {"mean": mean.tolist(),
                                         "std": std.tolist()}
        trace_rows = [["epoch", "mean_nll"]] + [
            [i + 1, v] for i, v in enumerate(trace)
        ]
        if not args.no_figures:
            from .plotting import loss_trace_figure

            (out / "figures").mkdir(exist_ok=True)
            loss_trace_figure(trace, out / "figures" / "trace.png")
    else:
        params, trace = _fit_one(train, args.method, args, quad, args.seed)
        trace_rows = [["iter", "objective", "step"]] + [list(r) for r in trace]
        if not args.no_figures:
            from .plotting import trace_figure

            (out / "figures").mkdir(exist_ok=True)
            trace_figure(trace, out / "figures" / "trace.png")
    (out / "model.json").write_text(
        json.dumps(_model_blob(params, extra_blob), indent=2, sort_keys=True)
    )
    _write_csv(out / "trace.csv", trace_rows)
    _write_manifest(out, "fit", vars(args))
    print(f"fitted {args.method} on {train.n} records ({test.n} held out)")
    return 0


def _grid_from_file(path) -> CVGrid:
    blob = json.loads(Path(path).read_text())
    return CVGrid(eta1_values=tuple(blob.get("eta1", CVGrid().eta1_values)),
                  eta2_values=tuple(blob.get("eta2", CVGrid().eta2_values)),
                  depths=tuple(blob.get("depths", CVGrid().depths)))


def cmd_cv(args) -> int:
    out = _out_dir(args)
    quad = _quad(args)
    dataset = _load(args)
    train, test, _ = dataset.split(0.2, args.seed)
    pts = _eval_points(train, args)
    grid = _grid_from_file(args.grid_file) if args.grid_file else CVGrid()
    extra_blob = {"test_ids": [r.record_id for r in test.records]}

    if args.method in ("coxsig", "coxsig+"):
        res = cross_validate(train, grid, pts, seed=args.seed, quad=quad,
                             plus_variant=args.method == "coxsig+")
        params, table, trace = res.params, res.table, res.refit_trace
        best = {"eta1": res.eta1, "eta2": res.eta2, "depth": res.depth}
    elif args.method == "cox-baseline":
        tr, val, _ = train.split(grid.val_fraction, args.seed)
        table, best_key = [], None
        for eta in grid.eta1_values:
            for depth in grid.depths:
                pen = ElasticNetConfig(eta1=eta, eta2=eta, gamma=args.gamma)
                cand, _ = fit_baseline_cox(tr, pen, quad, depth=depth)
                score, _ = mixed_metric(cand, val, pts, quad)
                table.append((eta, eta, depth, score))
                key = (score, 2 * eta, -depth)
                if best_key is None or key > best_key[0]:
                    best_key = (key, eta, depth)
        _, eta, depth = best_key
        params, trace = fit_baseline_cox(
            train, ElasticNetConfig(eta1=eta, eta2=eta, gamma=args.gamma),
            quad, depth=depth)
        best = {"eta1": eta, "eta2": eta, "depth": depth}
    else:
        raise ValidationError("cv supports coxsig, coxsig+ and cox-baseline")

    (out / "model.json").write_text(
        json.dumps(_model_blob(params, {**extra_blob, "cv_best": best}),
                   indent=2, sort_keys=True))
    _write_csv(out / "cv_table.csv",
               [["eta1", "eta2", "depth", "mixed_metric"]] + [list(r) for r in table])
    _write_csv(out / "trace.csv",
               [["iter", "objective", "step"]] + [list(r) for r in trace])
    if not args.no_figures:
        from .plotting import trace_figure

        (out / "figures").mkdir(exist_ok=True)
        trace_figure(trace, out / "figures" / "trace.png")
    _write_manifest(out, "cv", vars(args), {"best": best})
    print(f"selected eta1={best['eta1']:.6g} eta2={best['eta2']:.6g} "
          f"depth={best['depth']}")
    return 0


def _load_model(args):
    blob = json.loads(Path(args.model).read_text())
    params = params_from_json(blob)
    return params, blob


def _maybe_standardized(dataset, blob):
    if "standardization" in blob:
        mean = np.asarray(blob["standardization"]["mean"])
        std = np.asarray(blob["standardization"]["std"])
        return standardize_apply(dataset, mean, std)
    return dataset


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    quad = _quad(args)
    dataset = _load(args)
    params, blob = _load_model(args)
    if args.use_model_split:
        ids = set(blob.get("test_ids", []))
        keep = [i for i, r in enumerate(dataset.records) if r.record_id in ids]
        if not keep:
            raise ValidationError("model file holds no matching test ids")
        dataset = dataset.subset(keep)
    dataset = _maybe_standardized(dataset, blob)
    pts = _eval_points(dataset, args)
    risks = risk_matrix(params, dataset, pts, quad)
    report = build_report(risks, dataset, pts)
    (out / "metrics.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True))
    _write_csv(out / "metrics.csv", report.csv_rows())
    if not args.no_figures:
        from .plotting import metric_figure

        (out / "figures").mkdir(exist_ok=True)
        metric_figure(report, out / "figures" / "metrics.png")
    _write_manifest(out, "evaluate", vars(args), {"averages": report.averages})
    avg = report.averages
    c = avg.get("c_index")
    b = avg.get("brier")
    print(f"averaged C-index: {'undefined' if c is None else f'{c:.4f}'}")
    print(f"averaged Brier score: {'undefined' if b is None else f'{b:.4f}'}")
    return 0


def cmd_predict(args) -> int:
    out = _out_dir(args)
    quad = _quad(args)
    dataset = _load(args)
    params, blob = _load_model(args)
    dataset = _maybe_standardized(dataset, blob)
    dts = np.linspace(0.0, args.delta_t, args.points + 1)[1:]
    pts = [(args.t, float(dt)) for dt in dts]
    risks = risk_matrix(params, dataset, pts, quad)
    rows = [["id", "t", "delta_t", "survival"]]
    curves = []
    for i, rec in enumerate(dataset.records):
        for j, dt in enumerate(dts):
            rows.append([rec.record_id, args.t, float(dt), risks[i, j]])
        curves.append((rec.record_id, dts, risks[i]))
    _write_csv(out / "survival_curves.csv", rows)
    if not args.no_figures:
        from .plotting import survival_curves_figure

        (out / "figures").mkdir(exist_ok=True)
        survival_curves_figure(curves, out / "figures" / "survival_curves.png")
    _write_manifest(out, "predict", vars(args))
    print(f"wrote survival curves for {dataset.n} records")
    return 0


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    from .diagnostics import run_suite

    report = run_suite(seed=args.seed, replicates=args.replicates,
                       quad=_quad(args))
    (out / "diagnostics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=float))
    if not args.no_figures:
        from .diagnostics import DiscretizationResult
        from .plotting import discretization_figure

        d = report["discretization"]
        (out / "figures").mkdir(exist_ok=True)
        discretization_figure(
            DiscretizationResult(meshes=d["meshes"], errors=d["errors"],
                                 bounds=d["bounds"], slope=d["slope"],
                                 bound_ok=d["bound_ok"]),
            out / "figures" / "discretization.png")
    _write_manifest(out, "diagnose", vars(args),
                    {"all_passed": report["all_passed"]})
    for name, entry in report.items():
        if isinstance(entry, dict):
            print(f"{name}: {'PASS' if entry['passed'] else 'FAIL'}")
    return 0 if report["all_passed"] else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sigsurv",
        description="Dynamic survival analysis with signature and "
                    "controlled-ResNet intensity models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, dataset=True, model=False, seed=True):
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="longitudinal CSV (id,time,features...)")
            p.add_argument("--records", required=True,
                           help="records CSV (id,event_time,event,statics...)")
        if model:
            p.add_argument("--model", required=True, help="fitted model JSON")
        if seed:
            p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--quad-substeps", type=int, default=4)
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--gen", required=True, choices=("ou", "tumor", "thinning"))
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--grid-points", type=int, default=1000)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--keep-every", type=int, default=1)
    p.add_argument("--hurst", type=float, default=0.6)
    p.add_argument("--model", help="signature-model JSON for thinning truth")
    add_common(p, dataset=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model with fixed hyperparameters")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--eta1", type=float, default=0.0)
    p.add_argument("--eta2", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=float(np.exp(-4)))
    p.add_argument("--batch-size", type=int, default=32)
    add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="cross-validate penalties and depth")
    p.add_argument("--method", required=True,
                   choices=("coxsig", "coxsig+", "cox-baseline"))
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--delta-t", type=float, required=True)
    p.add_argument("--percentiles", type=float, nargs=2, default=(5.0, 50.0))
    p.add_argument("--n-points", type=int, default=10)
    p.add_argument("--grid-file", help="JSON grid override")
    add_common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("evaluate", help="score a fitted model on a dataset")
    p.add_argument("--delta-t", type=float, required=True)
    p.add_argument("--percentiles", type=float, nargs=2, default=(5.0, 50.0))
    p.add_argument("--n-points", type=int, default=10)
    p.add_argument("--use-model-split", action="store_true",
                   help="evaluate only the records held out at fit time")
    add_common(p, model=True, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="export conditional survival curves")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--delta-t", type=float, required=True,
                   help="largest window length")
    p.add_argument("--points", type=int, default=50)
    add_common(p, model=True, seed=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="run the numerical theory checks")
    p.add_argument("--replicates", type=int, default=200)
    add_common(p, dataset=False)
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
