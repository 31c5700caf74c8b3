"""Command-line entry point: ``milr fit | cv | predict | simulate | rerun``.

Exit codes are 0 on success, 1 on a numeric or runtime failure and 2 on a
usage error (bad flags, missing input files, unknown scheme). Every command
writes a JSON run manifest holding the resolved arguments, seeds, version,
per-phase timing and a SHA-256 of each output, and ``milr rerun`` replays
a manifest and checks that the outputs come out byte-identical.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import CsvSchema, DataError, StandardizationStats, load_csv, standardize
from .em import FitConfig, FitError, FitResult, fit_milr, fit_path, lambda_grid, lambda_max
from .model import Coefficients, accuracy, auc, bag_probs
from .selection import bic, cross_validate, select_lambda_bic

logger = logging.getLogger("milr")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "MILR_SEED"
MODEL_FORMAT = "milr-model/1"


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    version: str = __version__
    timing: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))


@contextlib.contextmanager
def _phase(timing: dict, name: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timing[name] = round(time.perf_counter() - t0, 6)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str, manifest: RunManifest) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    manifest.outputs[path.name] = _sha256(path)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _cfg(args) -> FitConfig:
    return FitConfig(max_em_iter=args.max_iter, tol=args.tol, clip=args.clip, max_cd_sweeps=args.cd_sweeps)


def _schema(args) -> CsvSchema:
    return CsvSchema(bag_id=args.bag_id, label=args.label_column)


def _lambda_arg(text: str):
    if text == "max":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a nonnegative number or 'max'") from None
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError("expected a nonnegative number or 'max'")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


# ---------------------------------------------------------------------------
# model files


def model_dict(fit: FitResult, stats: StandardizationStats | None, feature_names, lam_max: float) -> dict:
    raw = None
    if stats is not None:
        b0, b = stats.to_raw_scale(fit.coef.intercept, fit.coef.beta)
        raw = Coefficients(b0, b).to_dict()
    return {
        "format": MODEL_FORMAT,
        "version": __version__,
        "feature_names": list(feature_names),
        "lambda_max": lam_max,
        "standardization": None if stats is None else stats.to_dict(),
        "fit": fit.to_dict(),
        "raw_coefficients": raw,
    }


def load_model(path: Path) -> tuple[Coefficients, StandardizationStats | None, dict]:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unrecognized model format {d.get('format')!r}")
        coef = FitResult.from_dict(d["fit"]).coef
        stats = None if d["standardization"] is None else StandardizationStats.from_dict(d["standardization"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed model file ({exc})") from None
    return coef, stats, d


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _prepare(ds, standardize_data: bool):
    if not standardize_data:
        return ds, None
    return standardize(ds)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    with _phase(manifest.timing, "load"):
        ds = load_csv(_input(args.data), _schema(args))
    with _phase(manifest.timing, "standardize"):
        sds, stats = _prepare(ds, not args.no_standardize)
        lam_max = lambda_max(sds)
    lam = lam_max if args.lam == "max" else args.lam
    with _phase(manifest.timing, "fit"):
        fit = fit_milr(sds, lam, _cfg(args))
    if not fit.converged:
        logger.warning("fit did not converge in %d iterations", fit.iterations)
    _write(out, _dump(model_dict(fit, stats, ds.feature_names, lam_max)), manifest)
    print(f"lambda={lam:.6g} nonzero={fit.n_nonzero} deviance={fit.deviance:.6f} converged={fit.converged}")
    return EXIT_OK


def cmd_cv(args, manifest: RunManifest) -> int:
    out = Path(args.out_dir)
    manifest.seeds["folds"] = args.seed
    cfg = _cfg(args)
    with _phase(manifest.timing, "load"):
        ds = load_csv(_input(args.data), _schema(args))
    with _phase(manifest.timing, "standardize"):
        sds, stats = _prepare(ds, not args.no_standardize)
        lam_max = lambda_max(sds)
        grid = lambda_grid(lam_max, args.eps, args.grid_size)
    if args.select == "cv":
        with _phase(manifest.timing, "cross_validate"):
            report = cross_validate(ds, grid, args.folds, args.seed, cfg, jobs=args.jobs)
        chosen = report.chosen_lambda
        _write(out / "cv_report.csv", report.to_csv(), manifest)
        _write(out / "cv_report.json", _dump(report.to_dict()), manifest)
    with _phase(manifest.timing, "path"):
        path = fit_path(sds, grid, cfg)
    if args.select == "bic":
        chosen = select_lambda_bic(path, sds)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "deviance", "n_nonzero", "bic"])
        for f in path.fits:
            w.writerow([repr(float(f.lam)), repr(float(f.deviance)), f.n_nonzero, repr(float(bic(f, sds)))])
        _write(out / "bic.csv", buf.getvalue(), manifest)
    fit = path.fits[int(np.flatnonzero(path.lambdas == chosen)[0])]
    if fit.error is not None:
        raise FitError(f"fit at the chosen penalty failed: {fit.error}")
    _write(out / "path.json", _dump(path.to_dict()), manifest)
    _write(out / "model.json", _dump(model_dict(fit, stats, ds.feature_names, lam_max)), manifest)
    print(f"select={args.select} lambda={chosen:.6g} nonzero={fit.n_nonzero} deviance={fit.deviance:.6f}")
    return EXIT_OK


def cmd_predict(args, manifest: RunManifest) -> int:
    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie strictly between 0 and 1")
    coef, stats, meta = load_model(_input(args.model))
    data = _input(args.data)
    with data.open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    labeled = args.label_column in header
    with _phase(manifest.timing, "load"):
        ds = load_csv(data, _schema(args), require_label=False)
    if ds.p != len(coef.beta):
        raise DataError(f"model has {len(coef.beta)} features but {data} has {ds.p}")
    if stats is not None:
        ds = stats.apply(ds)
    with _phase(manifest.timing, "predict"):
        probs = bag_probs(coef, ds)
    pred = (probs >= args.threshold).astype(int)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bag_id", "probability", "predicted"])
    for bid, pr, z in zip(ds.ids, probs, pred):
        w.writerow([bid, repr(float(pr)), int(z)])
    _write(Path(args.out), buf.getvalue(), manifest)
    if labeled:
        metrics = {"n_bags": ds.n, "threshold": args.threshold, "accuracy": accuracy(pred, ds.labels)}
        try:
            metrics["auc"] = auc(probs, ds.labels)
        except ValueError:
            metrics["auc"] = None
        if args.metrics:
            _write(Path(args.metrics), _dump(metrics), manifest)
        auc_txt = "undefined" if metrics["auc"] is None else f"{metrics['auc']:.4f}"
        print(f"accuracy={metrics['accuracy']:.4f} auc={auc_txt}")
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    from . import simulate

    name = args.scheme.upper()
    if name not in simulate.SCHEMES:
        raise UsageError(f"unknown scheme {args.scheme!r}; choose from table1, A, D, E, F")
    out = Path(args.out_dir)
    manifest.seeds.update(base=args.seed, rule="SeedSequence([seed, replicate, attempt])")
    cfg = _cfg(args)
    B = args.replicates
    with _phase(manifest.timing, "experiment"):
        if name == "TABLE1":
            if B < 2:
                raise UsageError("table1 needs at least 2 replicates")
            res = simulate.run_estimation_experiment(B, args.seed, cfg, jobs=args.jobs)
            _write(out / "table1.csv", res.to_csv(), manifest)
        elif name == "A":
            res = simulate.run_selection_experiment(
                B, args.seed, args.selector, k=args.folds, K=args.grid_size, eps=args.eps, cfg=cfg, jobs=args.jobs
            )
            _write(out / f"table2_A_{args.selector}.csv", res.to_csv(), manifest)
            _write(out / f"table2_A_{args.selector}_replicates.csv", res.replicates_csv(), manifest)
        else:
            res = simulate.run_comparison_experiment(
                name, B, args.seed, k=args.folds, K=args.grid_size, eps=args.eps,
                nested_cv=args.nested_cv, cfg=cfg, jobs=args.jobs,
            )
            _write(out / f"table3_{name}.csv", res.to_csv(), manifest)
    manifest.config["regenerations"] = res.regenerations
    print(f"scheme={name} replicates={B} outputs={','.join(sorted(manifest.outputs))}")
    return EXIT_OK


def cmd_rerun(args, manifest: RunManifest) -> int:
    src = _input(args.manifest)
    try:
        old = RunManifest.from_json(src.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"{src}: not a run manifest ({exc})") from None
    if old.command == "rerun" or old.command not in COMMANDS:
        raise UsageError(f"{src}: cannot replay command {old.command!r}")
    config = dict(old.config)
    config.pop("regenerations", None)
    if args.out_dir is not None:
        dest = Path(args.out_dir)
        for key in ("out", "metrics", "manifest_out"):
            if config.get(key):
                config[key] = str(dest / Path(config[key]).name)
        if "out_dir" in config:
            config["out_dir"] = str(dest)
    else:
        # keep the original manifest untouched
        config["manifest_out"] = str(src.with_name(src.stem + ".rerun.json"))
    replay = argparse.Namespace(**config)
    inner = _run(old.command, replay)
    manifest.outputs = inner.outputs
    mismatched = sorted(k for k, v in old.outputs.items() if inner.outputs.get(k) != v)
    if mismatched:
        print(f"rerun differs in: {', '.join(mismatched)}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"rerun reproduced {len(old.outputs)} output(s) byte-identically")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "predict": cmd_predict, "simulate": cmd_simulate, "rerun": cmd_rerun}


def _manifest_path(command: str, args) -> Path:
    if getattr(args, "manifest_out", None):
        return Path(args.manifest_out)
    if command in ("cv", "simulate"):
        return Path(args.out_dir) / "manifest.json"
    out = Path(args.out)
    return out.with_name(out.stem + ".manifest.json")


def _run(command: str, args) -> RunManifest:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    manifest = RunManifest(command, config, {})
    status = COMMANDS[command](args, manifest)
    if status != EXIT_OK:
        raise _Status(status)
    _manifest_path(command, args).parent.mkdir(parents=True, exist_ok=True)
    _manifest_path(command, args).write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


class _Status(Exception):
    def __init__(self, code: int):
        self.code = code


# ---------------------------------------------------------------------------
# argument parsing


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    d = FitConfig()
    g = p.add_argument_group("fitting")
    g.add_argument("--max-iter", type=_positive_int, default=d.max_em_iter, help="EM iteration cap")
    g.add_argument("--tol", type=float, default=d.tol, help="convergence threshold on coefficient change")
    g.add_argument("--clip", type=float, default=d.clip, help="probability clip for the working weights")
    g.add_argument("--cd-sweeps", type=_positive_int, default=d.max_cd_sweeps,
                   help="coordinate-descent sweeps per M-step")


def _add_data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV with one row per instance")
    p.add_argument("--bag-id", default="bag_id", help="bag identifier column (default: bag_id)")
    p.add_argument("--label-column", default="label", help="bag label column (default: label)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milr", description="Multiple-instance logistic regression with LASSO.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit at one penalty")
    _add_data_options(p)
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, required=True, help="penalty value or 'max'")
    p.add_argument("--no-standardize", action="store_true", help="fit on the columns as given")
    p.add_argument("--out", required=True, help="model JSON to write")
    p.add_argument("--manifest", dest="manifest_out", help="manifest path (default: next to --out)")
    _add_fit_options(p)

    p = sub.add_parser("cv", help="choose the penalty by cross-validation or BIC and refit")
    _add_data_options(p)
    p.add_argument("--folds", type=int, default=10, help="number of CV folds (default: 10)")
    p.add_argument("--grid-size", type=int, default=20, help="number of penalties (default: 20)")
    p.add_argument("--eps", type=float, default=0.001, help="smallest penalty as a fraction of the largest")
    p.add_argument("--seed", type=int, default=None, help=f"fold seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--select", choices=("cv", "bic"), default="cv")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel fold fits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", dest="manifest_out")
    _add_fit_options(p)

    p = sub.add_parser("predict", help="score bags with a fitted model")
    p.add_argument("--model", required=True, help="model JSON from fit or cv")
    _add_data_options(p)
    p.add_argument("--threshold", type=float, default=0.5, help="call a bag positive at or above this")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.add_argument("--metrics", help="also write ACC/AUC JSON here when labels are present")
    p.add_argument("--manifest", dest="manifest_out")

    p = sub.add_parser("simulate", help="run a simulation experiment")
    p.add_argument("--scheme", required=True, help="table1, A, D, E or F")
    p.add_argument("--replicates", type=_positive_int, default=None, help="number of replicates")
    p.add_argument("--seed", type=int, default=None, help=f"base seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--selector", choices=("cv", "bic"), default="cv", help="penalty selector for scheme A")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--grid-size", type=int, default=20)
    p.add_argument("--eps", type=float, default=0.001)
    p.add_argument("--nested-cv", action="store_true", help="inner CV per training set in D-F")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel replicates")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", dest="manifest_out")
    _add_fit_options(p)

    p = sub.add_parser("rerun", help="replay a run manifest and compare outputs")
    p.add_argument("--manifest", required=True, help="manifest JSON written by an earlier command")
    p.add_argument("--out-dir", default=None, help="write replayed outputs here instead")
    p.add_argument("--manifest-out", dest="manifest_out", default=None)
    return parser


_DEFAULT_REPLICATES = {"TABLE1": 100, "A": 50, "D": 20, "E": 20, "F": 20}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        if args.command == "simulate" and args.replicates is None:
            args.replicates = _DEFAULT_REPLICATES.get(args.scheme.upper(), 1)
        if args.command == "rerun":
            manifest = RunManifest("rerun", {}, {})
            status = cmd_rerun(args, manifest)
            if args.manifest_out:
                Path(args.manifest_out).write_text(manifest.to_json() + "\n", encoding="utf-8")
            return status
        _run(args.command, args)
        return EXIT_OK
    except _Status as exc:
        return exc.code
    except UsageError as exc:
        print(f"milr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"milr: error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FitError, ValueError, RuntimeError) as exc:
        print(f"milr: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
