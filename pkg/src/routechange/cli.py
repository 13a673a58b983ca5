"""``routechange`` command line: synth, featurize, train, predict, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

Settings resolve as defaults < ``--config`` TOML file < command-line flags. The
TOML file may hold top-level keys (``seed``, ``jobs``) and one table per
subcommand, e.g. ``[train] mode = "single:leaf31"``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

from . import __version__, experiment, pipeline, synth
from .errors import CorruptEncoding, DataError, InvalidConfig, VersionMismatch
from .features import FeatureConfig, build_features, load_sidecar, sidecar_json
from .hyperopt import TrialHistory
from .ingest import atomic_write, load_dataset, write_csv, write_jsonl
from .stacking import THRESHOLD_MODES

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("routechange")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
GLOBAL_KEYS = ("seed", "jobs")

DEFAULTS = {
    "synth": {"paths": 500, "obs": 100, "change_rate": 0.02, "seed": 0, "benchmark": False,
              "ground_truth": None},
    "featurize": {"tables_in": None, "tables_out": None},
    "train": {"mode": "stacked", "seed": 0, "folds": 5, "hyperopt_trials": 0,
              "threshold_mode": "oof", "history": None},
    "predict": {},
    "evaluate": {"model": None, "rounds": None, "models": None, "seed": 0, "folds": 5,
                 "threshold_mode": "oof", "csv": None, "output": None},
    "report": {},
}


@dataclass
class RunConfig:
    subcommand: str
    input: str | None = None
    output: str | None = None
    seed: int = 0
    mode: str | None = None
    folds: int = 5
    hyperopt_trials: int = 0
    threshold_mode: str = "oof"
    rounds: int | None = None
    models: list[str] | None = None
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="routechange", description="Route-change detection from traceroutes.",
                     argument_default=S)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML file with default settings")
    parser.add_argument("--jobs", type=int, help="parallel workers (default: logical cores)")
    parser.add_argument("--seed", type=int, help="seed for all randomness")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p, seed=True):
        p.add_argument("--config", help=argparse.SUPPRESS)
        p.add_argument("--jobs", type=int, help=argparse.SUPPRESS)
        if seed:
            p.add_argument("--seed", type=int, help="seed for all randomness")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset", argument_default=S)
    common(p)
    p.add_argument("--paths", type=int, help="number of source/destination paths")
    p.add_argument("--obs", type=int, help="observations per path")
    p.add_argument("--change-rate", type=float, help="per-row route-change probability")
    p.add_argument("--benchmark", action="store_true",
                   help=f"canonical benchmark ({synth.BENCHMARK_VERSION}); ignores --paths/--obs")
    p.add_argument("--ground-truth", help="write regime metadata as JSON")
    p.add_argument("-o", "--output", required=True, help="output .csv or .jsonl")

    p = sub.add_parser("featurize", help="write the engineered feature matrix as CSV",
                       argument_default=S)
    common(p, seed=False)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--tables-in", help="apply frozen config and tables from this sidecar")
    p.add_argument("--tables-out", help="sidecar path for config and tables (default: OUTPUT.sidecar.json)")

    p = sub.add_parser("train", help="fit a model and write its container", argument_default=S)
    common(p)
    p.add_argument("--mode", help="stacked | single:<learner> | baseline:<kind>")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--hyperopt-trials", type=int, help="TPE trials for the meta-model")
    p.add_argument("--threshold-mode", choices=THRESHOLD_MODES)
    p.add_argument("--paper-mode", action="store_true",
                   help="calibrate the threshold on in-sample training probabilities")
    p.add_argument("--history", help="write the TPE trial history as JSON lines")

    p = sub.add_parser("predict", help="score records with a trained model", argument_default=S)
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True, help="CSV of probabilities and decisions")

    p = sub.add_parser("evaluate", help="score a model, or run a multi-round comparison",
                       argument_default=S)
    common(p)
    p.add_argument("--model", help="evaluate this trained model on the input")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", help="report JSON (default: stdout)")
    p.add_argument("--rounds", type=int, help="run this many split/refit rounds")
    p.add_argument("--models", help=f"comma-separated modes (default: all of "
                                    f"{','.join(pipeline.all_modes())})")
    p.add_argument("--folds", type=int)
    p.add_argument("--threshold-mode", choices=THRESHOLD_MODES)
    p.add_argument("--paper-mode", action="store_true")
    p.add_argument("--csv", help="per-round F1 values as CSV")

    p = sub.add_parser("report", help="print a report as a table", argument_default=S)
    common(p, seed=False)
    p.add_argument("-i", "--input", required=True)
    return parser


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None


def _resolve(args: argparse.Namespace) -> dict:
    given = vars(args).copy()
    cmd = given.pop("command")
    settings = dict(DEFAULTS[cmd])
    settings["jobs"] = os.cpu_count() or 1
    if "config" in given:
        path = given.pop("config")
        cfg = _load_toml(path)
        for key, value in cfg.items():
            if isinstance(value, dict):
                if key not in DEFAULTS:
                    raise InvalidConfig(f"{path}: unknown table [{key}]")
            elif key in GLOBAL_KEYS:
                settings[key] = value
            else:
                raise InvalidConfig(f"{path}: unknown top-level key {key!r}")
        for key, value in cfg.get(cmd, {}).items():
            key = key.replace("-", "_")
            if key not in settings and key not in ("input", "output"):
                raise InvalidConfig(f"{path}: unknown key {key!r} in [{cmd}]")
            settings[key] = value
    if given.pop("paper_mode", False):
        given["threshold_mode"] = "paper"
    given.pop("log_level", None)
    settings.update(given)
    settings["command"] = cmd
    if settings["jobs"] < 1:
        raise InvalidConfig("--jobs must be >= 1")
    if settings.get("threshold_mode", "oof") not in THRESHOLD_MODES:
        raise InvalidConfig(f"threshold mode must be one of {THRESHOLD_MODES}")
    return settings


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_dataset(dataset, path: str) -> None:
    if path.endswith(".jsonl"):
        write_jsonl(dataset, path)
    else:
        write_csv(dataset, path)


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(s: dict) -> int:
    if s["benchmark"]:
        dataset, truth = synth.benchmark_with_truth(s["seed"])
    else:
        config = synth.SynthConfig(n_paths=s["paths"], obs_per_path=s["obs"],
                                   change_rate=s["change_rate"], seed=s["seed"])
        dataset, truth = synth.generate(config)
    _write_dataset(dataset, s["output"])
    if s["ground_truth"]:
        atomic_write(s["ground_truth"], _dump_json(truth.to_dict()))
    print(_dump_json({"rows": len(dataset), "positives": int(truth.labels.sum()),
                      "suite_version": truth.version, "output": s["output"]}), end="")
    return EXIT_OK


def cmd_featurize(s: dict) -> int:
    dataset = load_dataset(s["input"])
    if s["tables_in"]:
        with open(s["tables_in"], encoding="utf-8") as fh:
            config, tables = load_sidecar(fh.read())
        X, _ = build_features(dataset, config, tables)
    else:
        config = FeatureConfig()
        X, tables = build_features(dataset, config)
    atomic_write(s["output"], X.to_csv())
    atomic_write(s["tables_out"] or s["output"] + ".sidecar.json", sidecar_json(config, tables))
    return EXIT_OK


def _run_config(s: dict, **fields) -> RunConfig:
    return RunConfig(subcommand=s["command"], input=s.get("input"), output=s.get("output"),
                     seed=s.get("seed", 0), jobs=s["jobs"], **fields)


def cmd_train(s: dict) -> int:
    pipeline.parse_mode(s["mode"])
    if s["folds"] < 2:
        raise InvalidConfig("--folds must be >= 2")
    if s["hyperopt_trials"] < 0:
        raise InvalidConfig("--hyperopt-trials must be >= 0")
    if s["hyperopt_trials"] and s["mode"] != "stacked":
        raise InvalidConfig("--hyperopt-trials applies to the stacked mode only")
    dataset = load_dataset(s["input"])
    model = pipeline.train(dataset, s["mode"], k=s["folds"], seed=s["seed"],
                           threshold_mode=s["threshold_mode"],
                           hyperopt_trials=s["hyperopt_trials"], jobs=s["jobs"])
    atomic_write(s["output"], pipeline.serialize(model))
    history = getattr(model, "diagnostics", {}).get("history")
    if s["history"] and isinstance(history, TrialHistory):
        atomic_write(s["history"], history.to_jsonl())
    print(_dump_json({"mode": s["mode"], "tau": model.tau, "output": s["output"]}), end="")
    return EXIT_OK


def cmd_predict(s: dict) -> int:
    model = pipeline.load(s["model"])
    dataset = load_dataset(s["input"])
    probs, decisions = pipeline.predict(model, dataset)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["tr_src", "tr_dst", "timestamp", "probability", "prediction"])
    for r, p, d in zip(dataset.records, probs, decisions):
        w.writerow([r.src, r.dst, r.timestamp, repr(float(p)), int(d)])
    atomic_write(s["output"], out.getvalue())
    return EXIT_OK


def _f1_csv(report: dict) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["round", "seed", "model", "f1", "tau"])
    for r in report.get("rounds", []):
        for mode, m in r["models"].items():
            w.writerow([r["round"], r["seed"], mode, repr(m["f1"]), repr(m["tau"])])
    if "models" in report:
        for mode, m in report["models"].items():
            w.writerow([0, report["run_config"].get("seed"), mode, repr(m["f1"]), repr(m["tau"])])
    return out.getvalue()


def cmd_evaluate(s: dict) -> int:
    dataset = load_dataset(s["input"])
    if s["model"] and s["rounds"]:
        raise InvalidConfig("use either --model or --rounds, not both")
    if s["model"]:
        run = _run_config(s, mode=None, extra={"model": s["model"]})
        report = experiment.evaluate_model(pipeline.load(s["model"]), dataset, run.to_dict())
    else:
        rounds = s["rounds"] or 10
        models = s["models"]
        if isinstance(models, str):
            models = [m.strip() for m in models.split(",") if m.strip()]
        models = list(models or pipeline.all_modes())
        run = _run_config(s, folds=s["folds"], threshold_mode=s["threshold_mode"], rounds=rounds,
                          models=models)
        spec = experiment.RoundSpec(tuple(models), k=s["folds"],
                                    threshold_mode=s["threshold_mode"])
        report = experiment.run_rounds(dataset, models, rounds, s["seed"], jobs=s["jobs"],
                                       spec=spec, run_config=run.to_dict())
    text = _dump_json(report)
    if s["output"]:
        atomic_write(s["output"], text)
    else:
        sys.stdout.write(text)
    if s["csv"]:
        atomic_write(s["csv"], _f1_csv(report))
    return EXIT_OK


def format_report(report: dict) -> str:
    lines = []
    if "summary" in report:
        lines.append(f"{'model':<26}{'median F1':>10}{'IQR':>8}{'first':>7}")
        for mode, entry in report["summary"].items():
            lines.append(f"{mode:<26}{entry['f1']['median']:>10.4f}{entry['f1']['iqr']:>8.4f}"
                         f"{report['first_place'][mode]:>7d}")
        sig = [w for w in report.get("wilcoxon", []) if w.get("pvalue") is not None]
        if sig:
            lines.append("")
            lines.append("Wilcoxon signed-rank (two-sided):")
            for w in sig:
                lines.append(f"  {w['a']} vs {w['b']}: W={w['statistic']:g} p={w['pvalue']:.4f}")
    else:
        lines.append(f"{'model':<26}{'F1':>8}{'prec':>8}{'recall':>8}{'acc':>8}{'tau':>7}")
        for mode, m in report["models"].items():
            lines.append(f"{mode:<26}{m['f1']:>8.4f}{m['precision']:>8.4f}{m['recall']:>8.4f}"
                         f"{m['accuracy']:>8.4f}{m['tau']:>7.3f}")
    return "\n".join(lines) + "\n"


def cmd_report(s: dict) -> int:
    try:
        with open(s["input"], encoding="utf-8") as fh:
            report = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{s['input']}: not a JSON report ({exc})") from None
    if report.get("schema_version") != experiment.REPORT_SCHEMA_VERSION:
        raise DataError(f"unsupported report schema {report.get('schema_version')!r}")
    sys.stdout.write(format_report(report))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(args, "log_level", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _resolve(args)
        return COMMANDS[settings["command"]](settings)
    except InvalidConfig as exc:
        print(f"routechange: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, VersionMismatch, CorruptEncoding, OSError) as exc:
        print(f"routechange: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to the internal-error code
        logger.debug("internal error", exc_info=True)
        print(f"routechange: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
