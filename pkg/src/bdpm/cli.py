"""Command-line entry point.

Configuration comes from a TOML file (or a previous run's ``manifest.json``)
given with ``--config``; dedicated flags and ``--set section.key=value``
override it. Every run needs a seed. Errors print one line to stderr:

    bdpm-error code=<1|2|3> kind=<config|data|runtime> message=<json string>
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataset import (
    HEALTHY, ORIENTATIONS, PD, TAXA_AS_COLUMNS, AbundanceTable, DataError, SyntheticSpec,
    generate_synthetic, load_abundance_table, parse_label, write_abundance_table,
)
from .experiments import (
    DEFAULT_FEATURE_COUNTS, DEFAULT_TAUS, CvSettings, FoldFailure, PipelineConfig, run_ablation,
    run_cv, run_feature_sweep, run_threshold_sweep,
)
from .forest import ForestParams
from .neural import NetworkConfig, TrainingDivergence, embed, save_params, train_extractor
from .rfre import RfreConfig, run_rfre
from .svm import KernelSpec, SvmConfig, decision_values, labels_to_signs, save_model, smo_train
from . import reports
from .metrics import evaluate

log = logging.getLogger("bdpm")

COMMANDS = ("synth", "preprocess", "train", "cv", "ablation", "sweep-threshold", "sweep-features")
EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def default_config() -> dict:
    """The full key grammar with default values."""
    pipe = PipelineConfig()
    rfre = asdict(pipe.rfre)
    rfre.pop("forest")
    svm = asdict(pipe.svm)
    kernel = svm.pop("kernel")
    svm["kernel"] = kernel["name"]
    svm["gamma"] = kernel["gamma"]
    cv = asdict(pipe.cv)
    cv["positive_class"] = "Healthy"
    return {
        "seed": None,
        "data": {"input": None, "orientation": TAXA_AS_COLUMNS, "synthetic": False},
        "synthetic": asdict(SyntheticSpec()),
        "rfre": rfre,
        "forest": asdict(pipe.rfre.forest),
        "network": asdict(pipe.network),
        "svm": svm,
        "cv": cv,
        "sweep": {"taus": list(DEFAULT_TAUS), "counts": list(DEFAULT_FEATURE_COUNTS)},
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a table")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config_file(path, command: str) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if "command" in doc and "config" in doc:  # a run manifest
            if doc["command"] != command:
                raise ConfigError(f"manifest was written by {doc['command']!r}, not {command!r}")
            doc = doc["config"]
        return doc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = _merge(cfg, load_config_file(args.config, args.command))
    flag_map = {
        "seed": "seed", "input": "data.input", "orientation": "data.orientation",
        "tau": "rfre.tau", "features": "rfre.target_features", "epochs": "network.epochs",
        "k": "cv.k",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set(cfg, key, value)
    if getattr(args, "synthetic", False):
        _set(cfg, "data.synthetic", True)
    if getattr(args, "global_selection", False):
        _set(cfg, "cv.global_selection", True)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set(cfg, key.strip(), _parse_value(value.strip()))
    if cfg["seed"] is None:
        raise ConfigError("no seed given; set 'seed' in the config or pass --seed")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def build_pipeline(cfg: dict) -> PipelineConfig:
    """Turn the resolved dict into validated config objects (ConfigError on any problem)."""
    try:
        forest = ForestParams(**cfg["forest"])
        rfre = RfreConfig(forest=forest, **cfg["rfre"])
        network = NetworkConfig(**cfg["network"])
        s = dict(cfg["svm"])
        kernel = KernelSpec(s.pop("kernel"), s.pop("gamma"))
        svm = SvmConfig(kernel=kernel, **s)
        cv = dict(cfg["cv"])
        cv["positive_class"] = parse_label(str(cv["positive_class"]))
        settings = CvSettings(**cv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(rfre, network, svm, settings)


def build_synthetic_spec(cfg: dict) -> SyntheticSpec:
    try:
        return SyntheticSpec(**cfg["synthetic"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_table(cfg: dict) -> AbundanceTable:
    data = cfg["data"]
    if data["orientation"] not in ORIENTATIONS:
        raise ConfigError(f"data.orientation must be one of {ORIENTATIONS}")
    if data["synthetic"]:
        return generate_synthetic(build_synthetic_spec(cfg), cfg["seed"])
    if not data["input"]:
        raise ConfigError("no input table; set data.input (--input) or data.synthetic (--synthetic)")
    try:
        return load_abundance_table(data["input"], data["orientation"])
    except OSError as exc:
        raise DataError(f"cannot read {data['input']}: {exc.strerror or exc}") from None


def _check_sweep(cfg: dict, command: str) -> None:
    if command == "sweep-threshold":
        taus = cfg["sweep"]["taus"]
        if not taus or not all(isinstance(t, (int, float)) and 0 <= t < 1 for t in taus):
            raise ConfigError("sweep.taus must be a non-empty list of values in [0, 1)")
    if command == "sweep-features":
        counts = cfg["sweep"]["counts"]
        if not counts or not all(isinstance(c, int) and c >= 1 for c in counts):
            raise ConfigError("sweep.counts must be a non-empty list of positive integers")


def _require_both_classes(table: AbundanceTable) -> None:
    present = set(np.unique(table.labels).tolist())
    if present != {HEALTHY, PD}:
        raise DataError("the table must contain both PD and Healthy samples")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, table, pipe, out, threads):
    files = [out / "synthetic.tsv"]
    write_abundance_table(table, files[0], cfg["data"]["orientation"])
    files.append(reports.write_table(out / "informative.tsv", ("taxon",),
                                     [(n,) for n in table.meta["informative"]], cfg))
    return files


def cmd_preprocess(cfg, table, pipe, out, threads):
    prep = run_rfre(table, pipe.rfre, cfg["seed"])
    r = prep.report
    return [
        reports.write_selection(out / "selection.tsv", r, cfg),
        reports.write_elimination_trace(out / "elimination_trace.tsv", r, cfg),
        reports.write_features(out / "features.tsv", table.sample_ids, r.names,
                               prep.features, prep.labels, cfg),
    ]


def cmd_train(cfg, table, pipe, out, threads):
    sel_seed, net_seed, svm_seed = np.random.SeedSequence(cfg["seed"]).generate_state(3)
    prep = run_rfre(table, pipe.rfre, int(sel_seed))
    net_cfg = replace(pipe.network, seq_len=prep.features.shape[1])
    trained = train_extractor(prep.features, prep.labels, net_cfg, int(net_seed))
    emb, _, logit = embed(prep.features, trained.params, net_cfg)
    model = smo_train(emb, labels_to_signs(prep.labels), pipe.svm, int(svm_seed))
    dv = decision_values(model, emb)
    positive = pipe.cv.positive_class
    preds = np.where(dv >= 0, HEALTHY, PD)
    m = evaluate(prep.labels, preds, dv if positive == HEALTHY else -dv, positive)
    files = [
        reports.write_selection(out / "selection.tsv", prep.report, cfg),
        reports.write_table(out / "loss_history.tsv", ("epoch", "loss"),
                            [(e, reports.fmt_exact(v)) for e, v in enumerate(trained.loss_history)], cfg),
        reports.write_table(out / "training_metrics.tsv", ("Model", *reports.METRIC_HEADER, "AUC", "svm_converged"),
                            [("BDPM (training data)", reports.fmt(m.accuracy), reports.fmt(m.precision),
                              reports.fmt(m.recall), reports.fmt(m.f1), reports.fmt(m.auc),
                              str(model.converged).lower())], cfg),
    ]
    save_params(trained.params, net_cfg, out / "extractor.npz")
    save_model(model, out / "svm.json")
    files += [out / "extractor.npz", out / "svm.json"]
    return files


def cmd_cv(cfg, table, pipe, out, threads):
    summary = run_cv(table, pipe, cfg["seed"], threads)
    return reports.write_cv_outputs(out, summary, table.sample_ids, cfg)


def cmd_ablation(cfg, table, pipe, out, threads):
    return reports.write_ablation(out, run_ablation(table, pipe, cfg["seed"], threads), cfg)


def cmd_sweep_threshold(cfg, table, pipe, out, threads):
    rows = run_threshold_sweep(table, pipe, cfg["sweep"]["taus"], cfg["seed"], threads)
    return reports.write_threshold_sweep(out, rows, cfg)


def cmd_sweep_features(cfg, table, pipe, out, threads):
    rows = run_feature_sweep(table, pipe, cfg["sweep"]["counts"], cfg["seed"], threads)
    return reports.write_feature_sweep(out, rows, cfg)


HANDLERS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "cv": cmd_cv,
    "ablation": cmd_ablation, "sweep-threshold": cmd_sweep_threshold,
    "sweep-features": cmd_sweep_features,
}


# ---------------------------------------------------------------- driver

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdpm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config or a previous manifest.json")
        p.add_argument("--out", required=True, help="output directory (created)")
        p.add_argument("--seed", type=int)
        p.add_argument("--input", help="abundance table (.csv comma, otherwise tab)")
        p.add_argument("--orientation", choices=ORIENTATIONS)
        p.add_argument("--synthetic", action="store_true", help="generate the [synthetic] cohort instead of reading --input")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. network.epochs=100")
        p.add_argument("--threads", type=int, default=1, help="folds run concurrently; never changes results")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--tau", type=float)
            p.add_argument("--features", type=int, help="target feature count")
            p.add_argument("--epochs", type=int)
        if name in ("cv", "ablation", "sweep-threshold", "sweep-features"):
            p.add_argument("--k", type=int, help="number of folds")
            p.add_argument("--global-selection", action="store_true", help="select features once on the whole table")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(f"bdpm-error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def _manifest_config(cfg: dict, command: str) -> dict:
    if command == "synth":
        cfg = dict(cfg, data=dict(cfg["data"], synthetic=True))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve_config(args)
        if args.command == "synth":
            cfg = _manifest_config(cfg, "synth")
        pipe = build_pipeline(cfg)
        _check_sweep(cfg, args.command)
        table = load_table(cfg)
        if args.command != "synth":
            _require_both_classes(table)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = HANDLERS[args.command](cfg, table, pipe, out, args.threads)
        reports.write_manifest(out, args.command, cfg, files)
    except FoldFailure as exc:
        if isinstance(exc.cause, DataError):
            return _fail(EXIT_DATA, "data", str(exc))
        return _fail(EXIT_RUNTIME, "runtime", str(exc))
    except TrainingDivergence as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
