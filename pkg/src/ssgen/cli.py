"""Command-line entry point: one JSON config in, reports and artifacts out.

Every command takes the same configuration document (see ``DEFAULTS``); the
config hash is embedded in every file written and in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ssgen.baselines import ErmModel, train_erm
from ssgen.errors import ConfigError, ContractError, DataError, NumericFailure
from ssgen.evalharness.protocols import (
    METHODS,
    SPLIT_STRATEGIES,
    DataConfig,
    ModelCache,
    TentGrid,
    build_corpus,
    corpus_key,
    method_config,
    run_leave_one_out,
    run_rotation_benchmark,
    run_split_study,
    run_tent_comparison,
    split_corpus,
    visualize_adaptation,
)
from ssgen.evalharness.inference import accuracy
from ssgen.evalharness.report import MetricsReport, export_report
from ssgen.model import SingleSampleModel, load_checkpoint
from ssgen.trainer import TrainConfig, train, validate, write_history

log = logging.getLogger("ssgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

PROTOCOLS = ("rotation", "leave_one_out", "split_study")
ABLATION_NAMES = {  # reported name -> method
    "full": "full",
    "no-hierarchy": "no_hierarchy",
    "no-prior-supervision": "no_prior_supervision",
    "invariant": "invariant",
    "meta": "full",
    "non-meta": "non_meta",
}
TABLE_VARIANTS = ("full", "no-hierarchy", "no-prior-supervision", "invariant")
META_PAIR = ("meta", "non-meta")

_TRAIN_DEFAULTS = TrainConfig()

DEFAULTS: dict = {
    "experiment": {
        "seed": 0,  # data seed; run i uses seed + i
        "n_seeds": 5,
        "method": "full",  # train
        "methods": ["full", "invariant"],  # eval
        "protocol": "rotation",  # eval: rotation | leave_one_out | split_study
        "in_distribution": True,
        "samples": [0, 1, 2],  # visualize: target-domain sample indices
        "target": "",  # visualize: target domain id, first target when empty
        "n_context": 200,
    },
    "data": {
        "n_per_class": 200,
        "source_angles": [15, 30, 60, 75],
        "target_angles": [0, 90],
        "val_fraction": 0.1,
        "eval_per_domain": 0,
        "idx_images": "",
        "idx_labels": "",
    },
    "model": {
        "feature_dim": _TRAIN_DEFAULTS.feature_dim,
        "hidden": list(_TRAIN_DEFAULTS.hidden),
        "logvar_init": _TRAIN_DEFAULTS.logvar_init,
    },
    "train": {
        k: getattr(_TRAIN_DEFAULTS, k)
        for k in (
            "iterations", "batch", "support_per_class", "lr_backbone", "lr_heads", "mc_M", "mc_N", "mc_L",
            "kl_weight", "kl_per_entry", "kl_warmup", "pretrain_iterations", "val_every",
            "eval_support_per_class", "eval_seed",
        )
    },
    "split": {"strategy": "annotation", "k": 0, "feature": "orientation", "strategies": list(SPLIT_STRATEGIES)},
    "baseline": {"tent_batch_sizes": [1, 32, 128], "tent_steps": [1, 10, 100], "tent_modes": ["single_domain", "multi_domain"], "tent_lr": 1e-3},
    "output": {"dir": None, "format": "csv"},
}
REQUIRED = ("output.dir",)


# ---------------------------------------------------------------- configuration


def _check_type(path: str, default, value):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return float(value) if isinstance(default, float) else value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path + ".")
        else:
            base[key] = _check_type(path, DEFAULTS_FLAT.get(path), value)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with the value read as JSON, or as a bare string if that fails."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=(), out_dir=None) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``--out``."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        _merge(config, doc)
    for item in overrides:
        key, value = parse_override(item)
        parts = key.split(".")
        nested: object = value
        for part in reversed(parts):
            nested = {part: nested}
        _merge(config, nested)
    if out_dir is not None:
        config["output"]["dir"] = str(out_dir)
    for path_ in REQUIRED:
        block, key = path_.split(".")
        if config[block][key] in (None, ""):
            hint = " (or pass --out)" if path_ == "output.dir" else ""
            raise ConfigError(f"missing required config key {path_}{hint}")
    if config["output"]["format"] not in ("csv", "json"):
        raise ConfigError("output.format: expected 'csv' or 'json'")
    if config["experiment"]["n_seeds"] < 1:
        raise ConfigError("experiment.n_seeds must be >= 1")
    return config


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON, excluding where outputs are written."""
    hashed = {k: v for k, v in config.items() if k != "output"}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def data_config(config: dict) -> DataConfig:
    return DataConfig(seed=config["experiment"]["seed"], **config["data"])


def train_config(config: dict) -> TrainConfig:
    return TrainConfig(seed=config["experiment"]["seed"], **config["model"], **config["train"])


def tent_grid(config: dict) -> TentGrid:
    b = config["baseline"]
    return TentGrid(b["tent_batch_sizes"], b["tent_steps"], b["tent_modes"], b["tent_lr"])


def seeds(config: dict) -> list[int]:
    base = config["experiment"]["seed"]
    return [base + i for i in range(config["experiment"]["n_seeds"])]


def _check_method(name: str, path: str) -> str:
    if name not in METHODS:
        raise ConfigError(f"{path}: unknown method {name!r}; expected one of {list(METHODS)}")
    return name


# ---------------------------------------------------------------- outputs


class Outputs:
    """Writes files into the run directory and records them in the manifest."""

    def __init__(self, config: dict, command: str):
        self.dir = Path(config["output"]["dir"])
        self.format = config["output"]["format"]
        self.hash = config_hash(config)
        # the output block is left out so reruns into other directories match byte for byte
        hashed = {k: v for k, v in config.items() if k != "output"}
        self.manifest = {"command": command, "config_hash": self.hash, "config": hashed, "files": []}
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.dir}: {exc.strerror}") from None

    def path(self, name: str) -> Path:
        self.manifest["files"].append(name)
        return self.dir / name

    def report(self, report: MetricsReport, stem: str = "metrics") -> Path:
        report.config_hash = self.hash
        return export_report(report, self.path(f"{stem}.{self.format}"), self.format)

    def finish(self, **extra) -> Path:
        self.manifest.update(extra)
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return path


def _summary(report: MetricsReport) -> None:
    for agg in report.aggregates():
        if agg.target_domain == "all":
            std = "" if np.isnan(agg.std) else f" +- {agg.std:.4f}"
            print(f"{agg.experiment:>16}  {agg.method:>24}  {agg.mean:.4f}{std}  (n={agg.n})")


# ---------------------------------------------------------------- commands


def cmd_gen_data(config: dict) -> Path:
    """Materialize the rotation corpus as an npz and write per-domain counts."""
    out = Outputs(config, "gen-data")
    data = data_config(config)
    corpus = build_corpus(data)
    arrays, counts = {}, {}
    for d in corpus.source_domains + corpus.target_domains:
        arrays[f"{d.domain_id}/images"] = d.images
        arrays[f"{d.domain_id}/labels"] = d.labels
        counts[d.domain_id] = len(d)
    with open(out.path("corpus.npz"), "wb") as fh:
        np.savez_compressed(fh, **arrays)
    digest = hashlib.sha256()
    for key in sorted(arrays):
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    return out.finish(
        counts=counts,
        total=sum(counts.values()),
        seed=data.seed,
        source_angles=list(data.source_angles),
        target_angles=list(data.target_angles),
        num_classes=corpus.num_classes,
        data_sha256=digest.hexdigest(),
    )


def cmd_train(config: dict) -> Path:
    """Fit one method on the configured corpus (regrouped when split.strategy asks)."""
    method = _check_method(config["experiment"]["method"], "experiment.method")
    data, cfg = data_config(config), train_config(config)
    strategy = config["split"]["strategy"]
    if strategy not in SPLIT_STRATEGIES:
        raise ConfigError(f"split.strategy: unknown strategy {strategy!r}; expected one of {list(SPLIT_STRATEGIES)}")
    if strategy == "annotation":
        corpus = build_corpus(data)
    else:
        corpus = split_corpus(data, strategy, config["split"]["k"] or None, config["split"]["feature"])
    out = Outputs(config, "train")
    if method == "erm":
        result = train_erm(corpus, cfg)
    else:
        result = train(corpus, method_config(method, cfg, cfg.seed))
    result.model.save(out.path("model.npz"), out.hash)
    write_history(result.history, out.path("history.csv"), out.hash)
    return out.finish(
        method=method,
        best_val_accuracy=result.best_val_accuracy,
        best_iteration=result.best_iteration,
        train_sources=corpus.source_ids,
    )


def _eval_report(config: dict, cache: ModelCache) -> MetricsReport:
    exp = config["experiment"]
    data, cfg = data_config(config), train_config(config)
    protocol = exp["protocol"]
    methods = [_check_method(m, f"experiment.methods[{i}]") for i, m in enumerate(exp["methods"])]
    if protocol == "rotation":
        return run_rotation_benchmark(data, cfg, methods, seeds(config), cache, exp["in_distribution"])
    if protocol == "leave_one_out":
        return run_leave_one_out(data, cfg, methods, seeds(config), cache)
    if protocol == "split_study":
        split = config["split"]
        return run_split_study(data, cfg, seeds(config), split["strategies"], split["k"] or None, split["feature"], cache)
    raise ConfigError(f"experiment.protocol: unknown protocol {protocol!r}; expected one of {list(PROTOCOLS)}")


def cmd_eval(config: dict) -> Path:
    out = Outputs(config, "eval")
    report = _eval_report(config, ModelCache())
    out.report(report)
    _summary(report)
    return out.finish(protocol=config["experiment"]["protocol"])


def ablation_report(config: dict, cache: ModelCache | None = None) -> MetricsReport:
    """The four-variant table and the meta/non-meta pair, on the same seeds and fits."""
    cache = cache or ModelCache()
    data, cfg = data_config(config), train_config(config)
    base = run_rotation_benchmark(
        data, cfg, sorted(set(ABLATION_NAMES.values())), seeds(config), cache, in_distribution=False
    )
    report = MetricsReport()
    for experiment, names in (("ablation", TABLE_VARIANTS), ("meta_learning", META_PAIR)):
        for name in names:
            for row in base.select(method=ABLATION_NAMES[name]):
                report.add(experiment, name, row.target_domain, row.seed, row.accuracy)
    return report


def cmd_ablate(config: dict) -> Path:
    out = Outputs(config, "ablate")
    report = ablation_report(config)
    out.report(report)
    _summary(report)
    return out.finish(variants=list(ABLATION_NAMES))


def cmd_tent_compare(config: dict) -> Path:
    out = Outputs(config, "tent-compare")
    grid = tent_grid(config)
    report = run_tent_comparison(data_config(config), train_config(config), seeds(config), grid, ModelCache())
    out.report(report)
    _summary(report)
    return out.finish(grid={"batch_sizes": list(grid.batch_sizes), "steps": list(grid.steps), "modes": list(grid.modes)})


def cmd_visualize(config: dict) -> Path:
    """Scatter SVGs: the invariant model's fixed classifier and the full method's per-sample ones."""
    exp = config["experiment"]
    data, cfg = data_config(config), train_config(config)
    corpus = build_corpus(data)
    targets = {d.domain_id: d for d in corpus.target_domains}
    target_id = exp["target"] or corpus.target_domains[0].domain_id
    if target_id not in targets:
        raise ConfigError(f"experiment.target: unknown domain {target_id!r}; expected one of {sorted(targets)}")
    out = Outputs(config, "visualize")
    cache = ModelCache()
    key = corpus_key("rotation", data)
    full = cache.get("full", key, corpus, cfg, cfg.seed)
    base = cache.get("invariant", key, corpus, cfg, cfg.seed)
    try:
        paths = visualize_adaptation(
            full, base, targets[target_id], exp["samples"], out.dir, exp["n_context"], cfg.seed, out.hash
        )
    except ContractError as exc:
        raise ConfigError(f"experiment.samples: {exc}") from None
    out.manifest["files"].extend(p.name for p in paths)
    return out.finish(target=target_id, samples=exp["samples"])


def checkpoint_accuracy(run_dir) -> float:
    """Reload a ``train`` run's checkpoint and recompute its validation accuracy."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    config = manifest["config"]
    data = data_config(config)
    strategy = config["split"]["strategy"]
    corpus = build_corpus(data) if strategy == "annotation" else split_corpus(
        data, strategy, config["split"]["k"] or None, config["split"]["feature"]
    )
    images, labels = corpus.validation_set()
    meta, _ = load_checkpoint(run_dir / "model.npz")
    if meta["kind"] == "erm":
        return accuracy(ErmModel.load(run_dir / "model.npz").predict(images), labels)
    cfg = method_config(config["experiment"]["method"], train_config(config), data.seed)
    model = SingleSampleModel.load(run_dir / "model.npz")
    return validate(model, corpus, images, labels, cfg, corpus.train_sources())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "tent-compare": cmd_tent_compare,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssgen", description="Single-test-sample domain generalization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("config_path", nargs="?", help="JSON config document")
        p.add_argument("--config", dest="config_flag", help="JSON config document (alternative to the positional)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key, value parsed as JSON")
        p.add_argument("--out", help="output directory (overrides output.dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.config_path and args.config_flag:
            raise ConfigError("give the config either positionally or with --config, not both")
        config = load_config(args.config_path or args.config_flag, args.set, args.out)
        manifest = COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"ssgen: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"ssgen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"ssgen: numeric failure in training: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"ssgen: invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"ssgen: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
