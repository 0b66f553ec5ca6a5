"""``iflf`` command line: one entry point, one subcommand per pipeline stage.

Stages communicate only through files: canonical recordings (CSV + JSON
sidecar), windowsets (``.npy`` + JSON), model checkpoints (``.pt``) and run
directories.  Every subcommand writes the effective configuration to
``<out>/config.json`` so a run can be replayed.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or bad
data, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .adapt import AdaptConfig
from .ingest import LOADERS, IngestConfig, IngestError, SyntheticSpec
from .metatrain import BaselineConfig, TrainConfig
from .model import ExtractorSpec
from .sigproc import PreprocessConfig

log = logging.getLogger("iflf")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Configuration schema


@dataclass
class SynthConfig:
    num_domains: int = 6
    num_classes: int = 4
    class_separation: float = 1.0
    noise_std: float = 0.4
    variability: float = 0.3
    max_rotation_deg: float = 30.0
    duration_s: float = 60.0
    shared_classes: tuple = ()
    domain_style: float = 0.0

    def __post_init__(self):
        self.shared_classes = tuple(self.shared_classes)


@dataclass
class SimilarityConfig:
    threshold: float = 0.8
    top_k: int | None = None
    max_len: int = 1500
    band: int | None = None


@dataclass
class EvalConfig:
    domain_axis: str = "subject×device"
    targets: list | None = None
    modes: tuple = ("stl", "ptm", "bmtl", "tmtl")
    shots: tuple = (1, 2, 5, 10, 20, 50, 100)
    repeats: int = 5
    seeds: tuple = (0,)
    substitution: bool = False
    test_fraction: float = 0.3
    ptm_direct: bool = False
    workers: int = 1

    def __post_init__(self):
        self.modes, self.shots, self.seeds = tuple(self.modes), tuple(self.shots), tuple(self.seeds)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class RunConfig:
    """Every tunable of the pipeline; defaults are the published hyperparameters."""

    dataset: str = "synthetic"
    data: str | None = None  # input directory of the stage being run
    seed: int = 0
    ingest: IngestConfig = field(default_factory=IngestConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    model: ExtractorSpec = field(default_factory=ExtractorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


def _build(cls, data, where=""):
    """Instantiate a (nested) config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        kind = hints.get(key)
        if dataclasses.is_dataclass(kind) and isinstance(value, dict):
            value = _build(kind, value, f"{where}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the YAML/JSON file, then ``section.key=value`` overrides."""
    tree = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    # partial sections are merged into the defaults, not substituted for them
    full = _merge(RunConfig().to_dict(), tree)
    if "conv_layers" not in (tree.get("model") or {}):
        full["model"]["conv_layers"] = None  # derived from the variant
    return _build(RunConfig, full)


def echo_config(cfg: RunConfig, out_dir, argv=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    payload = {"config": cfg.to_dict(), "argv": list(argv or []), "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Logging


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {"time": self.formatTime(record), "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def setup_logging(json_lines: bool, verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter() if json_lines else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# --------------------------------------------------------------------------
# Data helpers


def _require_dir(path, what) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _data(args, cfg: RunConfig):
    return getattr(args, "data", None) or cfg.data


def _load_windowsets(path) -> dict:
    from .sigproc import load_windowsets

    path = _require_dir(path, "windowset directory")
    sets = load_windowsets(path)
    if not sets:
        raise DataError(f"no windowsets in {path}")
    return sets


def _model_spec(cfg: RunConfig, windowsets) -> ExtractorSpec:
    first = next(iter(windowsets.values()))
    channels, length = first.windows.shape[1:]
    spec = dataclasses.replace(cfg.model, in_channels=int(channels), window_len=int(length), conv_layers=cfg.model.conv_layers)
    if (spec.in_channels, spec.window_len) != (cfg.model.in_channels, cfg.model.window_len):
        log.info("extractor input set from data: %d channels x %d samples", channels, length)
    return spec


def _split_target(windowsets: dict, target):
    if target is None:
        return list(windowsets.values()), None
    if target not in windowsets:
        raise DataError(f"target domain {target!r} not in {sorted(windowsets)}")
    return [ws for k, ws in sorted(windowsets.items()) if k != target], windowsets[target]


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args, cfg: RunConfig):
    from .ingest import generate_synthetic, write_canonical_dir

    if args.spec != "default":
        spec = SyntheticSpec.from_dict(json.loads(_require_dir(args.spec, "synthetic spec").read_text()))
    else:
        s = cfg.synth
        spec = SyntheticSpec.default(
            s.num_domains, s.num_classes, seed=cfg.seed, class_separation=s.class_separation, noise_std=s.noise_std,
            variability=s.variability, max_rotation_deg=s.max_rotation_deg, duration_s=s.duration_s,
            shared_classes=tuple(s.shared_classes), domain_style=s.domain_style,
        )
    out = Path(args.out)
    paths = write_canonical_dir(generate_synthetic(spec, seed=cfg.seed), out)
    (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=1), encoding="utf-8")
    log.info("wrote %d recordings to %s", len(paths), out)


def cmd_ingest(args, cfg: RunConfig):
    from .ingest import write_canonical_dir

    dataset = args.dataset or cfg.dataset
    if dataset not in LOADERS:
        raise ConfigError(f"unknown dataset {dataset!r}; choose from {sorted(LOADERS)}")
    root = _require_dir(args.root, f"{dataset} root")
    recs = LOADERS[dataset](root, cfg.ingest)
    paths = write_canonical_dir(recs, args.out)
    log.info("wrote %d canonical recordings to %s", len(paths), args.out)


def cmd_preprocess(args, cfg: RunConfig):
    from .ingest import read_canonical_dir
    from .sigproc import preprocess_all, save_windowsets

    recs = read_canonical_dir(_require_dir(_data(args, cfg), "recording directory"))
    sets = preprocess_all(recs, cfg.preprocess, unnormalized=args.unnormalized or ())
    save_windowsets(sets, args.out)
    for key, ws in sorted(sets.items()):
        log.info("%s: %d windows, classes %s", key, len(ws), ws.classes)


def cmd_similarity(args, cfg: RunConfig):
    from .ingest import read_canonical_dir
    from .sigproc import condition
    from .similarity import compute_similarity

    recs = read_canonical_dir(_require_dir(_data(args, cfg), "recording directory"))
    conditioned = [p for rec in recs if rec.domain.key not in set(args.exclude or ()) for p in condition(rec, cfg.preprocess)]
    s = cfg.similarity
    report = compute_similarity(conditioned, s.threshold, s.top_k, s.max_len, s.band)
    report.save(args.out)
    for c, name in enumerate(report.class_names):
        act = report.activities.get(c)
        mean = None if act is None else act.mean
        log.info("%s: %s%s", name, "n/a" if mean is None else f"{mean:.3f}",
                 " (substitutable)" if c in report.substitutable else "")


def cmd_train(args, cfg: RunConfig):
    import torch

    from .metatrain import build_for_sources, train_baseline, train_iflf
    from .model import save_model

    sets = _load_windowsets(_data(args, cfg))
    sources, _ = _split_target(sets, args.target)
    spec = _model_spec(cfg, sets)
    mode = args.mode or cfg.train.mode
    if mode in ("bmtl", "tmtl"):
        tc = dataclasses.replace(cfg.train, mode=mode)
        model, hist = train_iflf(build_for_sources(spec, sources, seed=tc.seed), sources, tc)
    elif mode in ("ptm", "stl"):
        bc = dataclasses.replace(cfg.baseline, kind=mode)
        model, hist = train_baseline(sources, bc, spec)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    out = Path(args.out)
    path = save_model(model, out / "model.pt", extra={"mode": mode, "sources": [ws.domain.key for ws in sources]})
    (out / "history.json").write_text(json.dumps(hist, indent=1, default=_jsonable), encoding="utf-8")
    log.info("saved %s model to %s (torch %s)", mode, path, torch.__version__)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def cmd_adapt(args, cfg: RunConfig):
    from .adapt import fast_adapt, normalize_support, select_shots, split_test, substitute_support, support_stats
    from .evalharness import compute_metrics, raw_view
    from .model import load_model
    from .similarity import similarity_from_windowsets

    model_path = Path(args.model)
    if not model_path.is_file():
        raise DataError(f"model checkpoint not found: {model_path}")
    model = load_model(model_path)
    sets = _load_windowsets(_data(args, cfg))
    if args.target is None:
        raise ConfigError("adapt needs --target")
    sources, target_ws = _split_target(sets, args.target)
    target = raw_view(target_ws)
    ac = cfg.adapt
    if args.shots is not None:
        ac = dataclasses.replace(ac, shots=args.shots)
    if args.substitution:
        ac = dataclasses.replace(ac, substitution=True)
    test_idx = split_test(target, cfg.eval.test_fraction, cfg.seed)
    support = select_shots(target, ac.shots, cfg.seed, exclude=test_idx)
    if ac.substitution:
        chosen = similarity_from_windowsets(sources, ac.threshold, ac.top_k, cfg.similarity.max_len).substitutable
        support = substitute_support(support, chosen, sources, ac.shots, seed=cfg.seed)
    stats = support_stats(support)
    support = normalize_support(support, stats)
    result = fast_adapt(model, support, ac)
    out = Path(args.out)
    result.save(out)
    test = target.subset(test_idx).normalized(stats)
    metrics = compute_metrics(result.predict(model, test.windows), test.labels, sorted(result.shots_used))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1), encoding="utf-8")
    log.info("%d-shot adaptation to %s: test accuracy %.3f", ac.shots, args.target, metrics["accuracy"])


def _plan(cfg: RunConfig, args):
    from .evalharness import ExperimentPlan

    e = cfg.eval
    return ExperimentPlan(
        dataset=cfg.dataset, domain_axis=e.domain_axis, targets=args.targets or e.targets, modes=tuple(e.modes),
        shots=tuple(e.shots), repeats=e.repeats, seeds=tuple(e.seeds), substitution=e.substitution,
        test_fraction=e.test_fraction, ptm_direct=e.ptm_direct, extractor=cfg.model, train=cfg.train,
        baseline=cfg.baseline, adapt=cfg.adapt,
    )


def cmd_eval(args, cfg: RunConfig):
    from .evalharness import run_plan

    sets = _load_windowsets(_data(args, cfg))
    cfg.model = _model_spec(cfg, sets)
    plan = _plan(cfg, args)
    report = run_plan(plan, sets, args.out, workers=cfg.eval.workers,
                      progress_callback=lambda r: log.info("cell %s: %s", r["cell"], r.get("accuracy", r["status"])))
    _print_summary(report)
    log.info("run directory %s", Path(args.out) / plan.plan_hash())


def cmd_report(args, cfg: RunConfig):
    from .evalharness import collect_report

    run = _require_dir(args.run, "run directory")
    if not (run / "plan.json").exists():
        raise DataError(f"not a run directory (no plan.json): {run}")
    _print_summary(collect_report(run))


def _print_summary(report):
    print(f"{'mode':<6} {'target':<24} {'shots':>5} {'accuracy':>9} {'se':>7} {'n':>3}")
    for r in report.summary:
        acc = "failed" if r["mean_accuracy"] is None else f"{r['mean_accuracy']:.3f}"
        se = "" if r["standard_error"] is None else f"{r['standard_error']:.3f}"
        flag = "" if r["complete"] else " incomplete"
        print(f"{r['mode']:<6} {r['target']:<24} {r['shots']:>5} {acc:>9} {se:>7} {r['n']:>3}{flag}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "preprocess": cmd_preprocess, "similarity": cmd_similarity,
    "train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.max_epochs=2 (repeatable)")
    common.add_argument("--seed", type=int, help="experiment seed (config key seed)")
    common.add_argument("--log-json", action="store_true", help="emit log records as JSON lines")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="iflf", description="Invariant feature learning for cross-domain HAR.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain dataset")
    p.add_argument("--spec", default="default", help="'default' or a synthetic spec JSON file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", parents=[common], help="convert a public dataset to canonical recordings")
    p.add_argument("--dataset", choices=sorted(LOADERS))
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="filter, normalize and window recordings")
    p.add_argument("--data", help="canonical recording directory (config key data)")
    p.add_argument("--out", required=True)
    p.add_argument("--unnormalized", nargs="*", metavar="DOMAIN", help="domains to keep at raw scale")

    p = sub.add_parser("similarity", parents=[common], help="DTW activity similarity across domains")
    p.add_argument("--data", help="canonical recording directory (config key data)")
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", nargs="*", metavar="DOMAIN", help="domains left out (e.g. the target)")

    p = sub.add_parser("train", parents=[common], help="train on source domains")
    p.add_argument("--mode", choices=["tmtl", "bmtl", "ptm", "stl"])
    p.add_argument("--data", help="windowset directory (config key data)")
    p.add_argument("--target", help="domain held out from training")
    p.add_argument("--out", required=True)

    p = sub.add_parser("adapt", parents=[common], help="few-shot adaptation of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="windowset directory (config key data)")
    p.add_argument("--target", help="target domain key")
    p.add_argument("--shots", type=int)
    p.add_argument("--substitution", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="leave-one-domain-out few-shot evaluation")
    p.add_argument("--data", help="windowset directory (config key data)")
    p.add_argument("--targets", nargs="*")
    p.add_argument("--out", required=True, help="run root; results go to <out>/<plan hash>")

    p = sub.add_parser("report", parents=[common], help="re-aggregate and print a run directory")
    p.add_argument("--run", required=True)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    setup_logging(args.log_json, args.verbose)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        out = getattr(args, "out", None) or getattr(args, "run", None)
        if out is not None and args.command != "report":
            echo_config(cfg, out, argv)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (DataError, IngestError, FileNotFoundError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level categorization
        log.exception("runtime: %s", exc)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
