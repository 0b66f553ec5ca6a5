"""Leave-one-domain-out few-shot evaluation.

For every target domain the remaining domains are the sources.  IFLF modes
and PTM are trained once per (mode, target, seed); each (shots, repeat)
cell then draws a support set, adapts, and scores the fixed test set.  STL
is trained from scratch on each cell's support set.

Every finished cell is appended as one JSON line to ``progress.jsonl`` in
the run directory, so an interrupted plan resumes where it stopped and the
summary can always be rebuilt from the raw lines.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from .adapt import AdaptConfig, fast_adapt, normalize_support, select_shots, split_test, substitute_support, support_stats
from .ingest import DomainId
from .metatrain import BaselineConfig, TrainConfig, build_for_sources, train_baseline, train_iflf
from .model import ExtractorSpec, IflfModel, head_weight_stats, load_model, save_model
from .sigproc import WindowSet, compute_stats
from .similarity import similarity_from_windowsets

log = logging.getLogger(__name__)

MODES = ("stl", "ptm", "bmtl", "tmtl")
AXES = ("subject", "device", "subject×device")
DEFAULT_SHOTS = (1, 2, 5, 10, 20, 50, 100)


@dataclass
class ExperimentPlan:
    dataset: str
    domain_axis: str = "subject×device"
    targets: list | None = None  # None: every domain in turn
    modes: tuple = MODES
    shots: tuple = DEFAULT_SHOTS
    repeats: int = 5
    seeds: tuple = (0,)
    substitution: bool = False
    test_fraction: float = 0.3
    ptm_direct: bool = False  # score PTM's pooled head without adapting
    export_diagnostics: bool = True
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        if self.domain_axis not in AXES:
            raise ValueError(f"domain_axis must be one of {AXES}, got {self.domain_axis!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")
        if not self.shots or min(self.shots) < 1:
            raise ValueError("shots must be positive")
        self.modes, self.shots, self.seeds = tuple(self.modes), tuple(self.shots), tuple(self.seeds)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))

    @classmethod
    def from_dict(cls, d) -> "ExperimentPlan":
        d = dict(d)
        for key, kind in (("extractor", ExtractorSpec), ("train", TrainConfig), ("baseline", BaselineConfig),
                          ("adapt", AdaptConfig)):
            if isinstance(d.get(key), dict):
                d[key] = kind(**d[key])
        return cls(**d)

    def plan_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# --------------------------------------------------------------------------
# Metrics


def compute_metrics(predictions, truths, class_mask) -> dict:
    """Accuracy, per-class recall and confusion over the classes in ``class_mask``.

    Windows whose true class is outside the mask are ignored.  Predictions
    outside the mask count as errors and are tallied in ``outside``.
    """
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    mask = [int(c) for c in class_mask]
    keep = np.isin(truths, mask)
    predictions, truths = predictions[keep], truths[keep]
    if len(truths) == 0:
        raise ValueError("no test windows within the class mask")
    pos = {c: i for i, c in enumerate(mask)}
    confusion = np.zeros((len(mask), len(mask)), dtype=np.int64)
    outside = np.zeros(len(mask), dtype=np.int64)
    for t, p in zip(truths, predictions):
        if int(p) in pos:
            confusion[pos[int(t)], pos[int(p)]] += 1
        else:
            outside[pos[int(t)]] += 1
    support = confusion.sum(1) + outside
    recall = {c: (float(confusion[i, i] / support[i]) if support[i] else None) for i, c in enumerate(mask)}
    return {
        "accuracy": float(np.trace(confusion) / len(truths)),
        "recall": recall,
        "confusion": confusion.tolist(),
        "outside": outside.tolist(),
        "classes": mask,
        "n_test": int(len(truths)),
    }


def standard_error(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


# --------------------------------------------------------------------------
# Domain regrouping


def regroup(windowsets: dict, axis: str) -> dict:
    """Merge windowsets keyed ``subject@device`` along the chosen domain axis."""
    if axis == "subject×device":
        return dict(windowsets)
    groups = {}
    for key, ws in sorted(windowsets.items()):
        dom = DomainId.from_key(key)
        name = dom.subject_id if axis == "subject" else dom.device_id
        groups.setdefault(name, []).append(ws)
    out = {}
    for name, sets in groups.items():
        if len(sets) == 1:
            out[name] = sets[0]
            continue
        first = sets[0]
        offsets = np.cumsum([0] + [int(ws.origin[:, 0].max(initial=-1)) + 1 for ws in sets[:-1]])
        origin = np.concatenate([ws.origin + [off, 0] for ws, off in zip(sets, offsets)])
        domain = DomainId(name, "*") if axis == "subject" else DomainId("*", name)
        out[name] = WindowSet(
            np.concatenate([ws.windows for ws in sets]), np.concatenate([ws.labels for ws in sets]), domain,
            first.sampling_rate_hz, first.channel_names, first.class_names, first.window_seconds,
            first.overlap_fraction, first.normalization_stats, origin,
        )
    return out


# --------------------------------------------------------------------------
# Diagnostics


def _features(model: IflfModel, windows, batch: int = 512) -> np.ndarray:
    with torch.no_grad():
        return np.concatenate([model.extract(windows[i : i + batch]).numpy() for i in range(0, len(windows), batch)]) \
            if len(windows) else np.zeros((0, model.spec.feature_dim), np.float32)


def export_embeddings(model: IflfModel, ws: WindowSet, path) -> Path:
    """Tab-separated rows ``f_0 .. f_{d-1}, label, domain``; no header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z = _features(model, ws.windows)
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(z, ws.labels):
            fh.write("\t".join([*(repr(float(v)) for v in row), str(int(label)), ws.domain.key]) + "\n")
    return path


def export_head_histograms(model: IflfModel, path, bins: int = 50, value_range=None) -> Path:
    """CSV ``head, domain, bin_left, bin_right, occurrence`` with a shared bin range."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if value_range is None:
        w = np.concatenate([h.weight.detach().numpy().ravel() for h in model.heads])
        lim = float(np.abs(w).max()) if len(w) else 1.0
        value_range = (-lim, lim) if lim > 0 else (-1.0, 1.0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["head", "domain", "bin_left", "bin_right", "occurrence", "variance", "l1_norm"])
        for k in range(model.num_heads):
            st = head_weight_stats(model, k, bins=bins, value_range=value_range)
            edges = st["bin_edges"]
            for b, occ in enumerate(st["histogram"]):
                out.writerow([k, model.domains[k], edges[b], edges[b + 1], occ, st["variance"], st["l1_norm"]])
    return path


def feature_silhouette(model: IflfModel, ws: WindowSet) -> float:
    """Silhouette of extracted features grouped by true class (Euclidean)."""
    if len(np.unique(ws.labels)) < 2:
        raise ValueError("silhouette needs at least 2 classes")
    return float(silhouette_score(_features(model, ws.windows), ws.labels))


def raw_view(ws: WindowSet) -> WindowSet:
    """Undo per-domain z-scoring so a domain can play the target role."""
    stats = ws.normalization_stats
    if stats is None:
        return ws
    out = ws.subset(np.arange(len(ws)))
    out.windows = (ws.windows * stats.std[None, :, None] + stats.mean[None, :, None]).astype(np.float32)
    out.normalization_stats = None
    return out


def target_view(ws: WindowSet) -> WindowSet:
    """Target windows z-scored with their own statistics (for diagnostics)."""
    if ws.normalization_stats is not None:
        return ws
    stats = compute_stats(ws.windows.transpose(0, 2, 1).reshape(-1, ws.windows.shape[1]))
    return ws.normalized(stats)


# --------------------------------------------------------------------------
# Progress ledger


class ProgressLedger:
    """Append-only JSON-lines file; each line is one finished cell."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def records(self) -> list:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    log.warning("%s: ignoring truncated ledger line", self.path)
        return out

    def done(self) -> set:
        return {r["cell"] for r in self.records() if r.get("status") == "ok"}

    def append(self, record: dict):
        line = json.dumps(record, sort_keys=True) + "\n"
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line.encode("utf-8"))
            os.fsync(fd)
        finally:
            os.close(fd)


def cell_id(mode, target, seed, shots, repeat) -> str:
    return f"{mode}|{target}|{seed}|{shots}|{repeat}"


# --------------------------------------------------------------------------
# Report


@dataclass
class EvalReport:
    plan: dict
    results: list  # raw per-cell records
    summary: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, plan: dict, results, diagnostics=None) -> "EvalReport":
        return cls(plan, list(results), aggregate(results, plan), diagnostics or {})

    def cell(self, mode, target, shots) -> dict | None:
        for row in self.summary:
            if (row["mode"], row["target"], row["shots"]) == (mode, target, shots):
                return row
        return None

    def to_dict(self) -> dict:
        return {"plan": self.plan, "summary": self.summary, "results": self.results, "diagnostics": self.diagnostics}

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, default=_json_default), encoding="utf-8")
        with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "target", "shots", "mean_accuracy", "standard_error", "n", "failed", "complete"])
            for r in self.summary:
                w.writerow([r["mode"], r["target"], r["shots"], r["mean_accuracy"], r["standard_error"], r["n"],
                            r["failed"], r["complete"]])
        conf_dir = out / "confusion"
        conf_dir.mkdir(exist_ok=True)
        for r in self.summary:
            if r["confusion"] is None:
                continue
            with open(conf_dir / f"{r['mode']}_{_safe(r['target'])}_{r['shots']}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["true\\pred", *r["classes"]])
                for c, row in zip(r["classes"], r["confusion"]):
                    w.writerow([c, *row])
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["plan"], d["results"], d["summary"], d.get("diagnostics", {}))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def aggregate(results, plan: dict | None = None) -> list:
    """Mean accuracy and standard error per (mode, target, shots); pure function of the records."""
    latest = {}
    for r in results:
        # a later record for the same cell supersedes an earlier one (e.g. a retried failure)
        latest[r["cell"]] = r
    groups = {}
    for r in latest.values():
        groups.setdefault((r["mode"], r["target"], r["shots"]), []).append(r)
    expected = None
    if plan is not None:
        expected = plan["repeats"] * len(plan["seeds"])
    rows = []
    for (mode, target, shots), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        ok = [r for r in recs if r["status"] == "ok"]
        accs = [r["accuracy"] for r in ok]
        row = {
            "mode": mode, "target": target, "shots": shots,
            "mean_accuracy": float(np.mean(accs)) if accs else None,
            "standard_error": standard_error(accs) if accs else None,
            "accuracies": accs,
            "n": len(ok), "failed": len(recs) - len(ok),
            "complete": len(ok) == (expected if expected is not None else len(recs)),
            "classes": None, "recall": None, "confusion": None,
        }
        if ok:
            classes = sorted({c for r in ok for c in r["classes"]})
            pos = {c: i for i, c in enumerate(classes)}
            conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
            recalls = {c: [] for c in classes}
            for r in ok:
                for i, ci in enumerate(r["classes"]):
                    for j, cj in enumerate(r["classes"]):
                        conf[pos[ci], pos[cj]] += r["confusion"][i][j]
                    value = r["recall"].get(str(ci), r["recall"].get(ci))
                    if value is not None:
                        recalls[ci].append(value)
            row["classes"] = classes
            row["confusion"] = conf.tolist()
            row["recall"] = {str(c): (float(np.mean(v)) if v else None) for c, v in recalls.items()}
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# Driver


def _support_seed(seed, repeat, shots):
    return [int(seed), int(repeat), int(shots)]


def _score(predict, x_test, y_test, classes_in_play) -> dict:
    return compute_metrics(predict(x_test), y_test, classes_in_play)


def _train_source_model(plan: ExperimentPlan, mode, sources, seed):
    if mode == "ptm":
        model, hist = train_baseline(sources, BaselineConfig(**{**asdict(plan.baseline), "kind": "ptm", "seed": seed}),
                                     plan.extractor)
        return model, hist
    cfg = TrainConfig(**{**asdict(plan.train), "mode": mode, "seed": seed})
    return train_iflf(build_for_sources(plan.extractor, sources, seed=seed), sources, cfg)


def run_plan(plan: ExperimentPlan, windowsets: dict, run_root, workers: int = 1, progress_callback=None) -> EvalReport:
    """Execute ``plan`` over preprocessed windowsets keyed by domain key.

    Windowsets are expected normalized with their own domain statistics, as
    sources are.  A target's normalization is undone and its windows are
    z-scored with statistics of each support set instead.  Results accumulate in
    ``<run_root>/<plan hash>/``; cells already recorded as ok are skipped.
    With ``workers > 1`` independent (target, seed, mode) groups run in
    separate processes.
    """
    domains = regroup(windowsets, plan.domain_axis)
    raw = regroup({k: raw_view(ws) for k, ws in windowsets.items()}, plan.domain_axis)
    if len(domains) < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    targets = list(plan.targets) if plan.targets else sorted(domains)
    for t in targets:
        if t not in domains:
            raise KeyError(f"target domain {t!r} not among {sorted(domains)}")
    run_dir = Path(run_root) / plan.plan_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    ledger = ProgressLedger(run_dir / "progress.jsonl")
    done = ledger.done()

    groups = []
    for target in targets:
        for seed in plan.seeds:
            for mode in plan.modes:
                todo = [(s, r) for s in plan.shots for r in range(plan.repeats)
                        if cell_id(mode, target, seed, s, r) not in done]
                if todo:
                    groups.append((target, seed, mode, todo))
    if workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_group, plan, domains, raw[g[0]], g, run_dir) for g in groups]
            for fut in as_completed(futures):
                for rec in fut.result():
                    if progress_callback:
                        progress_callback(rec)
    else:
        for g in groups:
            _run_group(plan, domains, raw[g[0]], g, run_dir, progress_callback)
    return collect_report(run_dir)


def collect_report(run_dir) -> EvalReport:
    """Rebuild (and save) the report of a run directory from its ledger."""
    run_dir = Path(run_dir)
    plan = json.loads((run_dir / "plan.json").read_text(encoding="utf-8"))
    diagnostics = {}
    for path in sorted((run_dir / "diagnostics").glob("*.json")):
        diagnostics[path.stem] = json.loads(path.read_text(encoding="utf-8"))
    report = EvalReport.from_results(plan, ProgressLedger(run_dir / "progress.jsonl").records(), diagnostics)
    report.save(run_dir)
    return report


def _safe(name: str) -> str:
    return name.replace("@", "__").replace("*", "all").replace("/", "_")


def _run_group(plan, domains, raw_target, group, run_dir, progress_callback=None) -> list:
    target, seed, mode, todo = group
    ledger = ProgressLedger(run_dir / "progress.jsonl")
    source_keys = [k for k in sorted(domains) if k != target]
    assert target not in source_keys
    sources = [domains[k] for k in source_keys]
    # identical for every mode and shot count of this (target, seed)
    test_idx = split_test(raw_target, plan.test_fraction, seed)
    out = []

    def record(rec):
        ledger.append(rec)
        out.append(rec)
        if progress_callback:
            progress_callback(rec)

    model = None
    if mode != "stl":
        ckpt = run_dir / "models" / f"{mode}_{_safe(target)}_{seed}.pt"
        try:
            if ckpt.exists():
                model = load_model(ckpt)
            else:
                model, hist = _train_source_model(plan, mode, sources, seed)
                save_model(model, ckpt, extra={"history": _history_summary(hist)})
                if plan.export_diagnostics:
                    diag = _diagnose(model, raw_target, run_dir, mode, target, seed)
                    path = run_dir / "diagnostics" / f"{mode}_{_safe(target)}_{seed}.json"
                    path.parent.mkdir(exist_ok=True)
                    path.write_text(json.dumps(diag, indent=1), encoding="utf-8")
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.error("training %s for target %s failed: %s", mode, target, exc)
            for shots, rep in todo:
                record(_failure(mode, target, seed, shots, rep, "training", exc))
            return out
    substitutable = []
    if plan.substitution:
        substitutable = similarity_from_windowsets(sources, plan.adapt.threshold, plan.adapt.top_k).substitutable
    for shots, rep in todo:
        try:
            rec = _run_cell(plan, mode, model, sources, target, raw_target, test_idx, seed, shots, rep, substitutable)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.error("cell %s failed: %s", cell_id(mode, target, seed, shots, rep), exc)
            rec = _failure(mode, target, seed, shots, rep, "cell", exc)
        record(rec)
    return out


def _history_summary(hist) -> dict:
    keep = {k: v for k, v in hist.items() if k in ("best_epoch", "val_accuracy", "train_accuracy")}
    if "epochs" in hist:
        keep["epochs"] = len(hist["epochs"])
    return json.loads(json.dumps(keep, default=_json_default))


def _diagnose(model, raw_target, run_dir, mode, target, seed) -> dict:
    view = target_view(raw_target)
    safe = _safe(target)
    export_embeddings(model, view, run_dir / "embeddings" / f"{mode}_{safe}_{seed}.tsv")
    export_head_histograms(model, run_dir / "histograms" / f"{mode}_{safe}_{seed}.csv")
    out = {"head_variance": float(np.mean([head_weight_stats(model, k)["variance"] for k in range(model.num_heads)]))}
    try:
        out["silhouette"] = feature_silhouette(model, view)
    except ValueError:
        out["silhouette"] = None
    return out


def _failure(mode, target, seed, shots, rep, stage, exc) -> dict:
    return {
        "cell": cell_id(mode, target, seed, shots, rep), "mode": mode, "target": target, "seed": seed,
        "shots": shots, "repeat": rep, "status": "failed", "stage": stage,
        "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(limit=5),
    }


def _run_cell(plan, mode, model, sources, target, raw_target, test_idx, seed, shots, rep, substitutable) -> dict:
    support_seed = _support_seed(seed, rep, shots)
    support = select_shots(raw_target, shots, support_seed, exclude=test_idx)
    # classes with no support windows are left out of adaptation and metrics
    classes_in_play = sorted(set(int(c) for c in raw_target.labels[test_idx]) - set(support.excluded_classes))
    if plan.substitution and substitutable:
        support = substitute_support(support, substitutable, sources, shots, seed=support_seed)
    stats = support_stats(support)
    support = normalize_support(support, stats)
    test = raw_target.subset(test_idx).normalized(stats)
    adapt_cfg = AdaptConfig(**{**asdict(plan.adapt), "shots": shots, "seed": rep, "reuse_seed": rep})

    if mode == "stl":
        ws = WindowSet(support.windows, support.labels, raw_target.domain, raw_target.sampling_rate_hz,
                       raw_target.channel_names, raw_target.class_names)
        stl, _ = train_baseline(ws, BaselineConfig(**{**asdict(plan.baseline), "kind": "stl", "seed": rep}),
                                plan.extractor)

        def predict(x):
            with torch.no_grad():
                return np.asarray(stl.head_classes[0])[stl.logits(stl.extract(x), 0).argmax(1).numpy()]
    elif mode == "ptm" and plan.ptm_direct:
        def predict(x):
            with torch.no_grad():
                return np.asarray(model.head_classes[0])[model.logits(model.extract(x), 0).argmax(1).numpy()]
    else:
        result = fast_adapt(model, support, adapt_cfg)

        def predict(x):
            return result.predict(model, x)

    metrics = _score(predict, test.windows, test.labels, classes_in_play)
    return {
        "cell": cell_id(mode, target, seed, shots, rep),
        "mode": mode, "target": target, "seed": seed, "shots": shots, "repeat": rep,
        "status": "ok", **metrics,
        "recall": {str(c): v for c, v in metrics["recall"].items()},
        "substituted": sorted(set(int(c) for (_, _, s), c in zip(support.provenance, support.labels) if s)),
        "shortage": {str(c): v for c, v in support.shortage.items()},
    }

