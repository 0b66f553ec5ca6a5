"""Few-shot adaptation of a trained model to an unseen target domain.

The extractor is frozen (eval mode, no dropout) and only a private copy of
one head is trained on ``i`` labeled windows per class.  Classes that the
similarity report marks as substitutable may take their support windows
from the source domains instead of the target.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .metatrain import head_objective, _check_finite
from .model import IflfModel, checksum, extractor_params
from .sigproc import WindowSet, NormStats, compute_stats

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    shots: int = 10
    head_init: str = "reuse"  # "reuse" (random source head) | "fresh"
    reuse_seed: int = 0
    substitution: bool = False
    threshold: float = 0.8
    top_k: int | None = None
    lr: float = 1e-2
    mu: float = 0.8
    epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.head_init not in ("reuse", "fresh"):
            raise ValueError(f"head_init must be 'reuse' or 'fresh', got {self.head_init!r}")


@dataclass
class SupportSet:
    """Labeled adaptation windows; ``provenance[i] = (domain key, window index, substituted)``."""

    windows: np.ndarray
    labels: np.ndarray
    provenance: list
    shortage: dict = field(default_factory=dict)
    excluded_classes: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def target_count(self) -> int:
        return sum(1 for p in self.provenance if not p[2])


def split_test(ws: WindowSet, fraction: float = 0.3, seed: int = 0) -> np.ndarray:
    """Fixed random test indices: ``fraction`` of each class, drawn once per seed."""
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 104729])
    test = []
    for c in ws.classes:
        idx = np.flatnonzero(ws.labels == c)
        n = int(round(len(idx) * fraction))
        if len(idx) > 1:
            n = min(max(n, 1), len(idx) - 1)
        test.extend(rng.choice(idx, size=n, replace=False))
    return np.sort(np.array(test, dtype=np.int64))


def select_shots(ws: WindowSet, shots: int, seed: int, exclude=()) -> SupportSet:
    """Draw ``shots`` windows per class from outside ``exclude``.

    A class with fewer available windows contributes all of them and the
    shortage is recorded; a class with none is excluded.
    """
    excluded = set(np.asarray(exclude, dtype=np.int64).tolist())
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 15485863])
    chosen, shortage, empty = [], {}, []
    for c in ws.classes:
        pool = np.array([i for i in np.flatnonzero(ws.labels == c) if i not in excluded], dtype=np.int64)
        if len(pool) == 0:
            empty.append(c)
            log.warning("%s: class %d has no windows outside the test set", ws.domain, c)
            continue
        if len(pool) < shots:
            shortage[c] = shots - len(pool)
        chosen.extend(rng.choice(pool, size=min(shots, len(pool)), replace=False))
    chosen = np.array(sorted(chosen), dtype=np.int64)
    return SupportSet(
        windows=ws.windows[chosen],
        labels=ws.labels[chosen],
        provenance=[(ws.domain.key, int(i), False) for i in chosen],
        shortage=shortage,
        excluded_classes=empty,
    )


def substitute_support(support: SupportSet, selected_classes, source_windowsets, shots: int, seed: int = 0) -> SupportSet:
    """Replace the target windows of ``selected_classes`` with source windows.

    Replacement windows are drawn uniformly from all source windows of the
    class.  A class that no source domain contains keeps its target windows.
    """
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 32452843])
    keep = np.ones(len(support), dtype=bool)
    new_w, new_y, new_p = [], [], []
    for c in selected_classes:
        pool = [(ws, i) for ws in source_windowsets for i in np.flatnonzero(ws.labels == c)]
        if not pool:
            log.warning("class %d absent from all source domains; substitution skipped", c)
            continue
        keep &= support.labels != c
        for j in rng.choice(len(pool), size=min(shots, len(pool)), replace=False):
            ws, i = pool[j]
            new_w.append(ws.windows[i])
            new_y.append(c)
            new_p.append((ws.domain.key, int(i), True))
    windows = support.windows[keep]
    if new_w:
        windows = np.concatenate([windows, np.stack(new_w).astype(windows.dtype)])
    return SupportSet(
        windows=windows,
        labels=np.concatenate([support.labels[keep], np.asarray(new_y, dtype=np.int64)]),
        provenance=[p for p, k in zip(support.provenance, keep) if k] + new_p,
        shortage=dict(support.shortage),
        excluded_classes=list(support.excluded_classes),
    )


def support_stats(support: SupportSet) -> NormStats:
    """Per-channel statistics of the target-domain support windows only."""
    own = np.array([not p[2] for p in support.provenance], dtype=bool)
    if not own.any():
        raise ValueError("support set contains no target-domain windows to normalize with")
    w = support.windows[own]
    return compute_stats(w.transpose(0, 2, 1).reshape(-1, w.shape[1]))


def normalize_support(support: SupportSet, stats: NormStats) -> SupportSet:
    """Z-score the target-domain windows; substituted windows are already normalized."""
    w = support.windows.copy()
    own = np.array([not p[2] for p in support.provenance], dtype=bool)
    w[own] = (w[own] - stats.mean[None, :, None]) / stats.std[None, :, None]
    return SupportSet(w.astype(np.float32), support.labels, support.provenance, support.shortage, support.excluded_classes)


@dataclass
class AdaptResult:
    head: nn.Linear
    classes: list
    source_head: int | None
    substituted: dict  # class id -> list of source domain keys
    shots_used: dict  # class id -> number of windows
    trace: list
    provenance: list
    theta_checksum: str

    def predict(self, model: IflfModel, windows) -> np.ndarray:
        """Predicted global class ids."""
        with torch.no_grad():
            logits = self.head(model.extract(windows))
        return np.asarray(self.classes)[logits.argmax(1).numpy()]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save({"state_dict": self.head.state_dict(), "classes": self.classes}, out / "adapted_head.pt")
        meta = {
            "classes": self.classes,
            "source_head": self.source_head,
            "substituted": {str(k): v for k, v in self.substituted.items()},
            "shots_used": {str(k): v for k, v in self.shots_used.items()},
            "trace": self.trace,
            "provenance": [{"domain": d, "index": i, "substituted": s} for d, i, s in self.provenance],
            "theta_checksum": self.theta_checksum,
        }
        path = out / "adapt_result.json"
        path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
        return path


def _init_head(model: IflfModel, classes, config: AdaptConfig):
    torch.manual_seed(config.seed)
    head = nn.Linear(model.spec.feature_dim, len(classes))
    if config.head_init == "fresh" or model.num_heads == 0:
        return head, None
    k = int(np.random.default_rng(config.reuse_seed).integers(model.num_heads))
    src = model.heads[k]
    with torch.no_grad():
        for row, c in enumerate(classes):
            if c in model.head_classes[k]:
                j = model.head_classes[k].index(c)
                head.weight[row] = src.weight[j]
                head.bias[row] = src.bias[j]
    return head, k


def fast_adapt(model: IflfModel, support: SupportSet, config: AdaptConfig) -> AdaptResult:
    """Train a private head on the support set with the extractor frozen."""
    if len(support) == 0:
        raise ValueError("empty support set")
    before = checksum(extractor_params(model))
    classes = sorted(int(c) for c in np.unique(support.labels))
    head, k = _init_head(model, classes, config)
    with torch.no_grad():
        feats = model.extract(support.windows)
    lookup = {c: i for i, c in enumerate(classes)}
    targets = torch.as_tensor([lookup[int(c)] for c in support.labels])
    opt = torch.optim.Adam(head.parameters(), lr=config.lr)
    trace, best, stale = [], np.inf, 0
    for epoch in range(config.epochs):
        loss = head_objective(head(feats), targets, head.weight, config.mu)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = loss.item()
        _check_finite(value, "adaptation", model)
        trace.append(value)
        if not np.isfinite(best) or value < best - 1e-4 * max(1.0, abs(best)):
            best, stale = value, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    after = checksum(extractor_params(model))
    if before != after:
        raise AssertionError("extractor parameters changed during adaptation")
    substituted = {}
    for (dom, _, sub), c in zip(support.provenance, support.labels):
        if sub:
            substituted.setdefault(int(c), [])
            if dom not in substituted[int(c)]:
                substituted[int(c)].append(dom)
    shots_used = {c: int((support.labels == c).sum()) for c in classes}
    return AdaptResult(head, classes, k, substituted, shots_used, trace, list(support.provenance), after)
