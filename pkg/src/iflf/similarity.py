"""Cross-domain activity similarity from DTW-aligned signal magnitudes.

For each activity, every pair of source domains contributes the Pearson
correlation of their DTW-warped magnitude sequences.  Activities whose mean
pairwise correlation reaches the threshold can have their target-domain
support data replaced by source data.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .sigproc import WindowSet, magnitude_channels, sensor_groups

log = logging.getLogger(__name__)

CORR_EPS = 1e-12


@dataclass
class WarpedPair:
    p_i: np.ndarray
    p_j: np.ndarray
    path: np.ndarray  # [L, 2] index pairs
    dtw_cost: float


def _cost_matrix(x, y, band):
    n, m = len(x), len(y)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    local = np.abs(x[:, None] - y[None, :])
    if band is not None:
        i = np.arange(n)[:, None]
        j = np.arange(m)[None, :]
        # Sakoe-Chiba band around the rescaled diagonal
        centre = i * (m - 1) / max(n - 1, 1)
        local = np.where(np.abs(j - centre) <= band, local, np.inf)
    # anti-diagonal sweep: cells with i + j == s depend only on s-1 and s-2
    for s in range(2, n + m + 1):
        lo = max(1, s - m)
        hi = min(n, s - 1)
        if lo > hi:
            continue
        i = np.arange(lo, hi + 1)
        j = s - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = local[i - 1, j - 1] + best
    return D


def _traceback(D):
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i - 1, j - 1)]
    while i > 1 or j > 1:
        # ties prefer the diagonal step
        steps = ((D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1))
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    return np.array(path[::-1], dtype=np.int64)


def dtw_align(x, y, band: int | None = None) -> WarpedPair:
    """Dynamic time warping with absolute-difference local cost."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) == 0 or len(y) == 0:
        raise ValueError("dtw_align needs non-empty sequences")
    D = _cost_matrix(x, y, band)
    if not np.isfinite(D[-1, -1]):
        raise ValueError(f"band {band} admits no warping path")
    path = _traceback(D)
    return WarpedPair(p_i=x[path[:, 0]], p_j=y[path[:, 1]], path=path, dtw_cost=float(D[-1, -1]))


def warped_correlation(pair: WarpedPair) -> float | None:
    """Pearson correlation of the warped sequences; None when either is flat."""
    a = pair.p_i - pair.p_i.mean()
    b = pair.p_j - pair.p_j.mean()
    sa = np.sqrt(np.mean(a * a))
    sb = np.sqrt(np.mean(b * b))
    if sa < CORR_EPS or sb < CORR_EPS:
        return None
    return float(np.clip(np.mean(a * b) / (sa * sb), -1.0, 1.0))


@dataclass
class ActivityScores:
    pair_scores: dict  # (domain_i, domain_j) -> score, i < j
    mean: float | None
    std: float | None
    undefined_pairs: int = 0
    sufficient: bool = True


def activity_similarity(sequences_by_domain: dict, band: int | None = None) -> ActivityScores:
    """Mean warped correlation over unordered pairs of distinct domains.

    Values are 1-D magnitude sequences or ``[n, sensors]`` arrays; with
    several sensors a pair's score is the mean of the per-sensor scores.
    """
    keys = sorted(sequences_by_domain)
    if len(keys) < 2:
        return ActivityScores({}, None, None, sufficient=False)
    scores, undefined = {}, 0
    for ki, kj in combinations(keys, 2):
        xi = np.asarray(sequences_by_domain[ki], dtype=np.float64)
        xj = np.asarray(sequences_by_domain[kj], dtype=np.float64)
        xi = xi.reshape(len(xi), -1)
        xj = xj.reshape(len(xj), -1)
        per_sensor = [warped_correlation(dtw_align(xi[:, s], xj[:, s], band)) for s in range(xi.shape[1])]
        per_sensor = [v for v in per_sensor if v is not None]
        if not per_sensor:
            undefined += 1
            continue
        scores[(ki, kj)] = float(np.mean(per_sensor))
    if not scores:
        return ActivityScores({}, None, None, undefined, sufficient=False)
    vals = np.array(list(scores.values()))
    return ActivityScores(scores, float(vals.mean()), float(vals.std()), undefined)


@dataclass
class SimilarityReport:
    class_names: list
    activities: dict  # class id -> ActivityScores
    threshold: float = 0.8
    top_k: int | None = None
    substitutable: list = field(default_factory=list)

    def means(self) -> dict:
        return {c: s.mean for c, s in self.activities.items() if s.sufficient and s.mean is not None}

    def to_dict(self) -> dict:
        acts = {}
        for c, s in sorted(self.activities.items()):
            acts[self.class_names[c]] = {
                "class_id": c,
                "mean": s.mean,
                "std": s.std,
                "sufficient": s.sufficient,
                "undefined_pairs": s.undefined_pairs,
                "pairs": [{"i": i, "j": j, "score": v} for (i, j), v in sorted(s.pair_scores.items())],
            }
        return {
            "threshold": self.threshold,
            "top_k": self.top_k,
            "activities": acts,
            "substitutable": [self.class_names[c] for c in self.substitutable],
            "substitutable_ids": list(self.substitutable),
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "similarity.json"
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        for c, s in self.activities.items():
            domains = sorted({d for pair in s.pair_scores for d in pair})
            with open(out / f"similarity_{self.class_names[c]}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["domain", *domains])
                for di in domains:
                    row = []
                    for dj in domains:
                        if di == dj:
                            row.append(1.0)
                        else:
                            row.append(s.pair_scores.get((di, dj), s.pair_scores.get((dj, di), "")))
                    w.writerow([di, *row])
        return path

    @classmethod
    def load(cls, path) -> "SimilarityReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        names = [None] * (max(a["class_id"] for a in d["activities"].values()) + 1)
        acts = {}
        for name, a in d["activities"].items():
            names[a["class_id"]] = name
            acts[a["class_id"]] = ActivityScores(
                {(p["i"], p["j"]): p["score"] for p in a["pairs"]}, a["mean"], a["std"], a["undefined_pairs"], a["sufficient"]
            )
        return cls(names, acts, d["threshold"], d.get("top_k"), list(d["substitutable_ids"]))


def select_substitutable(report: SimilarityReport, threshold: float = 0.8, top_k: int | None = None) -> list:
    """Class ids whose mean similarity is at least ``threshold``, best first."""
    chosen = sorted(((m, c) for c, m in report.means().items() if m >= threshold), key=lambda mc: (-mc[0], mc[1]))
    if top_k is not None:
        chosen = chosen[:top_k]
    return [c for _, c in chosen]


def representative_sequences(recordings, class_id: int, max_len: int = 1500) -> dict:
    """Per-domain concatenation of a class's magnitude samples, truncated to ``max_len``."""
    out = {}
    for rec in recordings:
        mags = rec if all(n.endswith(".mag") for n in rec.channel_names) else magnitude_channels(rec)
        x = mags.samples[mags.labels == class_id]
        if len(x) == 0:
            continue
        key = rec.domain.key
        prev = out.get(key)
        out[key] = x if prev is None else np.concatenate([prev, x])
    return {k: v[:max_len] for k, v in out.items()}


def _report(names, sequences_by_class: dict, threshold, top_k, band) -> SimilarityReport:
    acts = {}
    for c, seqs in sorted(sequences_by_class.items()):
        if not seqs:
            continue
        acts[c] = activity_similarity(seqs, band)
        if not acts[c].sufficient:
            log.warning("activity %s: insufficient evidence (%d domains)", names[c], len(seqs))
    report = SimilarityReport(list(names), acts, threshold, top_k)
    report.substitutable = select_substitutable(report, threshold, top_k)
    return report


def compute_similarity(recordings, threshold: float = 0.8, top_k: int | None = None, max_len: int = 1500,
                       band: int | None = None) -> SimilarityReport:
    """Similarity report over conditioned (interpolated, filtered, normalized) source recordings."""
    recordings = list(recordings)
    names = recordings[0].class_names
    seqs = {c: representative_sequences(recordings, c, max_len) for c in range(len(names))}
    return _report(names, seqs, threshold, top_k, band)


def window_stream(ws: WindowSet, class_id: int) -> np.ndarray | None:
    """Samples ``[n, channels]`` covered by a class's windows, overlaps counted once."""
    idx = np.flatnonzero(ws.labels == class_id)
    if len(idx) == 0:
        return None
    idx = idx[np.lexsort((ws.origin[idx, 1], ws.origin[idx, 0]))]
    length = ws.window_len
    parts, rec, end = [], None, 0
    for i in idx:
        r, start = ws.origin[i]
        skip = max(0, end - start) if r == rec else 0
        if skip < length:
            parts.append(ws.windows[i][:, skip:])
        end = max(end, start + length) if r == rec else start + length
        rec = r
    return np.concatenate(parts, axis=1).T.astype(np.float64)


def _magnitudes(samples, channel_names):
    groups = sensor_groups(channel_names)
    if all(n.endswith(".mag") for n in channel_names):
        return samples
    for g, idx in groups.items():
        if len(idx) != 3:
            raise ValueError(f"sensor group '{g}' has {len(idx)} channels, expected 3")
    return np.column_stack([np.sqrt(np.sum(samples[:, idx] ** 2, axis=1)) for idx in groups.values()])


def similarity_from_windowsets(windowsets, threshold: float = 0.8, top_k: int | None = None, max_len: int = 1500,
                               band: int | None = None) -> SimilarityReport:
    """Same report as :func:`compute_similarity`, rebuilt from preprocessed windows."""
    windowsets = list(windowsets)
    names = windowsets[0].class_names
    seqs = {}
    for c in range(len(names)):
        per_domain = {}
        for ws in windowsets:
            stream = window_stream(ws, c)
            if stream is not None:
                per_domain[ws.domain.key] = _magnitudes(stream, ws.channel_names)[:max_len]
        seqs[c] = per_domain
    return _report(names, seqs, threshold, top_k, band)
