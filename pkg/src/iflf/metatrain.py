"""Alternating meta-training of heads and the shared extractor.

Each epoch:

(a) for every source domain k, the extractor is frozen and head k is fitted
    to domain k's minibatches with cross-entropy plus an L1 penalty on the
    head weights;
(b) all heads are frozen and the extractor takes gradient steps on the sum
    over domains of either cross-entropy through the frozen heads (BMTL) or
    the triplet hinge loss (TMTL).

Baselines: STL (one domain, one head) and PTM (pooled sources, one head),
both trained with RMSprop.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .model import IflfModel, build, checksum, extractor_params, ExtractorSpec
from .sigproc import WindowSet

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class FreezeViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    mode: str = "tmtl"  # "bmtl" | "tmtl"
    alpha: float = 1e-4  # extractor learning rate
    beta: float = 1e-4  # head learning rate
    adam_betas: tuple = (0.9, 0.999)
    mu: float = 0.8
    epsilon_margin: float = 0.4
    m: int = 100
    n: int = 10
    batch_size: int = 100
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.2
    head_passes: int = 1
    triplet_steps: int = 1  # TMTL extractor steps per epoch, fresh triplets each
    seed: int = 0
    check_freeze: bool = False
    # head phases on the restored extractor, so heads match the returned features
    final_head_phases: int = 3

    def __post_init__(self):
        if self.mode not in ("bmtl", "tmtl"):
            raise ValueError(f"mode must be 'bmtl' or 'tmtl', got {self.mode!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.epsilon_margin <= 0:
            raise ValueError("epsilon_margin must be positive")
        if self.final_head_phases < 0:
            raise ValueError("final_head_phases must be non-negative")
        if self.m <= self.n:
            raise ValueError(f"need m > n, got m={self.m}, n={self.n}")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class BaselineConfig:
    kind: str = "ptm"  # "stl" | "ptm"
    lr: float = 1e-3
    rho: float = 0.9  # squared-gradient smoothing
    max_iters: int = 100
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stl", "ptm"):
            raise ValueError(f"kind must be 'stl' or 'ptm', got {self.kind!r}")
        if self.lr <= 0 or not 0 <= self.rho < 1 or self.max_iters < 1:
            raise ValueError("invalid baseline optimizer settings")


# --------------------------------------------------------------------------
# Data plumbing


def split_train_val(ws: WindowSet, fraction: float):
    """Hold out the last ``fraction`` of every class's windows (in time order)."""
    train, val = [], []
    for c in ws.classes:
        idx = np.flatnonzero(ws.labels == c)
        n_val = int(np.floor(len(idx) * fraction))
        if len(idx) > 1 and fraction > 0:
            n_val = max(1, n_val)
        train.extend(idx[: len(idx) - n_val])
        val.extend(idx[len(idx) - n_val :])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def _round_allocation(sizes, counts) -> np.ndarray:
    """Integer [batch, class] counts, each the floor or ceil of its proportional share.

    Rows sum to ``sizes`` and columns to ``counts``; the leftover units after
    flooring are placed with an integral max-flow, which always saturates.
    """
    sizes, counts = np.asarray(sizes), np.asarray(counts)
    share = np.outer(sizes, counts) / counts.sum()
    base = np.floor(share + 1e-9).astype(np.int64)
    row_need = sizes - base.sum(1)
    col_need = counts - base.sum(0)
    if row_need.sum() == 0:
        return base
    nb, nc = base.shape
    frac = share - base > 1e-9
    # nodes: 0 source, 1..nb batches, nb+1..nb+nc classes, nb+nc+1 sink
    sink = nb + nc + 1
    rows, cols, caps = [], [], []
    for b in range(nb):
        rows.append(0), cols.append(1 + b), caps.append(row_need[b])
        for c in np.flatnonzero(frac[b]):
            rows.append(1 + b), cols.append(1 + nb + c), caps.append(1)
    for c in range(nc):
        rows.append(1 + nb + c), cols.append(sink), caps.append(col_need[c])
    graph = csr_matrix((np.array(caps, np.int32), (rows, cols)), shape=(sink + 1, sink + 1))
    flow = maximum_flow(graph, 0, sink).flow.toarray()
    base += flow[1 : 1 + nb, 1 + nb : 1 + nb + nc].astype(np.int64)
    return base


def stratified_batches(labels: np.ndarray, batch_size: int, rng) -> list:
    """Shuffled minibatches whose class counts are proportional up to rounding."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n = len(labels)
    sizes = [min(batch_size, n - i) for i in range(0, n, batch_size)]
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    alloc = _round_allocation(sizes, [len(p) for p in pools])
    taken = np.zeros(len(classes), np.int64)
    batches = []
    for row in alloc:
        parts = [pools[c][taken[c] : taken[c] + k] for c, k in enumerate(row)]
        taken += row
        batches.append(rng.permutation(np.concatenate(parts)))
    return batches


@dataclass
class Triplets:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    ap_pairs: np.ndarray  # [m, 2]
    an_pairs: np.ndarray  # [m, 2]

    def __len__(self):
        return len(self.anchor)


@dataclass
class Task:
    k: int
    windows: np.ndarray
    labels: np.ndarray  # global class ids
    targets: np.ndarray  # indices into head k's outputs
    batches: list
    triplets: Triplets | None = None


def sample_triplets(labels: np.ndarray, m: int, rng) -> Triplets:
    """m anchor-positive and m anchor-negative pairs combined into m*m triplets.

    Triplet (i, j) takes anchor and positive from AP pair i.  Its negative is
    the element of AN pair j whose class differs from the anchor's; the two
    elements of an AN pair have different classes, so one always qualifies.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"triplet sampling needs at least 2 classes, task has {len(classes)}")
    members = {c: np.flatnonzero(labels == c) for c in classes}

    def draw_anchor():
        c = classes[rng.integers(len(classes))]
        return c, members[c][rng.integers(len(members[c]))]

    ap, an = np.empty((m, 2), np.int64), np.empty((m, 2), np.int64)
    for i in range(m):
        c, a = draw_anchor()
        pool = members[c]
        if len(pool) > 1:
            p = pool[rng.integers(len(pool) - 1)]
            p = p if p != a else pool[-1]
        else:
            p = a
        ap[i] = a, p
    for i in range(m):
        c, a = draw_anchor()
        others = np.flatnonzero(labels != c)
        an[i] = a, others[rng.integers(len(others))]

    anchor = np.repeat(ap[:, 0], m)
    positive = np.repeat(ap[:, 1], m)
    neg_a = np.tile(an[:, 0], m)
    neg_n = np.tile(an[:, 1], m)
    negative = np.where(labels[neg_n] != labels[anchor], neg_n, neg_a)
    return Triplets(anchor, positive, negative, ap, an)


def _local_targets(labels, head_classes):
    lookup = {c: i for i, c in enumerate(head_classes)}
    try:
        return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc} not covered by head classes {head_classes}") from exc


def sample_tasks(source_windowsets, config: TrainConfig, epoch: int, head_classes=None) -> list:
    """One task per source domain: stratified minibatches, plus triplets for TMTL."""
    if len(source_windowsets) < 1:
        raise ValueError("no source domains")
    tasks = []
    for k, ws in enumerate(source_windowsets):
        rng = np.random.default_rng([config.seed, epoch, k])
        classes = head_classes[k] if head_classes is not None else ws.classes
        task = Task(
            k=k,
            windows=ws.windows,
            labels=ws.labels,
            targets=_local_targets(ws.labels, classes),
            batches=stratified_batches(ws.labels, config.batch_size, rng),
        )
        if config.mode == "tmtl":
            try:
                task.triplets = sample_triplets(ws.labels, config.m, rng)
            except ValueError as exc:
                raise ValueError(f"domain {ws.domain}: {exc}") from exc
        tasks.append(task)
    return tasks


# --------------------------------------------------------------------------
# Losses


def loss_triplet(za, zp, zn, epsilon_margin: float):
    """Sum over triplets of max(0, |za - zp|^2 - |za - zn|^2 + margin)."""
    d_ap = ((za - zp) ** 2).sum(dim=1)
    d_an = ((za - zn) ** 2).sum(dim=1)
    return torch.clamp(d_ap - d_an + epsilon_margin, min=0.0).sum()


def loss_task(probs, labels, weight, mu: float):
    """Summed categorical cross-entropy (natural log) plus mu * |weight|_1.

    Probabilities at the true class are clamped to 1e-12.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    p_true = probs.gather(1, labels[:, None]).squeeze(1)
    if torch.any(p_true < PROB_EPS):
        log.warning("true-class probability below %g clamped", PROB_EPS)
    ce = -torch.log(torch.clamp(p_true, min=PROB_EPS)).sum()
    return ce + mu * weight.abs().sum()


def head_objective(logits, targets, weight, mu: float):
    """loss_task computed from logits (numerically stable form used in training)."""
    return F.cross_entropy(logits, targets, reduction="sum") + mu * weight.abs().sum()


def task_triplet_loss(model: IflfModel, task: Task, triplets: Triplets, epsilon_margin: float, train: bool = True):
    used, inverse = np.unique(np.concatenate([triplets.anchor, triplets.positive, triplets.negative]), return_inverse=True)
    z = model.extract(task.windows[used], train=train)
    n = len(triplets)
    ia = torch.as_tensor(inverse[:n])
    ip = torch.as_tensor(inverse[n : 2 * n])
    ineg = torch.as_tensor(inverse[2 * n :])
    return loss_triplet(z[ia], z[ip], z[ineg], epsilon_margin)


def extractor_loss(model: IflfModel, tasks, config: TrainConfig, batch_index: int | None = None, train: bool = True):
    """Sum over tasks of the per-task extractor loss.

    BMTL uses cross-entropy through the frozen heads on each task's
    ``batch_index``-th minibatch (all windows when None); TMTL uses the
    tasks' triplets.
    """
    total = 0.0
    for task in tasks:
        if config.mode == "tmtl":
            total = total + task_triplet_loss(model, task, task.triplets, config.epsilon_margin, train)
        else:
            if batch_index is None:
                idx = np.arange(len(task.labels))
            elif batch_index < len(task.batches):
                idx = task.batches[batch_index]
            else:
                continue
            z = model.extract(task.windows[idx], train=train)
            total = total + F.cross_entropy(model.logits(z, task.k), torch.as_tensor(task.targets[idx]), reduction="sum")
    return total


# --------------------------------------------------------------------------
# Training


def _check_finite(value, what, model):
    if not np.isfinite(value):
        snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
        raise TrainingDiverged(f"non-finite {what} loss ({value})", snapshot)


def _evaluate_heads(model: IflfModel, windowsets, head_classes):
    """Per-domain accuracy and mean cross-entropy with each domain's own head."""
    accs, ces = [], []
    with torch.no_grad():
        for k, ws in enumerate(windowsets):
            if len(ws) == 0:
                accs.append(float("nan"))
                ces.append(float("nan"))
                continue
            logits = model.logits(model.extract(ws.windows), k)
            targets = torch.as_tensor(_local_targets(ws.labels, head_classes[k]))
            accs.append(float((logits.argmax(1) == targets).float().mean()))
            ces.append(float(F.cross_entropy(logits, targets)))
    return accs, ces


def _validation_triplets(val_sets, config: TrainConfig):
    out = []
    for k, ws in enumerate(val_sets):
        rng = np.random.default_rng([config.seed, 7919, k])
        out.append(sample_triplets(ws.labels, config.n, rng) if len(np.unique(ws.labels)) > 1 else None)
    return out


def _fit_heads(model: IflfModel, tasks, config: TrainConfig, opt_phi, theta, history, epoch):
    """Head phase: each head on its own task with the extractor frozen; returns mean losses."""
    theta_sum = checksum(theta) if config.check_freeze else None
    head_losses = []
    for task in tasks:
        k = task.k
        with torch.no_grad():
            feats = model.extract(task.windows)
        targets = torch.as_tensor(task.targets)
        others = checksum(p for j in range(model.num_heads) if j != k for p in model.heads[j].parameters()) \
            if config.check_freeze else None
        total, count = 0.0, 0
        for _ in range(config.head_passes):
            for b in task.batches:
                head = model.heads[k]
                loss = head_objective(head(feats[b]), targets[b], head.weight, config.mu)
                opt_phi[k].zero_grad()
                loss.backward()
                opt_phi[k].step()
                total += loss.item()
                count += 1
        _check_finite(total, f"head {k}", model)
        head_losses.append(total / max(count, 1))
        if config.check_freeze and others != checksum(
                p for j in range(model.num_heads) if j != k for p in model.heads[j].parameters()):
            history["freeze_violations"] += 1
            raise FreezeViolation(f"epoch {epoch}: heads other than {k} changed during its update")
    if config.check_freeze and theta_sum != checksum(theta):
        history["freeze_violations"] += 1
        raise FreezeViolation(f"epoch {epoch}: extractor changed during head phase")
    return head_losses


def train_iflf(model: IflfModel, source_windowsets, config: TrainConfig):
    """Run alternating training; returns ``(model, history)``.

    The model ends at the parameters of the epoch with the best validation
    metric.  The heads are then refit against that extractor for
    ``final_head_phases`` phases with fresh optimizers; with 0 they lag it by
    one extractor phase.
    """
    if model.num_heads != len(source_windowsets):
        raise ValueError(f"model has {model.num_heads} heads for {len(source_windowsets)} source domains")
    torch.manual_seed(config.seed)
    head_classes = model.head_classes
    splits = [split_train_val(ws, config.val_fraction) for ws in source_windowsets]
    train_sets = [ws.subset(tr) for ws, (tr, _) in zip(source_windowsets, splits)]
    val_sets = [ws.subset(va) for ws, (_, va) in zip(source_windowsets, splits)]
    val_triplets = _validation_triplets(val_sets, config) if config.mode == "tmtl" else None

    theta = extractor_params(model)
    opt_theta = torch.optim.Adam(theta, lr=config.alpha, betas=config.adam_betas)
    opt_phi = [torch.optim.Adam(model.heads[k].parameters(), lr=config.beta, betas=config.adam_betas)
               for k in range(model.num_heads)]

    history = {"config": asdict(config), "epochs": [], "freeze_violations": 0}
    best = (np.inf, None, -1)
    stale = 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        tasks = sample_tasks(train_sets, config, epoch, head_classes)

        # (a) heads, extractor frozen
        head_losses = _fit_heads(model, tasks, config, opt_phi, theta, history, epoch)

        # (b) extractor, heads frozen
        phi_sum = checksum(p for h in model.heads for p in h.parameters()) if config.check_freeze else None
        for h in model.heads:
            h.requires_grad_(False)
        ext_total = 0.0
        try:
            if config.mode == "bmtl":
                steps = max(len(t.batches) for t in tasks)
                for b in range(steps):
                    loss = extractor_loss(model, tasks, config, batch_index=b)
                    opt_theta.zero_grad()
                    loss.backward()
                    opt_theta.step()
                    ext_total += loss.item()
            else:
                for step in range(config.triplet_steps):
                    if step > 0:
                        for task in tasks:
                            rng = np.random.default_rng([config.seed, epoch, task.k, step])
                            task.triplets = sample_triplets(task.labels, config.m, rng)
                    loss = extractor_loss(model, tasks, config)
                    opt_theta.zero_grad()
                    loss.backward()
                    opt_theta.step()
                    ext_total += loss.item()
        finally:
            for h in model.heads:
                h.requires_grad_(True)
        _check_finite(ext_total, "extractor", model)
        if config.check_freeze and phi_sum != checksum(p for h in model.heads for p in h.parameters()):
            history["freeze_violations"] += 1
            raise FreezeViolation(f"epoch {epoch}: heads changed during extractor phase")

        # validation
        val_acc, val_ce = _evaluate_heads(model, val_sets, head_classes)
        if config.mode == "tmtl":
            with torch.no_grad():
                metric = sum(
                    float(task_triplet_loss(model, Task(k, ws.windows, ws.labels, None, []), trip, config.epsilon_margin, train=False))
                    for k, (ws, trip) in enumerate(zip(val_sets, val_triplets)) if trip is not None
                )
        else:
            metric = float(np.nanmean(val_ce))
        history["epochs"].append({
            "epoch": epoch,
            "head_loss": head_losses,
            "extractor_loss": ext_total,
            "val_metric": metric,
            "val_accuracy": val_acc,
            "val_ce": val_ce,
            "seconds": time.perf_counter() - t0,
        })
        log.info("epoch %d extractor_loss=%.4g val_metric=%.4g min_val_acc=%.3f",
                 epoch, ext_total, metric, np.nanmin(val_acc))
        # ties move the checkpoint forward; only strict gains reset patience
        improved = metric < best[0]
        if metric <= best[0]:
            best = (metric, copy.deepcopy(model.state_dict()), epoch)
        stale = 0 if improved else stale + 1
        if stale >= config.patience:
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
    history["best_epoch"] = best[2]
    if config.final_head_phases and history["epochs"]:
        opt_phi = [torch.optim.Adam(h.parameters(), lr=config.beta, betas=config.adam_betas) for h in model.heads]
        for i in range(config.final_head_phases):
            epoch = len(history["epochs"]) + i
            tasks = sample_tasks(train_sets, config, epoch, head_classes)
            history["final_head_loss"] = _fit_heads(model, tasks, config, opt_phi, theta, history, epoch)
    history["val_accuracy"] = _evaluate_heads(model, val_sets, head_classes)[0]
    return model, history


def build_for_sources(spec: ExtractorSpec, source_windowsets, seed: int = 0) -> IflfModel:
    model = build(spec, [(ws.domain.key, ws.classes) for ws in source_windowsets], seed=seed)
    model.class_names = list(source_windowsets[0].class_names)
    return model


# --------------------------------------------------------------------------
# Baselines


def train_baseline(windowsets, config: BaselineConfig, spec: ExtractorSpec):
    """STL (single domain) or PTM (pooled domains) with one shared head.

    Returns ``(model, history)``; the model has a single head over the union
    of classes present in the training data.
    """
    if isinstance(windowsets, WindowSet):
        windowsets = [windowsets]
    if config.kind == "stl" and len(windowsets) != 1:
        raise ValueError("STL trains on exactly one domain")
    x = np.concatenate([ws.windows for ws in windowsets])
    y = np.concatenate([ws.labels for ws in windowsets])
    if len(y) == 0:
        raise ValueError("no training windows")
    classes = sorted(int(c) for c in np.unique(y))
    name = windowsets[0].domain.key if config.kind == "stl" else "pooled"
    model = build(spec, [(name, classes)], seed=config.seed)
    model.class_names = list(windowsets[0].class_names)
    targets = torch.as_tensor(_local_targets(y, classes))
    opt = torch.optim.RMSprop(model.parameters(), lr=config.lr, alpha=config.rho)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    order, pos = rng.permutation(len(y)), 0
    losses = []
    for it in range(config.max_iters):
        if pos >= len(order):
            order, pos = rng.permutation(len(y)), 0
        idx = order[pos : pos + config.batch_size]
        pos += len(idx)
        logits = model.logits(model.extract(x[idx], train=True), 0)
        loss = F.cross_entropy(logits, targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        _check_finite(losses[-1], "baseline", model)
    with torch.no_grad():
        acc = float((model.logits(model.extract(x), 0).argmax(1) == targets).float().mean())
    return model, {"config": asdict(config), "loss": losses, "train_accuracy": acc}
