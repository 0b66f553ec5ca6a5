"""Shared feature extractor with one softmax head per source domain.

``predict(x, k) = softmax(head_k(extract(x)))``.  The extractor is either the
conv-recurrent stack (4 temporal convolutions + 2 LSTM layers) or the
conv-only stack (5 temporal convolutions + 2 fully-connected layers); both
expose the same interface.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass
class ExtractorSpec:
    in_channels: int = 6
    window_len: int = 200
    variant: str = "conv-recurrent"  # or "conv-only"
    conv_layers: int | None = None  # 4 for conv-recurrent, 5 for conv-only
    conv_channels: int = 64
    kernel_size: int = 5
    hidden_size: int = 128
    rnn_layers: int = 2
    dropout: float = 0.25
    fc_sizes: tuple = (128, 64)
    reduce: str = "last"  # how LSTM outputs become one vector: "last" | "mean"

    def __post_init__(self):
        if self.variant not in ("conv-recurrent", "conv-only"):
            raise ValueError(f"unknown extractor variant {self.variant!r}")
        if self.conv_layers is None:
            self.conv_layers = 4 if self.variant == "conv-recurrent" else 5
        self.fc_sizes = tuple(self.fc_sizes)
        if self.conv_len <= 0:
            raise ValueError(
                f"window_len {self.window_len} too short for {self.conv_layers} valid convolutions of width {self.kernel_size}"
            )

    @property
    def conv_len(self) -> int:
        return self.window_len - self.conv_layers * (self.kernel_size - 1)

    @property
    def feature_dim(self) -> int:
        return self.hidden_size if self.variant == "conv-recurrent" else self.fc_sizes[-1]


class Extractor(nn.Module):
    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        self.spec = spec
        layers, c = [], spec.in_channels
        for _ in range(spec.conv_layers):
            layers += [nn.Conv1d(c, spec.conv_channels, spec.kernel_size), nn.ReLU()]
            c = spec.conv_channels
        self.conv = nn.Sequential(*layers)
        if spec.variant == "conv-recurrent":
            self.rnn = nn.LSTM(c, spec.hidden_size, num_layers=spec.rnn_layers, batch_first=True,
                               dropout=spec.dropout if spec.rnn_layers > 1 else 0.0)
        else:
            fc, width = [], c * spec.conv_len
            for i, size in enumerate(spec.fc_sizes):
                fc.append(nn.Linear(width, size))
                if i < len(spec.fc_sizes) - 1:
                    fc.append(nn.ReLU())
                width = size
            self.fc = nn.Sequential(nn.Flatten(), *fc)

    def forward(self, x):
        h = self.conv(x)
        if self.spec.variant == "conv-only":
            return self.fc(h)
        out, _ = self.rnn(h.transpose(1, 2))
        return out[:, -1] if self.spec.reduce == "last" else out.mean(dim=1)


class IflfModel(nn.Module):
    """Extractor parameters plus K heads.

    ``head_classes[k]`` lists the global class ids covered by head k, in
    output order; ``domains[k]`` names the domain the head belongs to.
    """

    def __init__(self, spec: ExtractorSpec, head_classes, domains=None, seed=None):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.extractor = Extractor(spec)
        self.head_classes = [list(map(int, c)) for c in head_classes]
        self.domains = list(domains) if domains is not None else [f"head{k}" for k in range(len(self.head_classes))]
        if len(self.domains) != len(self.head_classes):
            raise ValueError("one domain name per head is required")
        self.heads = nn.ModuleList(nn.Linear(spec.feature_dim, len(c)) for c in self.head_classes)
        self.class_names = None

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def _check_head(self, k):
        if not 0 <= k < self.num_heads:
            raise IndexError(f"head index {k} outside [0, {self.num_heads})")

    def _as_tensor(self, windows):
        dtype = next(self.extractor.parameters()).dtype
        x = torch.as_tensor(np.asarray(windows) if not torch.is_tensor(windows) else windows, dtype=dtype)
        expected = (self.spec.in_channels, self.spec.window_len)
        if x.ndim != 3 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"windows must have shape [n, {expected[0]}, {expected[1]}], got {tuple(x.shape)}")
        return x

    def extract(self, windows, train: bool = False):
        """Features ``[n, d]``.  Dropout is active only with ``train=True``."""
        x = self._as_tensor(windows)
        was = self.extractor.training
        self.extractor.train(train)
        try:
            return self.extractor(x)
        finally:
            self.extractor.train(was)

    def logits(self, features, k: int):
        self._check_head(k)
        return self.heads[k](features)

    def predict(self, k: int, windows):
        """Class probabilities over head k's classes, eval mode."""
        self._check_head(k)
        with torch.no_grad():
            return torch.softmax(self.logits(self.extract(windows), k), dim=1)

    def add_head(self, classes, domain="target", init=None) -> int:
        head = nn.Linear(self.spec.feature_dim, len(classes))
        if init is not None:
            head.load_state_dict(init.state_dict())
        self.heads.append(head)
        self.head_classes.append(list(map(int, classes)))
        self.domains.append(domain)
        return self.num_heads - 1


def build(spec: ExtractorSpec, domains, seed: int = 0) -> IflfModel:
    """``domains`` is a list of ``(name, class_ids)``; class_ids may be a count."""
    names, classes = [], []
    for name, cls in domains:
        names.append(str(name))
        classes.append(list(range(cls)) if isinstance(cls, int) else list(cls))
    torch.manual_seed(seed)
    model = IflfModel(spec, classes, names, seed=seed)
    with torch.no_grad():
        z = model.extractor.eval()(torch.zeros(1, spec.in_channels, spec.window_len))
    if z.shape[1] != spec.feature_dim:
        raise ValueError(f"extractor produces {z.shape[1]} features, spec declares {spec.feature_dim}")
    return model


def extractor_params(model: IflfModel):
    return list(model.extractor.parameters())


def head_params(model: IflfModel, k: int):
    return list(model.heads[k].parameters())


def checksum(params) -> str:
    """SHA-256 over the raw bytes of a parameter list."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def head_weight_stats(model: IflfModel, k: int, bins=50, value_range=None) -> dict:
    """L1 norm, variance and normalized histogram of head k's weights (bias excluded)."""
    model._check_head(k)
    w = model.heads[k].weight.detach().cpu().double().numpy().ravel()
    counts, edges = np.histogram(w, bins=bins, range=value_range)
    total = counts.sum()
    return {
        "l1_norm": float(np.abs(w).sum()),
        "variance": float(w.var()),
        "histogram": (counts / total if total else counts.astype(float)).tolist(),
        "bin_edges": edges.tolist(),
    }


def save_model(model: IflfModel, path, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "spec": asdict(model.spec),
            "seed": model.seed,
            "head_classes": model.head_classes,
            "domains": model.domains,
            "class_names": model.class_names,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_model(path) -> IflfModel:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    spec = ExtractorSpec(**ckpt["spec"])
    model = IflfModel(spec, ckpt["head_classes"], ckpt["domains"], seed=ckpt["seed"])
    model.load_state_dict(ckpt["state_dict"])
    model.class_names = ckpt.get("class_names")
    model.extra = ckpt.get("extra", {})
    return model
