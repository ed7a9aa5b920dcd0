"""Embedding export, plug-and-play features, a logistic probe, metrics and 2-D PCA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureMatrix
from .model import SwitchTabModel, decouple, encode
from .tensor import Tensor


@dataclass
class EmbeddingTable:
    row_ids: np.ndarray
    z: np.ndarray
    s: np.ndarray
    m: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.row_ids)

    def write_csv(self, path: str | Path) -> None:
        header = (["row_id"] + [f"z_{i}" for i in range(self.z.shape[1])]
                  + [f"s_{i}" for i in range(self.s.shape[1])]
                  + [f"m_{i}" for i in range(self.m.shape[1])])
        if self.labels is not None:
            header.append("label")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, rid in enumerate(self.row_ids):
                row = [str(int(rid))] + [repr(float(v)) for v in np.concatenate([self.z[i], self.s[i], self.m[i]])]
                if self.labels is not None:
                    lab = self.labels[i]
                    row.append(str(int(lab)) if np.issubdtype(self.labels.dtype, np.integer) else repr(float(lab)))
                w.writerow(row)


def embed(model: SwitchTabModel, matrix: FeatureMatrix | np.ndarray, batch_size: int = 1024) -> EmbeddingTable:
    """Run uncorrupted rows through the encoder and both projectors, in row order."""
    values = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=np.float64)
    labels = matrix.labels if isinstance(matrix, FeatureMatrix) else None
    if values.ndim != 2 or values.shape[1] != model.config.M:
        raise ValueError(f"model expects width {model.config.M}, got shape {values.shape}")
    zs, ss, ms = [], [], []
    for start in range(0, len(values), batch_size):
        z = encode(model, Tensor(values[start:start + batch_size]))
        s, m = decouple(model, z)
        zs.append(z.data)
        ss.append(s.data)
        ms.append(m.data)
    return EmbeddingTable(np.arange(len(values)), np.vstack(zs), np.vstack(ss), np.vstack(ms), labels)


def concat_plug_and_play(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``x ⊕ s`` for a single vector or row-aligned matrices."""
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    if x.ndim != s.ndim or x.shape[:-1] != s.shape[:-1]:
        raise ValueError(f"cannot concatenate shapes {x.shape} and {s.shape}")
    return np.concatenate([x, s], axis=-1)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 0.1
    iterations: int = 500
    l2: float = 1e-4


@dataclass
class ProbeModel:
    weights: np.ndarray  # (features, classes)
    bias: np.ndarray
    config: ProbeConfig

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.weights.shape[0]:
            raise ValueError(f"probe expects {self.weights.shape[0]} features, got {X.shape[1]}")
        return X @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        logits = self.scores(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.scores(X).argmax(axis=1)


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None,
                n_classes: int | None = None) -> ProbeModel:
    """Multinomial logistic regression by full-batch gradient descent with L2 on the weights."""
    config = config or ProbeConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError("probe needs at least two samples and one feature")
    if y.shape != (X.shape[0],) or y.dtype.kind not in "iu" or np.any(y < 0):
        raise ValueError("labels must be non-negative integer class indices, one per row")
    k = max(int(y.max()) + 1, n_classes or 0, 2)
    onehot = np.zeros((len(y), k))
    onehot[np.arange(len(y)), y] = 1.0
    W = np.zeros((X.shape[1], k))
    b = np.zeros(k)
    present = np.unique(y)
    if len(present) == 1:
        # degenerate: always predict the only class seen
        b[present[0]] = 1.0
        return ProbeModel(W, b, config)
    n = len(y)
    for _ in range(config.iterations):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= config.lr * (X.T @ g + config.l2 * W)
        b -= config.lr * g.sum(axis=0)
    return ProbeModel(W, b, config)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    return float(np.mean(predictions == labels))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must be aligned")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("AUC requires binary 0/1 labels")
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or targets.size == 0:
        raise ValueError("predictions and targets must be non-empty and aligned")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


METRICS = {"accuracy": accuracy, "auc": auc, "rmse": rmse}


def metric(predictions, labels, kind: str) -> float:
    try:
        fn = METRICS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}; choose from {sorted(METRICS)}") from None
    return fn(predictions, labels)


# ---------------------------------------------------------------------------
# 2-D projection
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    explained_variance: tuple[float, float]
    components: np.ndarray  # (2, d)


def _top_eigenpair(C: np.ndarray, iterations: int, tol: float) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix.

    Each power step also squares the working operator, so after k steps the
    start vector has been hit by C**(2**k): convergence no longer hinges on a
    wide gap between the two largest eigenvalues.
    """
    d = C.shape[0]
    scale = np.abs(C).max()
    if scale == 0.0:
        return 0.0, np.eye(d)[0]
    A = C / scale
    v = np.ones(d) / np.sqrt(d) + np.arange(1, d + 1) * 1e-3
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector orthogonal to the range; restart from a basis vector
            w = A[:, int(np.argmax(np.abs(A).sum(axis=0)))]
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
        A = A @ A
        A /= max(np.abs(A).max(), np.finfo(float).tiny)
    # polish against the original operator
    for _ in range(3):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
    return float(v @ C @ v), v


def pca2(vectors: np.ndarray, iterations: int = 200, tol: float = 1e-9) -> Projection:
    """Project onto the two leading principal axes found by power iteration with deflation.

    Each axis is oriented so its first non-negligible loading is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca2 needs at least two row vectors")
    centered = X - X.mean(axis=0)
    C = centered.T @ centered / (X.shape[0] - 1)
    d = C.shape[0]
    if not np.any(centered):
        return Projection(np.zeros((X.shape[0], 2)), (0.0, 0.0), np.zeros((2, d)))
    comps, variances = [], []
    work = C.copy()
    for _ in range(2):
        if d <= len(comps):
            comps.append(np.zeros(d))
            variances.append(0.0)
            continue
        lam, v = _top_eigenpair(work, iterations, tol)
        lam = max(lam, 0.0)
        if lam <= 1e-15 * max(np.trace(C), 1e-300):
            v, lam = np.zeros(d), 0.0
        else:
            lead = np.flatnonzero(np.abs(v) > 1e-12)
            if len(lead) and v[lead[0]] < 0:
                v = -v
            work = work - lam * np.outer(v, v)
        comps.append(v)
        variances.append(lam)
    W = np.vstack(comps)
    return Projection(centered @ W.T, (variances[0], variances[1]), W)


def write_projection_csv(proj: Projection, groups: Sequence, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "pc1", "pc2", "group"])
        for i, (x, y) in enumerate(proj.coords):
            w.writerow([i, repr(float(x)), repr(float(y)), groups[i]])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def write_projection_svg(proj: Projection, groups: Sequence, path: str | Path, title: str = "") -> None:
    """Scatter plot on a fixed 800x600 canvas, one colour per group."""
    width, height, pad = 800, 600, 40
    xy = proj.coords
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    px = pad + (xy[:, 0] - lo[0]) / span[0] * (width - 2 * pad)
    py = height - pad - (xy[:, 1] - lo[1]) / span[1] * (height - 2 * pad)
    names = list(dict.fromkeys(str(g) for g in groups))
    colour = {g: _PALETTE[i % len(_PALETTE)] for i, g in enumerate(names)}
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        lines.append(f'<text x="{pad}" y="24" font-family="sans-serif" font-size="16">{title}</text>')
    for x, y, g in zip(px, py, groups):
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour[str(g)]}" fill-opacity="0.7"/>')
    for i, g in enumerate(names):
        y = pad + 18 * i
        lines.append(f'<circle cx="{width - 120}" cy="{y}" r="5" fill="{colour[g]}"/>')
        lines.append(f'<text x="{width - 108}" y="{y + 4}" font-family="sans-serif" font-size="12">{g}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
