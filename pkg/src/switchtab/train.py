"""Losses, optimizers, pre-training with feature switching, and fine-tuning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import FeatureMatrix, corrupt, iter_batches, sample_batch_pairs
from .model import ForwardOutputs, ModelConfig, SwitchTabModel, encode, forward_pair, init_model, predict
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    ratio: float = 0.3
    batch_size: int = 128
    pretrain_epochs: int = 1000
    pretrain_lr: float = 3e-4
    alpha: float = 1.0
    finetune_epochs: int = 200
    finetune_lr: float = 1e-3
    patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0
    switching: bool = True
    label_assisted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts cannot be negative")
        if self.pretrain_lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates cannot be negative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(target, pred: Tensor) -> Tensor:
    """Mean over all entries, i.e. the batch mean of per-row (1/M) sums."""
    target = T._lift(target)
    if target.shape != pred.shape:
        raise T.ShapeError(f"mse: target {target.shape} vs prediction {pred.shape}")
    return T.mean(T.square(T.sub(target, pred)))


def recon_terms(x1, x2, out: ForwardOutputs) -> dict[str, Tensor]:
    """The four reconstruction errors, always measured against uncorrupted inputs."""
    return {
        "switched1": mse(x1, out.switched1),
        "switched2": mse(x2, out.switched2),
        "recovered1": mse(x1, out.recovered1),
        "recovered2": mse(x2, out.recovered2),
    }


def recon_loss(x1, x2, out: ForwardOutputs, switching: bool = True) -> Tensor:
    terms = recon_terms(x1, x2, out)
    loss = T.add(terms["recovered1"], terms["recovered2"])
    if switching:
        loss = T.add(T.add(terms["switched1"], terms["switched2"]), loss)
    return loss


def cls_loss(outputs: Sequence[Tensor], labels: Sequence[np.ndarray], task: str) -> Tensor:
    """Cross-entropy (classification) or RMSE (regression) over all streams pooled."""
    if isinstance(outputs, Tensor):
        outputs, labels = [outputs], [labels]
    if len(outputs) != len(labels):
        raise ValueError("one label vector per output stream is required")
    total_n = 0
    parts = []
    for out, y in zip(outputs, labels):
        y = np.asarray(y)
        if out.shape[0] != y.shape[0]:
            raise T.ShapeError(f"cls_loss: {out.shape[0]} predictions vs {y.shape[0]} labels")
        n = y.shape[0]
        total_n += n
        if task == "regression":
            target = y.astype(np.float64).reshape(-1, 1)
            parts.append((T.mean(T.square(T.sub(out, T.Tensor(target)))), n))
        else:
            k = out.shape[1]
            if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= k):
                raise ValueError(f"class labels must be integers in [0, {k})")
            onehot = np.zeros((n, k))
            onehot[np.arange(n), y] = 1.0
            picked = T.sum(T.mul(T.log_softmax(out), T.Tensor(onehot)), axis=-1)
            parts.append((T.scale(T.mean(picked), -1.0), n))
    pooled = parts[0][0] if len(parts) == 1 else None
    if pooled is None:
        pooled = T.scale(parts[0][0], parts[0][1] / total_n)
        for term, n in parts[1:]:
            pooled = T.add(pooled, T.scale(term, n / total_n))
    return T.sqrt(pooled) if task == "regression" else pooled


def total_loss(recon: Tensor, cls: Tensor | None, alpha: float = 1.0) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if cls is None:
        return recon
    return T.add(recon, T.scale(cls, alpha))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class _Optimizer:
    def __init__(self, params: Mapping[str, Tensor] | Sequence[Tensor], lr: float):
        self.params = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
        self.lr = lr

    def _grads(self) -> dict[str, np.ndarray]:
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise T.NonFiniteError(f"non-finite gradient for {k}; step aborted")
        return grads

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class RMSprop(_Optimizer):
    def __init__(self, params, lr: float = 3e-4, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(params, lr)
        self.decay = decay
        self.eps = eps
        self.acc = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self) -> None:
        grads = self._grads()
        for k, p in self.params.items():
            g = grads[k]
            self.acc[k] = self.decay * self.acc[k] + (1.0 - self.decay) * g * g
            p.data -= self.lr * g / (np.sqrt(self.acc[k]) + self.eps)
        self.zero_grad()


class Adam(_Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.zero_grad()


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    recon_recovered: float | None = None
    recon_switched: float | None = None
    cls: float | None = None
    total: float | None = None
    val_metric: float | None = None
    seconds: float = 0.0

    @property
    def recon(self) -> float:
        return (self.recon_recovered or 0.0) + (self.recon_switched or 0.0)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    switching: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def column_names(self) -> list[str]:
        cols = ["epoch", "recon_recovered"]
        if self.switching:
            cols.append("recon_switched")
        return cols + ["cls", "total", "val_metric"]

    def write_csv(self, path: str | Path) -> None:
        cols = self.column_names()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for rec in self.records:
                row = []
                for c in cols:
                    v = getattr(rec, c)
                    row.append("" if v is None else (str(v) if c == "epoch" else repr(float(v))))
                w.writerow(row)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def model_config_for(matrix: FeatureMatrix, seed: int = 0, **overrides) -> ModelConfig:
    task = matrix.task or "binary"
    n_out = 1 if task == "regression" else (matrix.n_classes or 2)
    return ModelConfig(M=matrix.M, n_outputs=n_out, task=task, seed=seed, **overrides)


def pretrain(matrix: FeatureMatrix, config: TrainConfig, model_config: ModelConfig | None = None,
             model: SwitchTabModel | None = None) -> tuple[SwitchTabModel, TrainLog]:
    """Self-supervised (optionally label-assisted) pre-training with switched reconstruction."""
    if matrix.n < 2:
        raise ValueError("pre-training needs at least two rows")
    if config.label_assisted and matrix.labels is None:
        raise ValueError("label-assisted pre-training requires labels")
    if model_config is None:
        model_config = model_config_for(matrix, seed=config.seed)
    if model_config.M != matrix.M:
        raise ValueError(f"model expects {model_config.M} features, matrix has {matrix.M}")
    init_rng, rng = _streams(config.seed)
    if model is None:
        model = init_model(model_config, init_rng)
    pools = matrix.pools if matrix.pools is not None else matrix.values
    params = model.pretrain_parameters()
    opt = RMSprop(params, lr=config.pretrain_lr)
    task = model_config.task
    trainlog = TrainLog(switching=config.switching)

    for epoch in range(1, config.pretrain_epochs + 1):
        started = time.perf_counter()
        sums = {"recovered": 0.0, "switched": 0.0, "cls": 0.0, "total": 0.0}
        seen = 0
        for idx1, idx2 in sample_batch_pairs(matrix.n, config.batch_size, rng):
            x1, x2 = matrix.values[idx1], matrix.values[idx2]
            c1 = corrupt(x1, pools, config.ratio, rng).values
            c2 = corrupt(x2, pools, config.ratio, rng).values
            out = forward_pair(model, Tensor(c1), Tensor(c2))
            terms = recon_terms(x1, x2, out)
            recovered = T.add(terms["recovered1"], terms["recovered2"])
            switched = T.add(terms["switched1"], terms["switched2"])
            recon = T.add(switched, recovered) if config.switching else recovered
            cls = None
            if config.label_assisted:
                logits = [predict(model, out.z1, "pretrain"), predict(model, out.z2, "pretrain")]
                cls = cls_loss(logits, [matrix.labels[idx1], matrix.labels[idx2]], task)
            loss = total_loss(recon, cls, config.alpha)
            T.backward(loss)
            opt.step()
            b = len(idx1)
            seen += b
            sums["recovered"] += b * recovered.item()
            sums["switched"] += b * switched.item()
            sums["total"] += b * loss.item()
            if cls is not None:
                sums["cls"] += b * cls.item()
        rec = EpochRecord(
            epoch=epoch,
            recon_recovered=sums["recovered"] / seen,
            recon_switched=sums["switched"] / seen if config.switching else None,
            cls=sums["cls"] / seen if config.label_assisted else None,
            total=sums["total"] / seen,
            seconds=time.perf_counter() - started,
        )
        trainlog.records.append(rec)
        if epoch == 1 or epoch % 50 == 0:
            log.info("pretrain epoch %d: recon=%.5f total=%.5f", epoch, rec.recon, rec.total)
    return model, trainlog


def _validation_score(model: SwitchTabModel, matrix: FeatureMatrix) -> float:
    """Accuracy for classification, negated RMSE for regression (higher is better)."""
    out = predict(model, encode(model, Tensor(matrix.values)), "finetune").data
    if model.config.task == "regression":
        return -float(np.sqrt(np.mean((out[:, 0] - matrix.labels) ** 2)))
    return float(np.mean(out.argmax(axis=1) == matrix.labels))


def finetune(model: SwitchTabModel, matrix: FeatureMatrix, config: TrainConfig,
             validation: FeatureMatrix | None = None) -> tuple[SwitchTabModel, TrainLog]:
    """Train encoder + fine-tune head end to end; return the best-validation copy.

    Without an explicit ``validation`` matrix, a seeded ``val_fraction`` split of
    ``matrix`` is held out.  The input model is not modified.
    """
    if config.finetune_epochs == 0:
        raise ValueError("nothing to train: finetune_epochs is 0")
    if matrix.labels is None:
        raise ValueError("fine-tuning requires labels")
    _, rng = _streams(config.seed)
    if validation is None:
        order = rng.permutation(matrix.n)
        n_val = int(round(config.val_fraction * matrix.n))
        if n_val < 1 or n_val >= matrix.n:
            raise ValueError("validation split must hold at least one sample and leave training rows")
        validation, matrix = matrix.rows(np.sort(order[:n_val])), matrix.rows(np.sort(order[n_val:]))
    elif validation.n < 1 or validation.labels is None:
        raise ValueError("validation split smaller than one labelled sample")

    model = model.copy()
    params = {k: v for k, v in model.params.items() if not k.startswith("head_pre.")}
    params = {k: v for k, v in params.items() if not k.startswith(("proj_", "decoder."))}
    opt = Adam(params, lr=config.finetune_lr)
    task = model.config.task
    trainlog = TrainLog(switching=False)
    best_score, best_state, stale = -np.inf, model.state(), 0
    for epoch in range(1, config.finetune_epochs + 1):
        started = time.perf_counter()
        total, seen = 0.0, 0
        for idx in iter_batches(matrix.n, config.batch_size, rng):
            out = predict(model, encode(model, Tensor(matrix.values[idx])), "finetune")
            loss = cls_loss([out], [matrix.labels[idx]], task)
            T.backward(loss)
            opt.step()
            total += len(idx) * loss.item()
            seen += len(idx)
        score = _validation_score(model, validation)
        trainlog.records.append(EpochRecord(epoch=epoch, cls=total / seen, total=total / seen,
                                            val_metric=abs(score) if task == "regression" else score,
                                            seconds=time.perf_counter() - started))
        if score > best_score:
            best_score, best_state, stale = score, model.state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %.4f)", epoch, best_score)
                break
    model.load_state(best_state)
    return model, trainlog
