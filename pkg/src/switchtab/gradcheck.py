"""Finite-difference checks for every op kind and for the full pre-training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, forward_pair, init_model, predict
from .tensor import GradReport, Tensor, grad_check
from .train import cls_loss, recon_loss, total_loss

# op kind -> (input shapes, builder returning a scalar from the leaf tensors)
OpCase = tuple[Callable[[np.random.Generator], list[tuple[int, ...]]], Callable[..., Tensor]]


def _dims(rng, lo=1, hi=4, k=2):
    return [int(v) for v in rng.integers(lo, hi + 1, size=k)]


def _weights(rng, shape):
    # a fixed random weighting turns any output into a scalar with generic gradients
    return Tensor(rng.normal(size=shape))


def _reduce(out: Tensor, w: Tensor) -> Tensor:
    return T.sum(T.mul(out, w))


def _affine_shapes(rng):
    lead = tuple(_dims(rng, k=int(rng.integers(1, 3))))
    k, n = _dims(rng)
    return [lead + (k,), (k, n), (n,)]


def op_cases() -> dict[str, OpCase]:
    def binary_same(rng):
        r, c = _dims(rng)
        return [(r, c), (r, c)]

    def unary(rng):
        return [tuple(_dims(rng, k=int(rng.integers(1, 4))))]

    def matmul_shapes(rng):
        a, b, c = _dims(rng, k=3)
        if rng.random() < 0.5:
            return [(a, b), (b, c)]
        n = int(rng.integers(1, 4))
        return [(n, a, b), (b, c)]

    def bias_shapes(rng):
        r, c = _dims(rng)
        return [(r, c), (c,)]

    def concat_shapes(rng):
        r, a, b = _dims(rng, k=3)
        return [(r, a), (r, b)]

    def ln_shapes(rng):
        r, c = _dims(rng, lo=2)
        return [(r, c), (c,), (c,)]

    return {
        "matmul": (matmul_shapes, lambda a, b: T.matmul(a, b)),
        "affine": (lambda rng: _affine_shapes(rng), lambda x, w, b: T.affine(x, w, b)),
        "add": (bias_shapes, lambda a, b: T.add(a, b)),
        "subtract": (binary_same, lambda a, b: T.sub(a, b)),
        "multiply": (binary_same, lambda a, b: T.mul(a, b)),
        "scale": (unary, lambda a: T.scale(a, -1.7)),
        "sigmoid": (unary, T.sigmoid),
        "softmax": (unary, T.softmax),
        "log_softmax": (unary, T.log_softmax),
        "mean": (unary, lambda a: T.mean(a, axis=-1)),
        "mean_all": (unary, lambda a: T.mean(a)),
        "sum": (unary, lambda a: T.sum(a, axis=0)),
        "square": (unary, T.square),
        "sqrt": (unary, lambda a: T.sqrt(T.add(T.square(a), Tensor(1.0)))),
        "concat": (concat_shapes, lambda a, b: T.concat([a, b])),
        "slice": (lambda rng: [(int(rng.integers(1, 4)), int(rng.integers(2, 6)))],
                  lambda a: T.slice_last(a, 1, a.shape[-1])),
        "slice_rows": (lambda rng: [(int(rng.integers(2, 5)), int(rng.integers(1, 4)))],
                       lambda a: T.slice_rows(a, 0, a.shape[0] - 1)),
        "transpose": (lambda rng: [tuple(_dims(rng))], T.transpose),
        "permute": (lambda rng: [tuple(_dims(rng, k=3))], lambda a: T.permute(a, (1, 2, 0))),
        "layer_norm": (ln_shapes, lambda a, g, b: T.layer_norm(a, g, b)),
        "relu": (unary, T.relu),
        "reshape": (lambda rng: [(2, 3)], lambda a: T.reshape(a, (3, 2))),
    }


def check_op(kind: str, seed: int, eps: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    shapes_fn, build = op_cases()[kind]
    rng = np.random.default_rng(seed)
    leaves = []
    for shape in shapes_fn(rng):
        values = rng.normal(size=shape)
        if kind == "relu":
            # keep clear of the kink, where central differences are meaningless
            values = np.where(np.abs(values) < 0.05, 0.3, values)
        leaves.append(Tensor(values, requires_grad=True))
    probe_shape = build(*leaves).shape
    w = _weights(rng, probe_shape)
    return grad_check(lambda: _reduce(build(*leaves), w), leaves, eps=eps, tolerance=tolerance)


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(M=3, d_model=4, n_layers=3, n_heads=2, d_ff=8, d_e=3, n_outputs=2, seed=seed)


def check_full_loss(seed: int = 0, batch: int = 2, alpha: float = 1.0, switching: bool = True,
                    eps: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    """Reconstruction + alpha * classification loss of a tiny model against central differences."""
    cfg = tiny_model_config(seed)
    model = init_model(cfg)
    rng = np.random.default_rng(seed + 1000)
    # perturb zero-initialised biases/offsets so every parameter sits at a generic point
    for p in model.params.values():
        p.data += rng.normal(scale=0.1, size=p.shape)
    x1, x2 = rng.random((batch, cfg.M)), rng.random((batch, cfg.M))
    y1, y2 = rng.integers(0, 2, size=batch), rng.integers(0, 2, size=batch)
    params = model.pretrain_parameters()

    def loss():
        out = forward_pair(model, Tensor(x1), Tensor(x2))
        cls = cls_loss([predict(model, out.z1), predict(model, out.z2)], [y1, y2], cfg.task)
        return total_loss(recon_loss(x1, x2, out, switching), cls, alpha)

    return grad_check(loss, params, eps=eps, tolerance=tolerance)


def run_suite(seeds: int = 10, tolerance: float = 1e-4) -> dict:
    ops = {}
    for kind in op_cases():
        worst = max(check_op(kind, s, tolerance=tolerance).max_error for s in range(seeds))
        ops[kind] = worst
    full = check_full_loss(tolerance=tolerance)
    max_error = max(max(ops.values()), full.max_error)
    return {
        "ops": ops,
        "full_loss": full.max_error,
        "max_rel_error": max_error,
        "tolerance": tolerance,
        "passed": max_error < tolerance,
    }
