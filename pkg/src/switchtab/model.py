"""Encoder / projector / decoder network with mutual-salient feature switching.

Encoder ``f``: every input feature becomes a token ``x_j * w_j + b_j`` of width
``d_model``; the M tokens go through pre-norm transformer blocks (multi-head
self-attention and a relu feed-forward, each with a residual) and each final
token is read out to one scalar, so ``z`` has width M like the input.

Projectors ``p_s`` / ``p_m`` and the decoder are single affine layers with a
sigmoid.  The decoder always consumes ``mutual ⊕ salient``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    M: int
    d_model: int = 32
    n_layers: int = 3
    n_heads: int = 2
    d_ff: int = 64
    d_e: int | None = None
    n_outputs: int = 2
    task: str = "binary"
    head_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_e is None:
            self.d_e = self.M
        for name in ("M", "d_model", "n_layers", "n_heads", "d_ff", "d_e", "n_outputs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.task == "regression" and self.n_outputs != 1:
            raise ValueError("regression heads have exactly one output")
        if self.head_hidden is not None and self.head_hidden <= 0:
            raise ValueError("head_hidden must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class ForwardOutputs(NamedTuple):
    z1: Tensor
    z2: Tensor
    s1: Tensor
    s2: Tensor
    m1: Tensor
    m2: Tensor
    recovered1: Tensor
    recovered2: Tensor
    switched1: Tensor
    switched2: Tensor


class SwitchTabModel:
    """Named float64 parameters plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self, prefix: str | tuple[str, ...] = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def pretrain_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head_ft.")}

    def encoder_parameters(self) -> dict[str, Tensor]:
        return self.parameters(("tok.", "blocks.", "readout."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def copy(self) -> "SwitchTabModel":
        return SwitchTabModel(ModelConfig(**asdict(self.config)),
                              {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": asdict(self.config),
            "parameters": {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                           for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SwitchTabModel":
        version = d.get("format_version")
        if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        config = ModelConfig.from_dict(d["model_config"])
        reference = init_model(config)
        stored = d["parameters"]
        if set(stored) != set(reference.params):
            raise ValueError("checkpoint parameter names do not match the model config")
        params = {}
        for name, ref in reference.params.items():
            shape = tuple(stored[name]["shape"])
            if shape != ref.shape:
                raise ValueError(f"parameter {name}: stored shape {shape} != expected {ref.shape}")
            values = np.array(stored[name]["values"], dtype=np.float64)
            if values.size != ref.data.size:
                raise ValueError(f"parameter {name}: wrong number of values")
            params[name] = Tensor(values.reshape(shape), requires_grad=True)
        return cls(config, params)


def _parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) in a fixed order; fan_in None marks bias/offset (zeros)
    and 0 marks layer-norm gains (ones)."""
    M, dm, de, dff = cfg.M, cfg.d_model, cfg.d_e, cfg.d_ff
    spec = [("tok.weight", (M, dm), 1), ("tok.bias", (M, dm), None)]
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        spec += [(b + "ln1.gain", (dm,), 0), (b + "ln1.offset", (dm,), None)]
        for proj in ("q", "k", "v", "o"):
            spec += [(b + f"attn.{proj}.weight", (dm, dm), dm), (b + f"attn.{proj}.bias", (dm,), None)]
        spec += [(b + "ln2.gain", (dm,), 0), (b + "ln2.offset", (dm,), None)]
        spec += [(b + "ff1.weight", (dm, dff), dm), (b + "ff1.bias", (dff,), None),
                 (b + "ff2.weight", (dff, dm), dff), (b + "ff2.bias", (dm,), None)]
    spec += [("readout.weight", (M, dm), dm), ("readout.bias", (M,), None)]
    spec += [("proj_s.weight", (M, de), M), ("proj_s.bias", (de,), None),
             ("proj_m.weight", (M, de), M), ("proj_m.bias", (de,), None),
             ("decoder.weight", (2 * de, M), 2 * de), ("decoder.bias", (M,), None)]
    for head in ("head_pre", "head_ft"):
        if cfg.head_hidden and head == "head_pre":
            h = cfg.head_hidden
            spec += [(f"{head}.hidden.weight", (M, h), M), (f"{head}.hidden.bias", (h,), None),
                     (f"{head}.weight", (h, cfg.n_outputs), h), (f"{head}.bias", (cfg.n_outputs,), None)]
        else:
            spec += [(f"{head}.weight", (M, cfg.n_outputs), M), (f"{head}.bias", (cfg.n_outputs,), None)]
    return spec


def init_model(config: ModelConfig, rng: np.random.Generator | None = None) -> SwitchTabModel:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = {}
    for name, shape, fan_in in _parameter_shapes(config):
        if fan_in is None:
            values = np.zeros(shape)
        elif fan_in == 0:
            values = np.ones(shape)
        else:
            bound = math.sqrt(1.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return SwitchTabModel(config, params)


def _affine(x: Tensor, model: SwitchTabModel, prefix: str) -> Tensor:
    return T.affine(x, model[prefix + ".weight"], model[prefix + ".bias"])


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise T.ShapeError(f"{what}: expected shape (B, {width}), got {x.shape}")


def _attention(h: Tensor, model: SwitchTabModel, b: str) -> Tensor:
    cfg = model.config
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    N, M = h.shape[0], h.shape[1]

    def split(t: Tensor, axes) -> Tensor:
        # (N, M, d_model) -> per-head layout given by ``axes`` over (N, M, H, dh)
        return T.permute(T.reshape(t, (N, M, H, dh)), axes)

    q = split(T.scale(_affine(h, model, b + "attn.q"), 1.0 / math.sqrt(dh)), (0, 2, 1, 3))
    kt = split(_affine(h, model, b + "attn.k"), (0, 2, 3, 1))
    v = split(_affine(h, model, b + "attn.v"), (0, 2, 1, 3))
    heads = T.matmul(T.softmax(T.matmul(q, kt)), v)  # (N, H, M, dh)
    mixed = T.reshape(T.permute(heads, (0, 2, 1, 3)), (N, M, cfg.d_model))
    return _affine(mixed, model, b + "attn.o")


def encode(model: SwitchTabModel, x: Tensor) -> Tensor:
    """(B, M) -> (B, M).  Rows never interact."""
    cfg = model.config
    x = T._lift(x)
    _check_width(x, cfg.M, "encode")
    B = x.shape[0]
    tokens = T.add(T.mul(T.reshape(x, (B, cfg.M, 1)), model["tok.weight"]), model["tok.bias"])
    h = tokens
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        a = T.layer_norm(h, model[b + "ln1.gain"], model[b + "ln1.offset"])
        h = T.add(h, _attention(a, model, b))
        f = T.layer_norm(h, model[b + "ln2.gain"], model[b + "ln2.offset"])
        f = _affine(T.relu(_affine(f, model, b + "ff1")), model, b + "ff2")
        h = T.add(h, f)
    # per-token scalar read-out: sum_k h[b, j, k] * w[j, k] + c[j]
    return T.add(T.sum(T.mul(h, model["readout.weight"]), axis=-1), model["readout.bias"])


def decouple(model: SwitchTabModel, z: Tensor) -> tuple[Tensor, Tensor]:
    """Return (salient, mutual)."""
    z = T._lift(z)
    _check_width(z, model.config.M, "decouple")
    s = T.sigmoid(_affine(z, model, "proj_s"))
    m = T.sigmoid(_affine(z, model, "proj_m"))
    return s, m


def decode(model: SwitchTabModel, mutual: Tensor, salient: Tensor) -> Tensor:
    de = model.config.d_e
    mutual, salient = T._lift(mutual), T._lift(salient)
    _check_width(mutual, de, "decode(mutual)")
    _check_width(salient, de, "decode(salient)")
    if mutual.shape[0] != salient.shape[0]:
        raise T.ShapeError("decode: mutual and salient batch sizes differ")
    return T.sigmoid(_affine(T.concat([mutual, salient]), model, "decoder"))


def forward_pair(model: SwitchTabModel, x1: Tensor, x2: Tensor) -> ForwardOutputs:
    x1, x2 = T._lift(x1), T._lift(x2)
    if x1.shape[0] != x2.shape[0]:
        raise T.ShapeError(f"forward_pair: batch sizes differ ({x1.shape[0]} vs {x2.shape[0]})")
    # rows never interact inside the encoder, so both streams share one pass
    B = x1.shape[0]
    z = encode(model, T.Tensor(np.vstack([x1.data, x2.data])))
    z1, z2 = T.slice_rows(z, 0, B), T.slice_rows(z, B, 2 * B)
    s1, m1 = decouple(model, z1)
    s2, m2 = decouple(model, z2)
    return ForwardOutputs(
        z1=z1, z2=z2, s1=s1, s2=s2, m1=m1, m2=m2,
        recovered1=decode(model, m1, s1),
        recovered2=decode(model, m2, s2),
        switched1=decode(model, m2, s1),
        switched2=decode(model, m1, s2),
    )


def predict(model: SwitchTabModel, z: Tensor, head: str = "pretrain") -> Tensor:
    """Logits (B, n_classes) or regression values (B, 1) from the chosen head."""
    prefix = {"pretrain": "head_pre", "finetune": "head_ft"}.get(head)
    if prefix is None:
        raise ValueError(f"unknown head {head!r}")
    z = T._lift(z)
    _check_width(z, model.config.M, "predict")
    if prefix + ".hidden.weight" in model.params:
        z = T.relu(_affine(z, model, prefix + ".hidden"))
    return _affine(z, model, prefix)
