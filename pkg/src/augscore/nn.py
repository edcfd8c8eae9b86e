"""Network definitions, initialisation, optimizers, and the LR schedule.

Activations are channels-last ([B,H,W,C]) throughout; conv kernels are stored
as [kh,kw,C,F].  The contrastive encoder is a small three-conv backbone with
global average pooling, a linear embedding head, a two-layer projector, and
(for the stop-gradient method) a two-layer predictor.  There is no batch
normalisation anywhere; training stays deterministic and batch-size honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


@dataclass
class EncoderDesc:
    """Architecture sizes for the contrastive encoder."""
    in_channels: int = 3
    channels: tuple = (32, 64, 128)
    embed_dim: int = 128
    proj_hidden: int = 128
    proj_dim: int = 64
    view_size: int = 32

    def param_shapes(self) -> dict:
        c1, c2, c3 = self.channels
        shapes = {
            "conv1.w": (3, 3, self.in_channels, c1), "conv1.b": (c1,),
            "conv2.w": (3, 3, c1, c2), "conv2.b": (c2,),
            "conv3.w": (3, 3, c2, c3), "conv3.b": (c3,),
            "embed.w": (c3, self.embed_dim), "embed.b": (self.embed_dim,),
            "proj1.w": (self.embed_dim, self.proj_hidden), "proj1.b": (self.proj_hidden,),
            "proj2.w": (self.proj_hidden, self.proj_dim), "proj2.b": (self.proj_dim,),
            "pred1.w": (self.proj_dim, self.proj_dim // 2), "pred1.b": (self.proj_dim // 2,),
            "pred2.w": (self.proj_dim // 2, self.proj_dim), "pred2.b": (self.proj_dim,),
        }
        return shapes

    def to_dict(self) -> dict:
        return {"kind": "encoder", "in_channels": self.in_channels,
                "channels": list(self.channels), "embed_dim": self.embed_dim,
                "proj_hidden": self.proj_hidden, "proj_dim": self.proj_dim,
                "view_size": self.view_size}

    @staticmethod
    def from_dict(d: dict) -> "EncoderDesc":
        return EncoderDesc(in_channels=d["in_channels"], channels=tuple(d["channels"]),
                           embed_dim=d["embed_dim"], proj_hidden=d["proj_hidden"],
                           proj_dim=d["proj_dim"], view_size=d["view_size"])


@dataclass
class ParamSet:
    """Named parameter tensors plus the architecture descriptor."""
    desc: object
    tensors: dict = field(default_factory=dict)

    def names(self):
        return list(self.tensors.keys())

    def subset(self, prefixes) -> dict:
        return {k: v for k, v in self.tensors.items()
                if any(k.startswith(p) for p in prefixes)}


def _fan_in(shape) -> int:
    if len(shape) == 4:            # conv [kh,kw,C,F]
        return shape[0] * shape[1] * shape[2]
    if len(shape) == 2:            # linear [in,out]
        return shape[0]
    return shape[0]


def init_param_tensors(shapes: dict, seed: int, dtype=np.float32) -> dict:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases.

    Draw order follows the descriptor's shape listing, so a seed pins every
    parameter bit-for-bit.
    """
    rng = Rng(seed, 0xA11)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(shape))
            n = int(np.prod(shape))
            arr = rng.uniform(n, -bound, bound).reshape(shape).astype(dtype)
        out[name] = ad.tensor(arr, track=True)
    return out


def init_encoder(desc: EncoderDesc, seed: int, dtype=np.float32) -> ParamSet:
    return ParamSet(desc=desc, tensors=init_param_tensors(desc.param_shapes(), seed, dtype))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_row_bias(ad.matmul(x, w), b)


def _conv_block(x: Tensor, p: dict, name: str, stride: int) -> Tensor:
    y = ad.conv2d_nhwc(x, p[f"{name}.w"], stride=stride, padding=1)
    bsz, h, w, c = y.shape
    y = ad.reshape(y, (bsz * h * w, c))
    y = ad.add_row_bias(y, p[f"{name}.b"])
    return ad.relu(ad.reshape(y, (bsz, h, w, c)))


def encoder_forward(params: ParamSet, images: Tensor) -> tuple:
    """Backbone + projector. images: [B,H,W,C] in [0,1].

    Returns (embedding [B,embed_dim], projection [B,proj_dim]).
    """
    p = params.tensors
    h = _conv_block(images, p, "conv1", 2)
    h = _conv_block(h, p, "conv2", 2)
    h = _conv_block(h, p, "conv3", 2)
    pooled = ad.reduce_mean(h, axes=(1, 2))          # global average pool -> [B,C3]
    emb = _linear(pooled, p["embed.w"], p["embed.b"])
    z = ad.relu(_linear(emb, p["proj1.w"], p["proj1.b"]))
    z = _linear(z, p["proj2.w"], p["proj2.b"])
    return emb, z


def predictor_forward(params: ParamSet, z: Tensor) -> Tensor:
    """Two-layer prediction MLP (P -> P/2 -> P, relu between)."""
    p = params.tensors
    h = ad.relu(_linear(z, p["pred1.w"], p["pred1.b"]))
    return _linear(h, p["pred2.w"], p["pred2.b"])


# ----------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    """Per-parameter moment buffers keyed by name, plus the step count."""
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState,
                      lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> tuple:
    """v <- mu*v + (g + wd*w);  w <- w - lr*v.  Returns (new params, state)."""
    new = {}
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name].data + weight_decay * p.data
        buf = state.m.get(name)
        buf = g if buf is None else momentum * buf + g
        state.m[name] = buf
        new[name] = ad.tensor(p.data - lr * buf, track=True)
    state.step += 1
    return new, state


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple:
    """Bias-corrected Adam; on the first step |update| ~= lr elementwise."""
    t = state.step + 1
    new = {}
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name].data + weight_decay * p.data
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        new[name] = ad.tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps), track=True)
    state.step = t
    return new, state


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup then single cosine decay to zero at total_steps."""
    if total_steps <= 0 or step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup must be shorter than the schedule")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
