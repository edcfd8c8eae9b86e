"""Denoising score models: a small conv encoder-decoder and its training loop.

The model s(x, sigma) estimates the gradient of the log density of data
perturbed with Gaussian noise of scale sigma.  A single network produces a
raw field that is divided by sigma, so one set of weights serves the whole
noise ladder.  Training minimizes the weighted denoising objective with
weight sigma^2 per level, which reduces every term to matching the raw field
against the negated noise draw.

The scalar ``score_value`` of an image is the mean absolute entry of the
score field at the smallest ladder noise level; distances between the score
values (or fields) of two augmented views drive the pair weighting in the
contrastive losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import batch_iter
from .nn import OptimizerState, ParamSet, adam_step, init_param_tensors
from .rng import Rng


def default_sigma_ladder(levels: int = 4, sigma_max: float = 1.0,
                         sigma_min: float = 0.01) -> tuple:
    """Geometric ladder from sigma_max down to sigma_min."""
    if levels < 1:
        raise ValueError("ladder needs at least one level")
    if levels == 1:
        return (float(sigma_max),)
    ratio = (sigma_min / sigma_max) ** (1.0 / (levels - 1))
    return tuple(float(sigma_max * ratio ** i) for i in range(levels))


def check_sigma_ladder(sigmas) -> tuple:
    sigmas = tuple(float(s) for s in sigmas)
    if not sigmas:
        raise ValueError("empty sigma ladder")
    if any(s <= 0 for s in sigmas):
        raise ValueError("sigmas must be positive")
    if any(a <= b for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigma ladder must strictly decrease")
    return sigmas


@dataclass
class ScoreNetDesc:
    """Architecture descriptor; kind 'unet' for images, 'affine' for vectors."""
    kind: str = "unet"
    in_channels: int = 3
    channels: tuple = (8, 16, 32)
    dim: int = 2          # affine only

    def param_shapes(self) -> dict:
        if self.kind == "affine":
            return {"lin.w": (self.dim, self.dim), "lin.b": (self.dim,)}
        if self.kind != "unet":
            raise ValueError(f"unknown score net kind {self.kind!r}")
        c1, c2, c3 = self.channels
        ci = self.in_channels
        return {
            "e1.w": (3, 3, ci, c1), "e1.b": (c1,),
            "e2.w": (3, 3, c1, c2), "e2.b": (c2,),
            "e3.w": (3, 3, c2, c3), "e3.b": (c3,),
            "mid.w": (3, 3, c3, c3), "mid.b": (c3,),
            "d2.w": (3, 3, c3, c2), "d2.b": (c2,),
            "d1.w": (3, 3, c2, c1), "d1.b": (c1,),
            "out.w": (3, 3, c1, ci), "out.b": (ci,),
        }

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels,
                "channels": list(self.channels), "dim": self.dim}

    @staticmethod
    def from_dict(d: dict) -> "ScoreNetDesc":
        return ScoreNetDesc(kind=d["kind"], in_channels=d["in_channels"],
                            channels=tuple(d["channels"]), dim=d["dim"])


def init_score_net(desc: ScoreNetDesc, seed: int, dtype=np.float32) -> ParamSet:
    tensors = init_param_tensors(desc.param_shapes(), seed, dtype)
    if desc.kind == "unet":
        # Start the output conv small so the initial field is near zero: the
        # early optimization pressure is then "learn structure", not "crush
        # the decoder", which at full init scale can kill the last skip relu.
        small = tensors["out.w"].data * dtype(0.1)
        tensors["out.w"] = ad.tensor(small, track=True)
    return ParamSet(desc, tensors)


def freeze(params: ParamSet) -> ParamSet:
    """Untracked copies: forwards through them build no graph."""
    return ParamSet(params.desc,
                    {k: ad.tensor(v.data) for k, v in params.tensors.items()})


def _conv(x: Tensor, p: dict, name: str, stride: int) -> Tensor:
    y = ad.conv2d_nhwc(x, p[name + ".w"], stride=stride, padding=1)
    b, h, w, c = y.shape
    flat = ad.add_row_bias(ad.reshape(y, (b * h * w, c)), p[name + ".b"])
    return ad.reshape(flat, (b, h, w, c))


def raw_field(params: ParamSet, x: Tensor) -> Tensor:
    """Unscaled network output for input [B, H, W, C] (or [B, D] affine)."""
    p = params.tensors
    if params.desc.kind == "affine":
        return ad.add_row_bias(ad.matmul(x, p["lin.w"]), p["lin.b"])
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ad.ShapeError(f"unet input spatial dims must be multiples of 4, "
                            f"got {x.shape}")
    # Leaky activations: a plain relu decoder can die wholesale early in
    # training (the skip-add pre-activation goes negative everywhere), which
    # freezes the net at the zero-output saddle.  The leak keeps a gradient
    # path open so the optimizer can always climb back out.
    h1 = ad.leaky_relu(_conv(x, p, "e1", 1))
    h2 = ad.leaky_relu(_conv(h1, p, "e2", 2))
    h3 = ad.leaky_relu(_conv(h2, p, "e3", 2))
    hm = ad.leaky_relu(_conv(h3, p, "mid", 1))
    u2 = ad.leaky_relu(ad.add(_conv(ad.upsample_nearest2x(hm), p, "d2", 1), h2))
    u1 = ad.leaky_relu(ad.add(_conv(ad.upsample_nearest2x(u2), p, "d1", 1), h1))
    return _conv(u1, p, "out", 1)


def score_forward(params: ParamSet, x: Tensor, sigma: float) -> Tensor:
    """Score estimate at noise scale sigma: raw(x) / sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return ad.mul(raw_field(params, x), ad.tensor(1.0 / sigma, dtype=x.dtype))


# ------------------------------------------------------------- DSM objective

def dsm_loss_single(params: ParamSet, x: np.ndarray, sigma: float,
                    eps: np.ndarray) -> Tensor:
    """sigma^2-weighted denoising term: 0.5 * mean((raw(x + sigma*eps) + eps)^2).

    Equal to sigma^2 * 0.5 * mean((s(x_noisy, sigma) + eps/sigma)^2) under
    the 1/sigma output scaling, with the mean over batch and all components.
    """
    dtype = params.tensors[next(iter(params.tensors))].dtype
    noisy = ad.tensor((x + sigma * eps).astype(dtype))
    resid = ad.add(raw_field(params, noisy), ad.tensor(eps.astype(dtype)))
    return ad.mul(ad.tensor(0.5, dtype=dtype),
                  ad.reduce_mean(ad.mul(resid, resid)))


def dsm_loss_unified(params: ParamSet, x: np.ndarray, sigmas,
                     eps_list) -> Tensor:
    """Average of the weighted single-level terms over the whole ladder."""
    sigmas = check_sigma_ladder(sigmas)
    if len(eps_list) != len(sigmas):
        raise ValueError("need one noise draw per ladder level")
    total = None
    for sigma, eps in zip(sigmas, eps_list):
        term = dsm_loss_single(params, x, sigma, eps)
        total = term if total is None else ad.add(total, term)
    return ad.mul(ad.tensor(1.0 / len(sigmas), dtype=total.dtype), total)


def train_score_model(images: np.ndarray, desc: ScoreNetDesc, sigmas,
                      epochs: int, batch_size: int, lr: float, seed: int,
                      log=None) -> tuple:
    """Adam-train a score net on images [N, H, W, C]; returns (params, history).

    Noise draws come from streams keyed (seed, epoch, step, level), so runs
    are reproducible regardless of batch size changes elsewhere.  Raises
    NumericError if the loss stops being finite.
    """
    sigmas = check_sigma_ladder(sigmas)
    params = init_score_net(desc, seed)
    state = OptimizerState()
    n = images.shape[0]
    if n < batch_size:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    history = []
    for epoch in range(epochs):
        epoch_losses = []
        for step, idx in enumerate(batch_iter(n, batch_size, seed, epoch)):
            x = images[idx]
            eps_list = [Rng(seed, 0x5C0E, epoch, step, i).normal(x.shape)
                        for i in range(len(sigmas))]
            loss = dsm_loss_unified(params, x, sigmas, eps_list)
            if not np.isfinite(loss.item()):
                raise NumericError(f"score loss diverged at epoch {epoch} "
                                   f"step {step}")
            gmap = ad.backward(loss)
            grads = {name: gmap[t] for name, t in params.tensors.items()}
            new, state = adam_step(params.tensors, grads, state, lr)
            params = ParamSet(desc, new)
            epoch_losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses))}
        history.append(entry)
        if log is not None:
            log(entry)
    return params, history


# ------------------------------------------------------------- score values

def resolve_sigma(sigmas, sigma_index: int | None = None) -> float:
    """1-based ladder lookup; default is the last (smallest) level."""
    sigmas = check_sigma_ladder(sigmas)
    if sigma_index is None:
        sigma_index = len(sigmas)
    if not 1 <= sigma_index <= len(sigmas):
        raise ValueError(f"sigma_index must be in [1, {len(sigmas)}], "
                         f"got {sigma_index}")
    return sigmas[sigma_index - 1]


def score_values(params: ParamSet, images: np.ndarray, sigmas,
                 sigma_index: int | None = None,
                 batch_size: int = 256) -> np.ndarray:
    """Per-image mean |score| at one ladder level; images [N, H, W, C]."""
    sigma = resolve_sigma(sigmas, sigma_index)
    dtype = params.tensors[next(iter(params.tensors))].dtype
    out = np.empty(images.shape[0])
    for start in range(0, images.shape[0], batch_size):
        x = ad.tensor(images[start:start + batch_size].astype(dtype))
        s = score_forward(params, x, sigma)
        axes = tuple(range(1, len(s.shape)))
        out[start:start + x.shape[0]] = np.abs(s.data).mean(axis=axes)
    return out


def score_value(params: ParamSet, image: np.ndarray, sigmas,
                sigma_index: int | None = None) -> float:
    """Scalar score value of a single [H, W, C] image."""
    return float(score_values(params, image[None], sigmas, sigma_index)[0])


def score_distance(value_a: float, value_b: float) -> float:
    """Pair weight seed: absolute gap between two scalar score values."""
    return abs(float(value_a) - float(value_b))


def score_field_distances(params: ParamSet, views_a: np.ndarray,
                          views_b: np.ndarray, sigmas,
                          sigma_index: int | None = None) -> np.ndarray:
    """Mean absolute pointwise gap between the two views' score fields."""
    if views_a.shape != views_b.shape:
        raise ValueError("view batches must have matching shapes")
    sigma = resolve_sigma(sigmas, sigma_index)
    dtype = params.tensors[next(iter(params.tensors))].dtype
    sa = score_forward(params, ad.tensor(views_a.astype(dtype)), sigma)
    sb = score_forward(params, ad.tensor(views_b.astype(dtype)), sigma)
    diff = np.abs(sa.data - sb.data)
    return diff.mean(axis=tuple(range(1, diff.ndim)))
