"""Two-phase training orchestration: score pre-training, then weighted CL.

The contrastive loop follows the weighting recipe end to end: per step it
samples two views of each batch image from seeded streams, computes detached
pair weights in the configured mode, evaluates the chosen weighted loss, and
applies the optimizer with a cosine-warmup schedule.  Labels are never read.
The score model, when used, is frozen: its parameters enter forward passes
as untracked tensors, so no gradient entry can exist for them.

Checkpoints are a small self-describing binary: magic, JSON header (tensor
table, config echo, step), then float32 little-endian parameter blobs in
header order.  Saving and loading round-trips bitwise.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .config import RunConfig, resolved_dict
from .data import LabeledDataset, batch_iter
from .augment import sample_view_pair
from .losses import (WeightVector, baseline_weight, baseline_weight_vector,
                     constant_weights, median_threshold_indices, pair_weights,
                     simclr_weighted, simsiam_weighted, vicreg_weighted,
                     wmse_weighted)
from .nn import (EncoderDesc, OptimizerState, ParamSet, adam_step, cosine_lr,
                 encoder_forward, init_encoder, predictor_forward,
                 sgd_momentum_step)
from .rng import Rng, derive_seed
from .score import (ScoreNetDesc, freeze, score_field_distances, score_values)

_MAGIC = b"SCL1"


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


def save_checkpoint(params: ParamSet, extra: dict, path) -> None:
    """Magic, u32 header length, JSON header, float32 LE blobs in order."""
    names = list(params.tensors)
    header = {
        "descriptor": params.desc.to_dict(),
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)}
                    for n in names],
        **extra,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params.tensors[n].data,
                                         dtype="<f4").tobytes())


def _rebuild_desc(d: dict):
    if d.get("kind") == "encoder":
        return EncoderDesc.from_dict(d)
    return ScoreNetDesc.from_dict(d)


def load_checkpoint(path) -> tuple:
    """Returns (ParamSet, header dict); bitwise inverse of save_checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    desc = _rebuild_desc(header["descriptor"])
    offset = 8 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: blob for tensor "
                                  f"{entry['name']!r} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        tensors[entry["name"]] = ad.tensor(arr.copy(), track=True)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ParamSet(desc, tensors), header


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, step, lr, loss, mean_weight, wall_seconds):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("steps must strictly increase")
        if not np.isfinite(loss):
            raise ValueError("loss must be finite")
        self.rows.append({"epoch": epoch, "step": step, "lr": lr,
                          "loss": loss, "mean_weight": mean_weight,
                          "wall_seconds": wall_seconds})

    def deterministic_rows(self) -> list:
        """Rows minus wall-clock, for run-to-run comparison."""
        return [{k: v for k, v in r.items() if k != "wall_seconds"}
                for r in self.rows]

    def to_csv(self, path) -> None:
        lines = ["epoch,step,lr,loss,mean_weight,wall_seconds"]
        for r in self.rows:
            lines.append(f"{r['epoch']},{r['step']},{r['lr']:.8g},"
                         f"{r['loss']:.8g},{r['mean_weight']:.8g},"
                         f"{r['wall_seconds']:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------- weight plumbing

def _stack_views(pairs, attr) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in pairs]).astype(np.float32)


def _raw_pair_distances(pairs, cfg: RunConfig, epoch: int, score_params,
                        sigmas, views_a, views_b) -> tuple:
    """Unnormalized per-pair distance for the configured weight mode.

    Returns (distances, values_a, values_b); the per-view score values are
    None except in score mode, where they are kept for the eq6 matrix.
    """
    mode = cfg.cl.weight_mode
    if mode == "constant":
        return np.ones(len(pairs)), None, None
    if mode == "score":
        va = score_values(score_params, views_a, sigmas, cfg.score.sigma_index)
        vb = score_values(score_params, views_b, sigmas, cfg.score.sigma_index)
        return np.abs(va - vb), va, vb
    if mode == "score_field":
        return score_field_distances(score_params, views_a, views_b, sigmas,
                                     cfg.score.sigma_index), None, None
    if mode == "random":
        return np.array([baseline_weight(p, "random",
                                         Rng(cfg.seed, 0xBA5E, epoch,
                                             p.source_index))
                         for p in pairs]), None, None
    if mode == "pixel":
        return (np.array([baseline_weight(p, "pixel", None) for p in pairs]),
                None, None)
    raise ValueError(f"unknown weight mode {mode!r}")


def _build_weights(distances, values_a, values_b,
                   cfg: RunConfig) -> WeightVector:
    loss_cfg = cfg.cl.loss_config()
    needs_matrix = (cfg.cl.method == "simclr" and cfg.cl.simclr_form == "eq6")
    if cfg.cl.weight_mode == "constant":
        return constant_weights(len(distances), with_matrix=needs_matrix)
    if needs_matrix:
        return pair_weights(values_a, values_b, loss_cfg)
    return baseline_weight_vector(distances, loss_cfg)


# ------------------------------------------------------------- CL training

def _loss_for_method(cfg: RunConfig, params: ParamSet, views_a, views_b,
                     weights: WeightVector):
    loss_cfg = cfg.cl.loss_config()
    xa = ad.tensor(views_a)
    xb = ad.tensor(views_b)
    _, za = encoder_forward(params, xa)
    _, zb = encoder_forward(params, xb)
    method = cfg.cl.method
    if method == "simclr":
        return simclr_weighted(za, zb, weights, loss_cfg)
    if method == "simsiam":
        pa = predictor_forward(params, za)
        pb = predictor_forward(params, zb)
        return simsiam_weighted(pa, za, pb, zb, weights, loss_cfg)
    if method == "wmse":
        return wmse_weighted([za, zb], weights, loss_cfg)
    if method == "vicreg":
        return vicreg_weighted(za, zb, weights, loss_cfg)
    raise ValueError(f"unknown method {method!r}")


def train_cl(cfg: RunConfig, ds: LabeledDataset, score_params=None,
             out_dir=None, log=None) -> tuple:
    """Weighted contrastive training; returns (encoder ParamSet, MetricsLog).

    A frozen score model must be supplied exactly when the weight mode reads
    scores.  With sampling=median_threshold each step draws a double batch
    and keeps the half whose raw pair distance clears the median.  Non-finite
    losses abort with NumericError; the last per-epoch checkpoint in out_dir
    is left intact.
    """
    cfg.validate()
    score_modes = ("score", "score_field")
    if (score_params is not None) != (cfg.cl.weight_mode in score_modes):
        raise ValueError("a score model is required exactly when "
                         "weight_mode reads scores")
    if score_params is not None:
        score_params = freeze(score_params)
    sigmas = None
    if score_params is not None:
        from .score import default_sigma_ladder
        sigmas = default_sigma_ladder(cfg.score.sigma_levels,
                                      cfg.score.sigma_max, cfg.score.sigma_min)

    params = init_encoder(EncoderDesc(), derive_seed(cfg.seed, 0x0E2C))
    metrics = MetricsLog()
    n = len(ds)
    double = cfg.cl.sampling == "median_threshold"
    draw = cfg.cl.batch_size * (2 if double else 1)
    if n < draw:
        raise ValueError(f"dataset of {n} images cannot fill a draw of {draw}")
    steps_per_epoch = n // draw
    total_steps = max(cfg.cl.epochs * steps_per_epoch, 1)
    warmup = int(cfg.cl.warmup_frac * total_steps)
    state = OptimizerState()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    best_loss = np.inf
    global_step = 0
    for epoch in range(cfg.cl.epochs):
        epoch_losses = []
        for idx in batch_iter(n, draw, cfg.seed, epoch):
            pairs = [sample_view_pair(ds.images[i], int(i), epoch, cfg.seed,
                                      cfg.aug) for i in idx]
            views_a = _stack_views(pairs, "view_a")
            views_b = _stack_views(pairs, "view_b")
            dists, va, vb = _raw_pair_distances(pairs, cfg, epoch,
                                                score_params, sigmas,
                                                views_a, views_b)
            if double:
                keep = median_threshold_indices(dists)
                pairs = [pairs[i] for i in keep]
                views_a, views_b = views_a[keep], views_b[keep]
                dists = dists[keep]
                if va is not None:
                    va, vb = va[keep], vb[keep]
            weights = _build_weights(dists, va, vb, cfg)
            loss = _loss_for_method(cfg, params, views_a, views_b, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"CL loss diverged at epoch {epoch} "
                                   f"step {global_step}")
            gmap = ad.backward(loss)
            grads = {name: gmap[t] for name, t in params.tensors.items()
                     if t in gmap}
            lr = cosine_lr(global_step, total_steps, warmup, cfg.cl.lr)
            live = {name: params.tensors[name] for name in grads}
            if cfg.cl.optimizer == "adam":
                new, state = adam_step(live, grads, state, lr,
                                       weight_decay=cfg.cl.weight_decay)
            else:
                new, state = sgd_momentum_step(live, grads, state, lr,
                                               momentum=cfg.cl.momentum,
                                               weight_decay=cfg.cl.weight_decay)
            tensors = dict(params.tensors)
            tensors.update(new)
            params = ParamSet(params.desc, tensors)
            metrics.add(epoch, global_step, lr, value,
                        float(weights.values.mean()),
                        time.monotonic() - start)
            epoch_losses.append(value)
            global_step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else np.inf
        if log is not None:
            log({"epoch": epoch, "loss": mean_loss})
        if out_dir is not None:
            extra = {"step": global_step, "epoch": epoch,
                     "config": resolved_dict(cfg)}
            save_checkpoint(params, extra, out_dir / "last.ckpt")
            if mean_loss < best_loss:
                save_checkpoint(params, extra, out_dir / "best.ckpt")
        best_loss = min(best_loss, mean_loss)
    return params, metrics


def embed_dataset(params: ParamSet, images: np.ndarray,
                  batch_size: int = 256) -> np.ndarray:
    """Backbone embeddings (pre-projector) for [N, H, W, C] images."""
    frozen = ParamSet(params.desc,
                      {k: ad.tensor(v.data) for k, v in params.tensors.items()})
    out = []
    for start in range(0, images.shape[0], batch_size):
        x = ad.tensor(images[start:start + batch_size].astype(np.float32))
        emb, _ = encoder_forward(frozen, x)
        out.append(emb.data.copy())
    return np.concatenate(out, axis=0)
