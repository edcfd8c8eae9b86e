"""Contrastive objectives in base and score-weighted form.

Four methods are covered: a doubled-batch softmax loss (simclr), a
predictor/stop-gradient cosine loss (simsiam), whitened MSE (wmse), and an
invariance/variance/covariance loss (vicreg).  Each weighted variant scales
its per-pair term by a detached nonnegative weight; with weights identically
one it reduces to the base form.

Weights come from ``pair_weights`` (distance between the two views' score
values), from baselines (random draw, pixel distance), or are constant.
They are plain numpy values, so no gradient can reach them by construction.

The simclr weighting has two forms: ``alg1`` multiplies each anchor's loss
term by its pair weight before averaging; ``eq6`` places pairwise weights
inside the softmax fraction, which requires distances between every pair of
views in the doubled batch, kept as a 2B x 2B matrix whose off-diagonal
block holds the cross-view distances d(a_i, b_g).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

METHODS = ("simclr", "simsiam", "wmse", "vicreg")
WEIGHT_MODES = ("constant", "score", "score_field", "random", "pixel")
WEIGHT_NORMS = ("raw", "batch_mean")
SIMCLR_FORMS = ("alg1", "eq6")


@dataclass
class LossConfig:
    method: str = "simclr"
    tau: float = 0.5
    lam: float = 25.0          # vicreg invariance coefficient
    mu: float = 25.0           # vicreg variance coefficient
    nu: float = 1.0            # vicreg covariance coefficient
    eps_var: float = 1e-4
    whiten_eps: float = 1e-6
    weight_mode: str = "score"
    weight_norm: str = "batch_mean"
    simclr_form: str = "alg1"

    def validate(self) -> "LossConfig":
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.lam, self.mu, self.nu) < 0:
            raise ValueError("lam, mu, nu must be nonnegative")
        if self.eps_var <= 0 or self.whiten_eps <= 0:
            raise ValueError("eps_var and whiten_eps must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.weight_norm not in WEIGHT_NORMS:
            raise ValueError(f"weight_norm must be one of {WEIGHT_NORMS}")
        if self.simclr_form not in SIMCLR_FORMS:
            raise ValueError(f"simclr_form must be one of {SIMCLR_FORMS}")
        return self


@dataclass
class WeightVector:
    """Detached per-pair weights; eq6 additionally carries the pair matrix."""
    values: np.ndarray            # [B] nonnegative
    matrix: np.ndarray | None = None   # [2B, 2B] for the eq6 softmax
    mode: str = "score"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("weight values must be a vector")
        if self.values.size and self.values.min() < 0:
            raise ValueError("weights must be nonnegative")


def pair_weights(score_values_a, score_values_b, cfg: LossConfig) -> WeightVector:
    """Per-pair weight w_i = |a_i - b_i|, optionally mean-normalized.

    batch_mean rescales so the weights average to one (a mean below 1e-8
    degenerates to all ones).  For the eq6 form the full doubled-batch
    distance matrix is built from the same score values and normalized by
    the same divisor, which the softmax fraction cancels anyway.
    """
    a = np.asarray(score_values_a, dtype=np.float64)
    b = np.asarray(score_values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score value vectors must share one length")
    w = np.abs(a - b)
    matrix = None
    if cfg.simclr_form == "eq6" and cfg.method == "simclr":
        v = np.concatenate([a, b])
        matrix = np.abs(v[:, None] - v[None, :])
    if cfg.weight_norm == "batch_mean":
        m = w.mean() if w.size else 0.0
        if m < 1e-8:
            w = np.ones_like(w)
            if matrix is not None:
                matrix = np.ones_like(matrix)
        else:
            w = w / m
            if matrix is not None:
                matrix = matrix / m
    return WeightVector(values=w, matrix=matrix, mode=cfg.weight_mode)


def constant_weights(batch: int, with_matrix: bool = False) -> WeightVector:
    matrix = np.ones((2 * batch, 2 * batch)) if with_matrix else None
    return WeightVector(values=np.ones(batch), matrix=matrix, mode="constant")


def baseline_weight_vector(values, cfg: LossConfig) -> WeightVector:
    """Wrap per-pair baseline weights, honoring the configured normalization."""
    w = np.asarray(values, dtype=np.float64)
    if cfg.weight_norm == "batch_mean":
        m = w.mean() if w.size else 0.0
        w = np.ones_like(w) if m < 1e-8 else w / m
    return WeightVector(values=w, mode=cfg.weight_mode)


def baseline_weight(pair, mode: str, rng) -> float:
    """Non-score weight baselines: a uniform draw or raw pixel distance."""
    if mode == "random":
        return float(rng.uniform())
    if mode == "pixel":
        return float(np.abs(pair.view_a - pair.view_b).mean())
    raise ValueError(f"unknown baseline weight mode {mode!r}")


# ------------------------------------------------------------- shared pieces

def _l2_normalize_rows(z: Tensor) -> Tensor:
    norms = ad.l2_norm_sq(z, axes=(1,))
    if np.any(norms.data == 0):
        raise DomainError("zero-norm row cannot be normalized")
    return ad.div_rows(z, ad.sqrt(norms))


def _const(value, like: Tensor) -> Tensor:
    return ad.tensor(np.asarray(value, dtype=like.dtype))


def _check_pair(za: Tensor, zb: Tensor, min_b: int = 2):
    if za.shape != zb.shape or len(za.shape) != 2:
        raise ShapeError(f"projection batches must be [B,P] twins, "
                         f"got {za.shape} and {zb.shape}")
    if za.shape[0] < min_b:
        raise ShapeError(f"need at least {min_b} pairs, got {za.shape[0]}")


def _softmax_terms(z: Tensor, tau: float, weight_matrix=None) -> Tensor:
    """Per-anchor -log softmax terms over the doubled batch [2B]."""
    n = z.shape[0]
    b = n // 2
    sims = ad.matmul(z, ad.transpose(z))
    logits = ad.mul(sims, _const(1.0 / tau, z))
    shift = ad.add_rowwise(logits, ad.tensor(-logits.data.max(axis=1)))
    exps = ad.elementwise_unary("exp", shift)
    eye = np.eye(n, dtype=z.dtype)
    pos = np.zeros((n, n), dtype=z.dtype)
    idx = np.arange(n)
    pos[idx, (idx + b) % n] = 1.0
    others = 1.0 - eye
    if weight_matrix is not None:
        wm = weight_matrix.astype(z.dtype)
        pos = pos * wm
        others = others * wm
    num = ad.reduce_sum(ad.mul(exps, ad.tensor(pos)), axes=(1,))
    den = ad.reduce_sum(ad.mul(exps, ad.tensor(others)), axes=(1,))
    return ad.sub(ad.elementwise_unary("log", den),
                  ad.elementwise_unary("log", num))


def info_nce(za: Tensor, zb: Tensor, tau: float) -> Tensor:
    """Doubled-batch softmax loss: each view against all 2B-1 others.

    Rows are L2-normalized; the positive of anchor i is its paired view and
    the denominator runs over every other projection.  Numerically stable
    via a detached per-row shift.
    """
    _check_pair(za, zb)
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = _l2_normalize_rows(ad.concat([za, zb], axis=0))
    return ad.reduce_mean(_softmax_terms(z, tau))


def _check_weights(weights: WeightVector, batch: int):
    if weights.values.shape != (batch,):
        raise ShapeError(f"expected {batch} weights, got {weights.values.shape}")
    if weights.values.min() < 0:
        raise ValueError("weights must be nonnegative")


def simclr_weighted(za: Tensor, zb: Tensor, weights: WeightVector,
                    cfg: LossConfig) -> Tensor:
    """Weighted doubled-batch softmax loss.

    alg1: each anchor's term is multiplied by its detached pair weight and
    the 2B terms are averaged.  eq6: the detached pairwise weight matrix
    scales numerator and denominator inside the fraction.
    """
    _check_pair(za, zb)
    b = za.shape[0]
    _check_weights(weights, b)
    z = _l2_normalize_rows(ad.concat([za, zb], axis=0))
    if cfg.simclr_form == "eq6":
        if weights.matrix is None:
            raise ValueError("eq6 form needs the pairwise weight matrix")
        if weights.matrix.shape != (2 * b, 2 * b):
            raise ShapeError(f"eq6 weight matrix must be {(2*b, 2*b)}, "
                             f"got {weights.matrix.shape}")
        if weights.matrix.min() < 0:
            raise ValueError("weights must be nonnegative")
        return ad.reduce_mean(_softmax_terms(z, cfg.tau, weights.matrix))
    terms = _softmax_terms(z, cfg.tau)
    anchor_w = np.concatenate([weights.values, weights.values])
    return ad.reduce_mean(ad.mul(terms, ad.tensor(anchor_w.astype(terms.dtype))))


def _cosine_rows(p: Tensor, z: Tensor) -> Tensor:
    """Row-wise cosine similarity [B]; z is cut from the graph."""
    pn = _l2_normalize_rows(p)
    zn = _l2_normalize_rows(ad.detach(z))
    return ad.reduce_sum(ad.mul(pn, zn), axes=(1,))


def simsiam_base(p1: Tensor, z1: Tensor, p2: Tensor, z2: Tensor) -> Tensor:
    """0.5 * mean(D(p1, z2) + D(p2, z1)) with D = -cosine and z detached."""
    _check_pair(p1, z1, min_b=1)
    _check_pair(p2, z2, min_b=1)
    d = ad.add(_cosine_rows(p1, z2), _cosine_rows(p2, z1))
    return ad.mul(_const(-0.5, d), ad.reduce_mean(d))


def simsiam_weighted(p1: Tensor, z1: Tensor, p2: Tensor, z2: Tensor,
                     weights: WeightVector, cfg: LossConfig) -> Tensor:
    """Per-pair weight on the symmetrized negative-cosine terms."""
    _check_pair(p1, z1, min_b=1)
    _check_pair(p2, z2, min_b=1)
    _check_weights(weights, p1.shape[0])
    d = ad.add(_cosine_rows(p1, z2), _cosine_rows(p2, z1))
    wd = ad.mul(d, ad.tensor(weights.values.astype(d.dtype)))
    return ad.mul(_const(-0.5, d), ad.reduce_mean(wd))


def whiten(z: Tensor, eps: float = 1e-6) -> Tensor:
    """Cholesky whitening: center, then map the batch to identity covariance.

    Uses the population covariance of the batch plus eps on the diagonal;
    gradients flow through the factorization and the triangular inverse.
    """
    b, p = z.shape
    if b <= p:
        raise ShapeError(f"whitening needs more rows than columns, "
                         f"got {b} x {p}")
    mean = ad.reduce_mean(z, axes=(0,))
    centered = ad.add_row_bias(z, ad.neg(mean))
    cov = ad.mul(ad.matmul(ad.transpose(centered), centered), _const(1.0 / b, z))
    cov = ad.add(cov, ad.tensor((eps * np.eye(p)).astype(z.dtype)))
    try:
        lo = ad.cholesky(cov)
    except DomainError as e:
        cond = float(np.linalg.cond(cov.data))
        raise DomainError(f"covariance not positive definite even with "
                          f"eps={eps} (condition number {cond:.3e})") from e
    return ad.matmul(centered, ad.transpose(ad.inverse(lo)))


def wmse_loss(views, weights: WeightVector | None, cfg: LossConfig) -> Tensor:
    """Whitened MSE over all positive pairs of m views per source.

    The m batches are whitened jointly, split back, row-normalized, and each
    unordered view pair contributes the squared Euclidean distance per
    source, scaled by 2/(N m (m-1)).  Weights (if given) multiply per-source
    terms.
    """
    m = len(views)
    if m < 2:
        raise ValueError("need at least two views")
    b, p = views[0].shape
    for v in views:
        if v.shape != (b, p):
            raise ShapeError("all views must share one shape")
    if weights is not None:
        _check_weights(weights, b)
    whitened = whiten(ad.concat(list(views), axis=0), cfg.whiten_eps)
    blocks = [_l2_normalize_rows(ad.slice_rows(whitened, i * b, (i + 1) * b))
              for i in range(m)]
    w = None if weights is None else weights.values
    total = None
    for i in range(m):
        for j in range(i + 1, m):
            diff = ad.sub(blocks[i], blocks[j])
            dist = ad.reduce_sum(ad.mul(diff, diff), axes=(1,))
            if w is not None:
                dist = ad.mul(dist, ad.tensor(w.astype(dist.dtype)))
            part = ad.reduce_sum(dist)
            total = part if total is None else ad.add(total, part)
    return ad.mul(_const(2.0 / (b * m * (m - 1)), total), total)


def wmse_base(views, cfg: LossConfig) -> Tensor:
    return wmse_loss(views, None, cfg)


def wmse_weighted(views, weights: WeightVector, cfg: LossConfig) -> Tensor:
    return wmse_loss(views, weights, cfg)


def _variance_term(z: Tensor, eps_var: float) -> Tensor:
    """(1/P) sum_j max(0, 1 - sqrt(Var(col_j) + eps))."""
    b, p = z.shape
    mean = ad.reduce_mean(z, axes=(0,))
    centered = ad.add_row_bias(z, ad.neg(mean))
    var = ad.mul(ad.reduce_sum(ad.mul(centered, centered), axes=(0,)),
                 _const(1.0 / (b - 1), z))
    s = ad.elementwise_unary("sqrt", ad.add(var, _const(np.full(p, eps_var), z)))
    hinge = ad.relu(ad.sub(_const(np.ones(p), z), s))
    return ad.reduce_mean(hinge)


def _covariance_term(z: Tensor) -> Tensor:
    """(1/P) sum of squared off-diagonal covariance entries."""
    b, p = z.shape
    mean = ad.reduce_mean(z, axes=(0,))
    centered = ad.add_row_bias(z, ad.neg(mean))
    cov = ad.mul(ad.matmul(ad.transpose(centered), centered),
                 _const(1.0 / (b - 1), z))
    off = ad.mul(cov, ad.tensor((1.0 - np.eye(p)).astype(z.dtype)))
    return ad.mul(_const(1.0 / p, z), ad.reduce_sum(ad.mul(off, off)))


def vicreg_loss(za: Tensor, zb: Tensor, weights: WeightVector | None,
                cfg: LossConfig) -> Tensor:
    """lam * weighted invariance + mu * variance hinge + nu * covariance."""
    _check_pair(za, zb)
    if weights is not None:
        _check_weights(weights, za.shape[0])
    diff = ad.sub(za, zb)
    per = ad.reduce_sum(ad.mul(diff, diff), axes=(1,))
    if weights is not None:
        per = ad.mul(per, ad.tensor(weights.values.astype(per.dtype)))
    inv = ad.reduce_mean(per)
    var = ad.add(_variance_term(za, cfg.eps_var), _variance_term(zb, cfg.eps_var))
    cov = ad.add(_covariance_term(za), _covariance_term(zb))
    return ad.add(ad.add(ad.mul(_const(cfg.lam, inv), inv),
                         ad.mul(_const(cfg.mu, var), var)),
                  ad.mul(_const(cfg.nu, cov), cov))


def vicreg_base(za: Tensor, zb: Tensor, cfg: LossConfig) -> Tensor:
    return vicreg_loss(za, zb, None, cfg)


def vicreg_weighted(za: Tensor, zb: Tensor, weights: WeightVector,
                    cfg: LossConfig) -> Tensor:
    return vicreg_loss(za, zb, weights, cfg)


# --------------------------------------------------------- batch thresholding

def median_threshold_indices(distances) -> np.ndarray:
    """Indices of the half with distances strictly above the median.

    Slots left by median-valued entries are filled in ascending original
    index, so the selection equals the top half of a sort by (-distance,
    index).
    """
    d = np.asarray(distances, dtype=np.float64)
    n = d.size
    if n == 0 or n % 2:
        raise ValueError("need an even, nonempty distance list")
    med = np.median(d)
    above = [i for i in range(n) if d[i] > med]
    ties = [i for i in range(n) if d[i] == med]
    keep = above + ties[:n // 2 - len(above)]
    return np.array(sorted(keep), dtype=np.int64)


def median_threshold_select(pairs, distances):
    """Keep the view pairs whose score distance clears the batch median."""
    if len(pairs) != len(distances):
        raise ValueError("one distance per pair required")
    return [pairs[i] for i in median_threshold_indices(distances)]
