"""Frozen-representation evaluation and score-analysis tables.

k-NN and the linear probe consume backbone embeddings (pre-projector) of a
frozen encoder.  The analysis operations sweep augmentation magnitudes
through a frozen score model and emit rectangular tables ready for CSV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import magnitude_grid
from .score import score_values

TABLE_KINDS = ("curve", "histogram", "pair_grid", "contour")
HIST_BINS = 50


@dataclass(frozen=True)
class KnnReport:
    k: int
    accuracy: float
    per_class: tuple        # test accuracy per class id; nan if class absent
    n_test: int


@dataclass(frozen=True)
class AnalysisTable:
    kind: str
    columns: tuple
    rows: tuple             # tuple of equal-length value tuples
    # columns 0..len(magnitude_columns)-1 are magnitudes for CSV formatting
    magnitude_columns: int = 1

    def __post_init__(self):
        if self.kind not in TABLE_KINDS:
            raise ValueError(f"kind must be one of {TABLE_KINDS}")
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("rows must be rectangular")
            for v in row:
                if not np.isfinite(v):
                    raise ValueError("table values must be finite")

    def to_csv(self) -> str:
        """Header first; magnitudes as decimals with 6 significant digits."""
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = []
            for j, v in enumerate(row):
                if j < self.magnitude_columns:
                    cells.append(f"{v:.6g}")
                elif float(v).is_integer():
                    cells.append(str(int(v)))
                else:
                    cells.append(f"{v:.8g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def matrix(self, steps: int) -> np.ndarray:
        """Last column reshaped to a steps x steps grid (row-major)."""
        vals = np.array([r[-1] for r in self.rows], dtype=np.float64)
        return vals.reshape(steps, steps)


# ------------------------------------------------------------------- k-NN

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding cannot be cosine-normalized")
    return x / norms


def knn_eval(train_emb, train_labels, test_emb, test_labels, k: int = 5,
             metric: str = "cosine") -> KnnReport:
    """Majority vote among the k most similar training embeddings.

    Vote ties go to the class with the larger summed similarity, then to
    the smaller class id.  Neighbor rank ties resolve by training index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train_emb.ndim != 2 or test_emb.ndim != 2:
        raise ValueError("embeddings must be 2-D [n, dim]")
    if train_emb.shape[0] == 0 or test_emb.shape[0] == 0:
        raise ValueError("empty embedding set")
    if train_emb.shape[1] != test_emb.shape[1]:
        raise ValueError("embedding dims differ between train and test")
    if train_labels.shape != (train_emb.shape[0],) \
            or test_labels.shape != (test_emb.shape[0],):
        raise ValueError("label count must match embedding count")
    if not 1 <= k <= train_emb.shape[0]:
        raise ValueError(f"k={k} outside [1, n_train]")
    if metric == "cosine":
        sims = _normalize_rows(test_emb) @ _normalize_rows(train_emb).T
    elif metric == "euclidean":
        d2 = (np.sum(test_emb ** 2, axis=1)[:, None]
              + np.sum(train_emb ** 2, axis=1)[None, :]
              - 2.0 * test_emb @ train_emb.T)
        sims = -np.maximum(d2, 0.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")

    n_train = train_emb.shape[0]
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    order_tiebreak = np.arange(n_train)
    correct = 0
    per_class_correct = np.zeros(n_classes, dtype=np.int64)
    per_class_total = np.zeros(n_classes, dtype=np.int64)
    preds = np.empty(test_emb.shape[0], dtype=np.int64)
    for i in range(test_emb.shape[0]):
        nearest = np.lexsort((order_tiebreak, -sims[i]))[:k]
        votes = np.bincount(train_labels[nearest], minlength=n_classes)
        sums = np.bincount(train_labels[nearest], weights=sims[i][nearest],
                           minlength=n_classes)
        best = np.flatnonzero(votes == votes.max())
        if len(best) > 1:
            best = best[sums[best] == sums[best].max()]
        preds[i] = best.min()
        per_class_total[test_labels[i]] += 1
        if preds[i] == test_labels[i]:
            correct += 1
            per_class_correct[test_labels[i]] += 1
    per_class = tuple(per_class_correct[c] / per_class_total[c]
                      if per_class_total[c] else float("nan")
                      for c in range(n_classes))
    return KnnReport(k=k, accuracy=correct / test_emb.shape[0],
                     per_class=per_class, n_test=test_emb.shape[0])


# ------------------------------------------------------------ linear probe

def linear_probe(train_emb, train_labels, test_emb, test_labels,
                 epochs: int, lr: float) -> float:
    """Test accuracy of a softmax linear layer fit by full-batch SGD.

    Weights and bias start at zero; argmax prediction ties resolve to the
    smallest class id.
    """
    x = np.asarray(train_emb, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    xt = np.asarray(test_emb, dtype=np.float64)
    yt = np.asarray(test_labels, dtype=np.int64)
    if x.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("empty embedding set")
    n_classes = int(max(y.max(), yt.max())) + 1
    d = x.shape[1]
    w = ad.tensor(np.zeros((d, n_classes)), track=True)
    b = ad.tensor(np.zeros(n_classes), track=True)
    onehot = np.zeros((x.shape[0], n_classes))
    onehot[np.arange(x.shape[0]), y] = 1.0
    xs = ad.tensor(x)
    for _ in range(epochs):
        logits = ad.add_row_bias(ad.matmul(xs, w), b)
        shifted = ad.add_rowwise(logits, ad.tensor(-logits.data.max(axis=1)))
        exps = ad.elementwise_unary("exp", shifted)
        lse = ad.elementwise_unary("log", ad.reduce_sum(exps, axes=(1,)))
        true_logit = ad.reduce_sum(ad.mul(shifted, ad.tensor(onehot)),
                                   axes=(1,))
        loss = ad.reduce_mean(ad.sub(lse, true_logit))
        gmap = ad.backward(loss)
        w = ad.tensor(w.data - lr * gmap[w].data, track=True)
        b = ad.tensor(b.data - lr * gmap[b].data, track=True)
    logits = xt @ w.data + b.data
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == yt))


# -------------------------------------------------------- analysis tables

def score_magnitude_curve(score_params, images, transform_id: str,
                          steps: int, sigmas, sigma_index=None) -> AnalysisTable:
    """Mean score value over images at each grid magnitude."""
    images = np.asarray(images)
    mags = None
    stacks = None
    for img in images:
        grid = magnitude_grid(img, transform_id, steps=steps)
        if mags is None:
            mags = [m for m, _, _ in grid]
            stacks = [[] for _ in grid]
        for slot, (_, out, _) in zip(stacks, grid):
            slot.append(out)
    rows = []
    for m, slot in zip(mags, stacks):
        vals = score_values(score_params, np.stack(slot).astype(np.float32),
                            sigmas, sigma_index)
        rows.append((float(m), float(vals.mean())))
    return AnalysisTable(kind="curve", columns=("magnitude", "score_value"),
                         rows=tuple(rows))


def score_histogram(score_params, originals, augmented, sigmas,
                    sigma_index=None) -> AnalysisTable:
    """Fixed-width left-closed bins over the pooled score-value range."""
    vo = score_values(score_params, np.asarray(originals, dtype=np.float32),
                      sigmas, sigma_index)
    va = score_values(score_params, np.asarray(augmented, dtype=np.float32),
                      sigmas, sigma_index)
    pooled = np.concatenate([vo, va])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        counts_o = np.zeros(HIST_BINS, dtype=np.int64)
        counts_a = np.zeros(HIST_BINS, dtype=np.int64)
        counts_o[0], counts_a[0] = len(vo), len(va)
        edges = lo + np.arange(HIST_BINS)
    else:
        edges_full = np.linspace(lo, hi, HIST_BINS + 1)
        counts_o, _ = np.histogram(vo, bins=edges_full)
        counts_a, _ = np.histogram(va, bins=edges_full)
        edges = edges_full[:-1]
    rows = tuple((float(e), int(co), int(ca))
                 for e, co, ca in zip(edges, counts_o, counts_a))
    return AnalysisTable(kind="histogram",
                         columns=("bin_left", "count_original",
                                  "count_augmented"),
                         rows=rows, magnitude_columns=0)


def pair_score_grid(score_params, image, id_a: str, id_b: str, steps: int,
                    sigmas, sigma_index=None,
                    kind: str = "pair_grid") -> AnalysisTable:
    """Magnitude-by-magnitude score table for one image.

    pair_grid: entry (i, j) is the absolute gap between the score value of
    id_a at m_i and that of id_b at m_j, each applied alone.  contour:
    entry (i, j) is the score value after applying id_a at m_i then id_b
    at m_j to the same image.
    """
    image = np.asarray(image)
    if kind == "pair_grid":
        grid_a = magnitude_grid(image, id_a, steps=steps)
        grid_b = magnitude_grid(image, id_b, steps=steps)
        va = score_values(score_params,
                          np.stack([g[1] for g in grid_a]).astype(np.float32),
                          sigmas, sigma_index)
        vb = score_values(score_params,
                          np.stack([g[1] for g in grid_b]).astype(np.float32),
                          sigmas, sigma_index)
        rows = []
        for i, (mi, _, _) in enumerate(grid_a):
            for j, (mj, _, _) in enumerate(grid_b):
                rows.append((float(mi), float(mj), abs(float(va[i] - vb[j]))))
        columns = ("magnitude_a", "magnitude_b", "score_distance")
    elif kind == "contour":
        grid = magnitude_grid(image, id_a, id_b, steps=steps)
        vals = score_values(score_params,
                            np.stack([g[1] for g in grid]).astype(np.float32),
                            sigmas, sigma_index)
        rows = [(float(mi), float(mj), float(v))
                for ((mi, mj), _, _), v in zip(grid, vals)]
        columns = ("magnitude_a", "magnitude_b", "score_value")
    else:
        raise ValueError("kind must be pair_grid or contour")
    return AnalysisTable(kind=kind, columns=columns, rows=tuple(rows),
                         magnitude_columns=2)
