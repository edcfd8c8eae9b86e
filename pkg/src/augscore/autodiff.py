"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap a C-contiguous numpy array plus an optional graph node.  A node
is present exactly when gradient tracking is enabled for that tensor; ops
record a node on their output whenever at least one input is tracked.
``backward`` runs one reverse topological sweep from a scalar loss and
returns a map from every tracked leaf it reached to its gradient.

Broadcasting is restricted to rank-0 scalars.  Structured shapes meet through
dedicated ops instead (``add_row_bias``, ``mul_rows``, ...) so every gradient
rule stays explicit and individually testable.  Tensors are immutable after
construction; ``detach`` severs a value from the graph.
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values reached during optimization."""


class _Node:
    __slots__ = ("parents", "bwd", "leaf")

    def __init__(self, parents=(), bwd=None, leaf=False):
        self.parents = parents
        self.bwd = bwd
        self.leaf = leaf


class Tensor:
    """Immutable dense tensor. ``node`` is set iff gradients are tracked."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None, track: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.copy(arr, order="C")  # keeps 0-d shape, unlike ascontiguousarray
        self.data = arr
        self.node = _Node(leaf=True) if track else None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, track: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, track=track)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _out(data, parents, grads_fn) -> Tensor:
    """Build an op output; record a node only if some parent is tracked."""
    out = Tensor(data)
    if any(p.node is not None for p in parents):
        out.node = _Node(parents=tuple(parents), bwd=grads_fn)
    return out


def detach(a: Tensor) -> Tensor:
    """Same values, no graph node: gradients never flow past this point."""
    return Tensor(a.data)


# -- elementwise binary ----------------------------------------------------

def _binary_check(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only rank-0 broadcasts)")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch {a.dtype} vs {b.dtype}")


def _reduce_to(shape, g):
    # gradient of a rank-0 operand in a scalar broadcast is the full sum
    if shape == () and g.shape != ():
        return g.sum()
    return g


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _binary_check(a, b)
    return _out(a.data + b.data, (a, b),
                lambda g: (_reduce_to(a.shape, g), _reduce_to(b.shape, g)))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _binary_check(a, b)
    return _out(a.data - b.data, (a, b),
                lambda g: (_reduce_to(a.shape, g), _reduce_to(b.shape, -g)))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _binary_check(a, b)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b),
                lambda g: (_reduce_to(a.shape, g * bd), _reduce_to(b.shape, g * ad)))


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _binary_check(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by exact zero")
    ad, bd = a.data, b.data
    return _out(ad / bd, (a, b),
                lambda g: (_reduce_to(a.shape, g / bd),
                           _reduce_to(b.shape, -g * ad / (bd * bd))))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_binary(kind: str, a, b) -> Tensor:
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}")
    return _BINARY[kind](a, b)


# -- elementwise unary -----------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _out(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is taken as 0
    zero = a.data.dtype.type(0)
    return _out(np.where(mask, a.data, zero), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.1) -> Tensor:
    """max(x, alpha*x) for 0 < alpha < 1; subgradient at 0 is taken as alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    mask = a.data > 0
    slope = np.where(mask, a.data.dtype.type(1), a.data.dtype.type(alpha))
    return _out(np.where(mask, a.data, a.data * a.data.dtype.type(alpha)),
                (a,), lambda g: (g * slope,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _out(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data
    return _out(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt requires nonnegative input")
    s = np.sqrt(a.data)
    return _out(s, (a,), lambda g: (g * (0.5 / s),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # 0 at 0
    return _out(np.abs(a.data), (a,), lambda g: (g * sign,))


_UNARY = {"neg": neg, "relu": relu, "exp": exp, "log": log,
          "sqrt": sqrt, "abs": absolute}


def elementwise_unary(kind: str, a: Tensor) -> Tensor:
    if kind not in _UNARY:
        raise ValueError(f"unknown unary op {kind!r}")
    return _UNARY[kind](a)


# -- reductions ------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError("duplicate reduction axis")
    return axes


def _expand(g, axes, in_shape):
    # re-insert reduced axes and broadcast back to the input shape
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.shape
    return _out(a.data.sum(axis=axes), (a,),
                lambda g: (np.ascontiguousarray(_expand(g, axes, shape)),))


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.shape
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    return _out(a.data.mean(axis=axes), (a,),
                lambda g: (np.ascontiguousarray(_expand(g, axes, shape)) / n,))


def l1_norm(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.shape
    sign = np.sign(a.data)
    return _out(np.abs(a.data).sum(axis=axes), (a,),
                lambda g: (_expand(g, axes, shape) * sign,))


def l2_norm_sq(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.shape
    ad = a.data
    return _out((ad * ad).sum(axis=axes), (a,),
                lambda g: (_expand(g, axes, shape) * (2.0 * ad),))


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean,
           "l1norm": l1_norm, "l2norm_sq": l2_norm_sq}


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    return _REDUCE[kind](a, axes)


# -- structure ops ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _out(a.data.reshape(shape), (a,),
                lambda g: (np.ascontiguousarray(g.reshape(old)),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _out(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _out(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _out(a.data[start:stop].copy(), (a,), bwd)


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """[B, D] + [D]: add the same bias vector to every row."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row_bias expects [B,D] and [D], got {x.shape}, {b.shape}")
    return _out(x.data + b.data[None, :], (x, b),
                lambda g: (g, g.sum(axis=0)))


def add_rowwise(x: Tensor, v: Tensor) -> Tensor:
    """[B, D] + [B]: add a per-row scalar to every entry of that row."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError(f"add_rowwise expects [B,D] and [B], got {x.shape}, {v.shape}")
    return _out(x.data + v.data[:, None], (x, v),
                lambda g: (g, g.sum(axis=1)))


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """[B, D] * [B]: scale row i by s_i."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"mul_rows expects [B,D] and [B], got {x.shape}, {s.shape}")
    xd, sd = x.data, s.data
    return _out(xd * sd[:, None], (x, s),
                lambda g: (g * sd[:, None], (g * xd).sum(axis=1)))


def div_rows(x: Tensor, s: Tensor) -> Tensor:
    """[B, D] / [B]: divide row i by s_i."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"div_rows expects [B,D] and [B], got {x.shape}, {s.shape}")
    if np.any(s.data == 0):
        raise DomainError("div_rows by exact zero")
    xd, sd = x.data, s.data
    inv = 1.0 / sd
    return _out(xd * inv[:, None], (x, s),
                lambda g: (g * inv[:, None],
                           -(g * xd).sum(axis=1) * inv * inv))


# -- matmul / conv ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a: [..., M, K] by b: [K, N].  Leading axes of a are batch axes."""
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects a [...,M,K] LHS and [K,N] RHS")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    lead = ad.shape[:-2]
    m, k = ad.shape[-2], ad.shape[-1]
    a2 = ad.reshape(-1, k)
    out = (a2 @ bd).reshape(*lead, m, bd.shape[1])

    def bwd(g):
        g2 = g.reshape(-1, bd.shape[1])
        ga = (g2 @ bd.T).reshape(ad.shape)
        gb = a2.T @ g2
        return ga, gb

    return _out(out, (a, b), bwd)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Window gather for channels-last input, rows ready for GEMM."""
    b, c = xp.shape[0], xp.shape[3]
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(b, oh, ow, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3))
    return np.ascontiguousarray(win).reshape(b * oh * ow, kh * kw * c)


def _corr_nhwc(xp: np.ndarray, wflat: np.ndarray, kh, kw, stride, oh, ow):
    cols = _im2col_nhwc(xp, kh, kw, stride, oh, ow)
    out = cols @ wflat
    return cols, out.reshape(xp.shape[0], oh, ow, wflat.shape[1])


def conv2d_nhwc(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, channels last.

    x: [B,H,W,C], w: [kh,kw,C,F].  This is the layout the networks use; the
    channels-first ``conv2d`` wraps it.  Gradient to the input is computed as
    a stride-dilated transposed correlation, gradient to the kernel as one
    GEMM against the cached im2col matrix.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d_nhwc expects x [B,H,W,C] and w [kh,kw,C,F]")
    bsz, h, wd, c = x.shape
    kh, kw, cw, f = w.shape
    if cw != c:
        raise ShapeError(f"channel mismatch: input {c}, kernel {cw}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch {x.dtype} vs {w.dtype}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("kernel larger than padded input")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    wflat = w.data.reshape(kh * kw * c, f)
    cols, out = _corr_nhwc(xp, wflat, kh, kw, stride, oh, ow)

    need_x = x.node is not None
    need_w = w.node is not None

    def bwd(g):
        gmat = g.reshape(bsz * oh * ow, f)
        gw = (cols.T @ gmat).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            # transposed correlation: dilate g by the stride, pad by k-1,
            # correlate with the spatially flipped, channel-swapped kernel
            gd = g
            if stride > 1:
                gd = np.zeros((bsz, (oh - 1) * stride + 1, (ow - 1) * stride + 1, f),
                              dtype=g.dtype)
                gd[:, ::stride, ::stride, :] = g
            gdp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            wt = w.data[::-1, ::-1].transpose(0, 1, 3, 2)       # [kh,kw,F,C]
            _, gfull = _corr_nhwc(np.ascontiguousarray(gdp),
                                  np.ascontiguousarray(wt.reshape(kh * kw * f, c)),
                                  kh, kw, 1,
                                  gdp.shape[1] - kh + 1, gdp.shape[2] - kw + 1)
            # gfull covers padded rows [0, (oh-1)*stride+kh); the strided
            # remainder rows and the padding border receive zero gradient
            gxp = np.zeros((bsz, hp, wp, c), dtype=g.dtype)
            gxp[:, :gfull.shape[1], :gfull.shape[2], :] = gfull
            gx = gxp[:, padding:padding + h, padding:padding + wd, :]
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _out(out, (x, w), bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation. x: [B,C,H,W], w: [F,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x [B,C,H,W] and w [F,C,kh,kw]")
    xl = permute(x, (0, 2, 3, 1))
    wl = permute(w, (2, 3, 1, 0))
    return permute(conv2d_nhwc(xl, wl, stride=stride, padding=padding), (0, 3, 1, 2))


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of [B,H,W,C]."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2x expects [B,H,W,C]")
    b, h, w, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bwd(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _out(out, (x,), bwd)


# -- linear algebra factor ops ----------------------------------------------

def cholesky(s: Tensor) -> Tensor:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    if s.data.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError("cholesky expects a square matrix")
    try:
        lo = np.linalg.cholesky(s.data)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"cholesky failed: {exc}") from exc

    def bwd(g):
        # reverse-mode rule for S = L L^T (Murray 2016)
        p = np.tril(lo.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        linv = np.linalg.inv(lo)
        gs = linv.T @ p @ linv
        return ((gs + gs.T) * 0.5,)

    return _out(lo, (s,), bwd)


def inverse(a: Tensor) -> Tensor:
    """Matrix inverse with reverse-mode gradient -Y^T g Y^T."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("inverse expects a square matrix")
    try:
        y = np.linalg.inv(a.data)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"inverse failed: {exc}") from exc
    return _out(y, (a,), lambda g: (-(y.T @ g @ y.T),))


# -- backward sweep ----------------------------------------------------------

GradientMap = dict


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a tracked scalar.

    Returns {leaf tensor: gradient tensor} for every tracked leaf reachable
    from ``loss`` through the recorded graph.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward on an untracked tensor")

    # iterative post-order over tracked parents
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None and not t.node.leaf:
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node.leaf:
            leaves[id(t)] = t
            grads[id(t)] = g  # keep accumulated leaf gradient
            continue
        for parent, pg in zip(node.parents, node.bwd(g)):
            if parent.node is None or pg is None:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    return {t: Tensor(np.ascontiguousarray(grads[tid], dtype=loss.dtype).reshape(t.shape))
            for tid, t in leaves.items()}
