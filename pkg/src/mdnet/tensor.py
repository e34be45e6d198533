"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations the feature-extraction network and
its training losses need. Arrays are numpy, row-major, float32 or float64.
Broadcasting is restricted to scalar-vs-tensor and same-shape; anything
fancier is a bug waiting to be audited.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Scalar = Union[int, float]


class TapeNode:
    """One recorded operation: parents plus the rule that maps the output
    gradient to parent gradients. Saved intermediates live in the closure."""

    __slots__ = ("op", "parents", "grad_fn")

    def __init__(self, op: str, parents: Tuple["Tensor", ...],
                 grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn


class GradSlice:
    """Sparse gradient contribution: add ``values`` at ``index`` of the parent
    gradient instead of materializing a full-size mostly-zero array."""

    __slots__ = ("index", "values")

    def __init__(self, index, values: np.ndarray):
        self.index = index
        self.values = values


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Data is immutable by convention once the tensor participates in a graph;
    only ``grad`` is mutated (accumulated) during backward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: Optional[TapeNode] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node = _node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from the tape: no gradient flows through."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are the only non-Tensor operands accepted
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _track(out_data: np.ndarray, op: str, parents: Tuple[Tensor, ...], grad_fn) -> Tensor:
    requires = any(p.requires_grad or p._node is not None for p in parents)
    node = TapeNode(op, parents, grad_fn) if requires else None
    return Tensor(out_data, requires_grad=requires, _node=node)


def _accumulate(t: Tensor, g) -> None:
    # grad rules hand over ownership of returned arrays (no aliased returns),
    # so the first contribution is adopted without a copy
    if g is None:
        return
    if isinstance(g, GradSlice):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad[g.index] += g.values
        return
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad += g


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # only same-shape or scalar-vs-tensor combinations are in contract
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: incompatible shapes {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # collapse a gradient onto a scalar-shaped operand
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _check_binary_shapes(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        ga = _reduce_to(g, a.data.shape)
        gb = _reduce_to(g, b.data.shape)
        if gb is ga:
            gb = ga.copy()  # each parent must own its contribution
        return ga, gb

    return _track(out, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _check_binary_shapes(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _track(out, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = _as_tensor(a, ref), _as_tensor(b, ref)
    _check_binary_shapes(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _track(out, "mul", (a, b), grad_fn)


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = ad * ad

    def grad_fn(g):
        return (g * (2.0 * ad),)

    return _track(out, "square", (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def grad_fn(g):
        return (g * mask,)

    return _track(out, "relu", (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic squash onto (0, 1); overflow-safe for large |x|."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * (out * (1.0 - out)),)

    return _track(out, "sigmoid", (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    shape = a.data.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _track(np.asarray(out), "sum", (a,), grad_fn)


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.mean(a.data, axis=axis)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def grad_fn(g):
        gg = g / count
        if axis is None:
            return (np.broadcast_to(gg, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(gg, axis), shape).copy(),)

    return _track(np.asarray(out), "mean", (a,), grad_fn)


def _check_window(x: np.ndarray, w: int) -> None:
    if w % 2 == 0 or w < 1:
        raise ValueError(f"pool window must be odd and positive, got {w}")
    h, wid = x.shape[-2:]
    if w > 2 * max(h, wid):
        raise ValueError(f"pool window {w} too large for map of shape {x.shape}")


def _box_window_counts(h: int, w: int, win: int) -> np.ndarray:
    r = win // 2
    rows = np.minimum(np.arange(h) + r, h - 1) - np.maximum(np.arange(h) - r, 0) + 1
    cols = np.minimum(np.arange(w) + r, w - 1) - np.maximum(np.arange(w) - r, 0) + 1
    return rows[:, None] * cols[None, :]


def _box_accumulate_sum(x: np.ndarray, win: int) -> np.ndarray:
    # Sum over the window clipped at borders. Accumulation walks the window
    # offsets in row-major order so results are bit-identical to a sequential
    # per-pixel summation of the same elements.
    r = win // 2
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    for di in range(-r, r + 1):
        i0, i1 = max(0, -di), min(h, h - di)
        if i0 >= i1:
            continue
        for dj in range(-r, r + 1):
            j0, j1 = max(0, -dj), min(w, w - dj)
            if j0 >= j1:
                continue
            out[..., i0:i1, j0:j1] += x[..., i0 + di:i1 + di, j0 + dj:j1 + dj]
    return out


def mean_pool_same(a: Tensor, win: int) -> Tensor:
    """Patchwise mean with stride 1; windows clipped at the borders."""
    _check_window(a.data, win)
    h, w = a.data.shape[-2:]
    counts = _box_window_counts(h, w, win).astype(a.data.dtype)
    out = _box_accumulate_sum(a.data, win) / counts

    def grad_fn(g):
        return (_box_accumulate_sum(g / counts, win),)

    return _track(out, "mean_pool", (a,), grad_fn)


def max_pool_same(a: Tensor, win: int) -> Tensor:
    """Patchwise max with stride 1; windows clipped at the borders.

    The backward pass routes the gradient to the first maximum in row-major
    window order, which makes tie handling deterministic. Computed in two
    separable passes (columns within rows first, then rows), which preserves
    exactly that tie order.
    """
    _check_window(a.data, win)
    x = a.data
    r = win // 2
    h, w = x.shape[-2:]

    hmax = np.full_like(x, -np.inf)
    hargj = np.zeros(x.shape, dtype=np.int32)
    for dj in range(-r, r + 1):
        j0, j1 = max(0, -dj), min(w, w - dj)
        if j0 >= j1:
            continue
        sl = (..., slice(j0, j1))
        cand = x[..., j0 + dj:j1 + dj]
        better = cand > hmax[sl]
        hmax[sl] = np.where(better, cand, hmax[sl])
        hargj[sl] = np.where(better, np.arange(j0 + dj, j1 + dj, dtype=np.int32), hargj[sl])

    out = np.full_like(x, -np.inf)
    arg_i = np.zeros(x.shape, dtype=np.int32)
    for di in range(-r, r + 1):
        i0, i1 = max(0, -di), min(h, h - di)
        if i0 >= i1:
            continue
        sl = (..., slice(i0, i1), slice(None))
        cand = hmax[..., i0 + di:i1 + di, :]
        better = cand > out[sl]
        out[sl] = np.where(better, cand, out[sl])
        rows = np.broadcast_to(np.arange(i0 + di, i1 + di, dtype=np.int32)[:, None],
                               cand.shape[-2:])
        arg_i[sl] = np.where(better, rows, arg_i[sl])
    arg_j = np.take_along_axis(hargj, arg_i.astype(np.intp), axis=-2)

    def grad_fn(g):
        gx = np.zeros_like(x)
        if x.ndim == 2:
            np.add.at(gx, (arg_i, arg_j), g)
        else:
            lead = np.broadcast_to(np.arange(x.shape[0])[:, None, None], x.shape)
            np.add.at(gx, (lead, arg_i, arg_j), g)
        return (gx,)

    return _track(out, "max_pool", (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Stack the k*k shifted slices of a padded (B,Cin,Hp,Wp) stack into a
    (k*k*Cin, B*Ho*Wo) matrix, kernel offsets in row-major order.

    The single-image case drops the batch axis before copying; numpy's copy
    iterator is measurably faster on the 5-d layout.
    """
    b, cin = xp.shape[:2]
    if k == 1:
        if b == 1:
            return xp.reshape(cin, ho * wo)
        return np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(cin, b * ho * wo)
    span = dilation * (k - 1) + 1
    if b == 1:
        view = sliding_window_view(xp[0], (span, span), axis=(1, 2))[..., ::dilation, ::dilation]
        return np.ascontiguousarray(view.transpose(3, 4, 0, 1, 2)).reshape(
            k * k * cin, ho * wo)
    view = sliding_window_view(xp, (span, span), axis=(2, 3))[..., ::dilation, ::dilation]
    # (B, Cin, Ho, Wo, k, k) -> rows ordered (u, v, cin), columns (b, i, j)
    return np.ascontiguousarray(view.transpose(4, 5, 1, 0, 2, 3)).reshape(
        k * k * cin, b * ho * wo)


def _conv2d_raw(x: np.ndarray, w: np.ndarray, dilation: int, padding: int) -> np.ndarray:
    """Batched dilated cross-correlation; x is (B,Cin,H,W)."""
    b, cin, h, wid = x.shape
    cout, cin_w, k, k2 = w.shape
    ho = h + 2 * padding - dilation * (k - 1)
    wo = wid + 2 * padding - dilation * (k - 1)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, dilation, ho, wo)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(cout, k * k * cin)
    out = (wmat @ cols).reshape(cout, b, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated cross-correlation with (Cout,Cin,k,k) weights.

    Accepts a single (Cin,H,W) image or a (B,Cin,H,W) stack. Same-size output
    when padding == dilation*(k-1)/2, which is how every backbone layer is
    configured.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim not in (3, 4) or wd.ndim != 4:
        raise ValueError(f"conv2d: expected 3-d/4-d input and 4-d weight, "
                         f"got {xd.shape} and {wd.shape}")
    batched = xd.ndim == 4
    xb = xd if batched else xd[None]
    cout, cin_w, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if xb.shape[1] != cin_w:
        raise ValueError(f"conv2d: input has {xb.shape[1]} channels, weight expects {cin_w}")
    if bd.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bd.shape} does not match {cout} output channels")
    if dilation < 1 or padding < 0 or padding > dilation * (k - 1):
        raise ValueError(f"conv2d: bad dilation/padding ({dilation}, {padding})")

    b, _, h, wid = xb.shape
    ho = h + 2 * padding - dilation * (k - 1)
    wo = wid + 2 * padding - dilation * (k - 1)
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, dilation, ho, wo)
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(cout, k * k * cin_w)
    out = np.ascontiguousarray((wmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    out += bd[None, :, None, None]
    if not batched:
        out = out[0]
    cols = None  # recomputed in backward; retaining it would defeat the allocator
    need_x = x.requires_grad or x._node is not None

    def grad_fn(g):
        gb4 = g if batched else g[None]
        gb_sum = gb4.sum(axis=(0, 2, 3))
        xp_ = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols_ = _im2col(xp_, k, dilation, ho, wo)
        gmat = np.ascontiguousarray(gb4.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gmat @ cols_.T).reshape(cout, k, k, cin_w).transpose(0, 3, 1, 2)
        gw = np.ascontiguousarray(gw)
        cols_ = None
        if need_x:
            # gradient wrt input is a convolution with the flipped, transposed
            # kernel; same-padding identities keep the geometry exact
            w_flip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv2d_raw(gb4, w_flip, dilation, dilation * (k - 1) - padding)
            if not batched:
                gx = gx[0]
        else:
            gx = None
        return gx, gw, gb_sum

    return _track(out, "conv2d", (x, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# normalization and gathers
# ---------------------------------------------------------------------------

def instance_norm_channels(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel map to zero mean and unit variance over its
    spatial extent (no learned affine). Accepts (C,H,W) or (B,C,H,W)."""
    x = a.data
    if x.ndim < 3:
        raise ValueError(f"instance_norm_channels: expected >= 3 dims, got {x.shape}")
    axes = (x.ndim - 2, x.ndim - 1)
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    scale = 1.0 / np.sqrt(var + eps)
    out = (x - mu) * scale

    def grad_fn(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gy_mean = (g * out).mean(axis=axes, keepdims=True)
        return (scale * (g - g_mean - out * gy_mean),)

    return _track(out, "instance_norm", (a,), grad_fn)


def l2_normalize_channels(a: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each pixel's channel column to unit L2 norm (eps-guarded).

    The channel axis is the third-from-last, covering both (C,H,W) volumes
    and (B,C,H,W) stacks.
    """
    x = a.data
    if x.ndim < 3:
        raise ValueError(f"l2_normalize_channels: expected >= 3 dims, got {x.shape}")
    axis = x.ndim - 3
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True) + eps)
    out = x / norm

    def grad_fn(g):
        dot = np.sum(g * x, axis=axis, keepdims=True)
        return (g / norm - x * (dot / (norm ** 3)),)

    return _track(out, "l2_normalize", (a,), grad_fn)


def gather_pixels(a: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Read values at integer pixel coordinates.

    (H,W) input yields a (K,) tensor; (C,H,W) input yields (K,C) rows.
    """
    x = a.data
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    if x.ndim == 2:
        out = x[ys, xs]

        def grad_fn(g):
            gx = np.zeros_like(x)
            np.add.at(gx, (ys, xs), g)
            return (gx,)

    elif x.ndim == 3:
        out = np.ascontiguousarray(x[:, ys, xs].T)

        def grad_fn(g):
            gx = np.zeros_like(x)
            np.add.at(gx.transpose(1, 2, 0), (ys, xs), g)
            return (gx,)

    else:
        raise ValueError(f"gather_pixels: expected 2-d or 3-d input, got {x.shape}")
    return _track(out, "gather_pixels", (a,), grad_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    x = a.data
    out = x[idx]

    def grad_fn(g):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return (gx,)

    return _track(out, "gather_rows", (a,), grad_fn)


def gather_bilinear(a: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Bilinear reads of a (H,W) map at real-valued coordinates.

    Coordinates are expected inside [0, W-1] x [0, H-1]; the caller masks.
    Gradient scatters the four corner weights back onto the map.
    """
    x = a.data
    if x.ndim != 2:
        raise ValueError(f"gather_bilinear: expected 2-d map, got {x.shape}")
    h, w = x.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = (ys - y0).astype(x.dtype)
    fx = (xs - x0).astype(x.dtype)
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * x[y0, x0] + w01 * x[y0, x1] + w10 * x[y1, x0] + w11 * x[y1, x1]

    def grad_fn(g):
        gx = np.zeros_like(x)
        np.add.at(gx, (y0, x0), g * w00)
        np.add.at(gx, (y0, x1), g * w01)
        np.add.at(gx, (y1, x0), g * w10)
        np.add.at(gx, (y1, x1), g * w11)
        return (gx,)

    return _track(out, "gather_bilinear", (a,), grad_fn)


def take_channel(a: Tensor, idx: int) -> Tensor:
    """Slice along the leading axis, keeping the gradient path sparse."""
    x = a.data
    out = x[idx]

    def grad_fn(g):
        return (GradSlice((idx,), g),)

    return _track(out, "take_channel", (a,), grad_fn)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls without zeroing accumulate, matching the usual
    mini-batch-accumulation semantics.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._node is None and not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        node = t._node
        if node is None or t.grad is None:
            continue
        grads = node.grad_fn(t.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and (parent.requires_grad or parent._node is not None):
                _accumulate(parent, g)
        t.grad = None  # free intermediate buffers; leaves keep theirs
