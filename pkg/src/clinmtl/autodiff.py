"""Dense-tensor reverse-mode autodiff with differentiable backward passes.

Every primitive expresses its vector-Jacobian product in terms of other
primitives, so gradients returned by :func:`grad` with ``create_graph=True``
are themselves graph nodes and can be differentiated again (double backprop,
Hessian-vector products). All data is float64; graphs are tape-style and
rebuilt per use.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(AutodiffError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class NotScalarError(AutodiffError):
    pass


class UnreachableGradientError(AutodiffError):
    pass


class Tensor:
    """N-d float64 array, optionally a node in an implicit computation graph.

    ``parents`` / ``vjp`` are set by ops; leaves created by the user have
    neither. ``unreachable`` is set on zero gradients returned by
    :func:`grad` for targets not reachable from the loss.
    """

    __slots__ = ("data", "parents", "vjp", "op", "requires_grad", "unreachable")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple = ()
        self.vjp = None
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.unreachable = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # convenience arithmetic; module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)


def ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (ops become constants)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _node(op: str, data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.parents = parents
        out.vjp = vjp
        out.op = op
        out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra:
        g = sum_axes(g, tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if a != b and b == 1)
    if axes:
        g = sum_axes(g, axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError("sum_to", g.shape, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives


def add(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _node("add", data, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _node("sub", data, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = ensure(a)
    return _node("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _node(
        "mul", data, (a, b), lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape))
    )


def div(a, b, guard: float = 0.0) -> Tensor:
    """a / (b + guard) with a caller-supplied additive guard."""
    a, b = ensure(a), ensure(b)
    try:
        data = a.data / (b.data + guard)
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def vjp(g):
        ga = div(g, b, guard)
        gb = neg(mul(ga, div(a, b, guard)))
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return _node("div", data, (a, b), vjp)


def square(a) -> Tensor:
    a = ensure(a)
    return mul(a, a)


def sqrt(a) -> Tensor:
    a = ensure(a)
    data = np.sqrt(a.data)
    holder = []

    def vjp(g):
        return (div(g, mul(holder[0], 2.0)),)

    out = _node("sqrt", data, (a,), vjp)
    holder.append(out)
    return out


def absval(a) -> Tensor:
    a = ensure(a)
    sign = np.sign(a.data)
    return _node("abs", np.abs(a.data), (a,), lambda g: (mul(g, Tensor(sign)),))


def exp(a) -> Tensor:
    a = ensure(a)
    data = np.exp(a.data)
    holder = []

    def vjp(g):
        return (mul(g, holder[0]),)

    out = _node("exp", data, (a,), vjp)
    holder.append(out)
    return out


def log(a, guard: float = 0.0) -> Tensor:
    a = ensure(a)
    return _node("log", np.log(a.data + guard), (a,), lambda g: (div(g, a, guard),))


def relu(a) -> Tensor:
    a = ensure(a)
    mask = (a.data > 0).astype(np.float64)
    return _node("relu", a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def sigmoid(a) -> Tensor:
    a = ensure(a)
    # numerically stable split by sign
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                    np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    holder = []

    def vjp(g):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _node("sigmoid", data, (a,), vjp)
    holder.append(out)
    return out


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape) -> Tensor:
    a = ensure(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node("reshape", data, (a,), lambda g: (reshape(g, a.shape),))


def flatten(a, start_axis: int = 1) -> Tensor:
    a = ensure(a)
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a, axes=None) -> Tensor:
    a = ensure(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [ensure(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(narrow(g, axis, int(offsets[i]), sizes[i]) for i in range(len(ts)))

    return _node("concat", data, tuple(ts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = ensure(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    data = a.data[tuple(idx)]

    def vjp(g):
        return (pad_insert(g, axis, start, a.shape[axis]),)

    return _node("narrow", data, (a,), vjp)


def pad_insert(a, axis: int, start: int, total: int) -> Tensor:
    """Embed ``a`` into zeros along ``axis`` so the axis has extent ``total``."""
    a = ensure(a)
    shape = list(a.shape)
    length = shape[axis]
    shape[axis] = total
    data = np.zeros(shape)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    data[tuple(idx)] = a.data

    def vjp(g):
        return (narrow(g, axis, start, length),)

    return _node("pad_insert", data, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_axes(a, axes, keepdims: bool = False) -> Tensor:
    a = ensure(a)
    axes = tuple(axes)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kd_shape = tuple(1 if i in {ax % a.data.ndim for ax in axes} else s
                     for i, s in enumerate(a.shape))

    def vjp(g):
        gk = g if keepdims else reshape(g, kd_shape)
        return (mul(gk, Tensor(np.ones(a.shape))),)

    return _node("sum_axes", data, (a,), vjp)


def tsum(a) -> Tensor:
    """Full reduction to a scalar."""
    a = ensure(a)
    if a.data.ndim == 0:
        return a
    return sum_axes(a, tuple(range(a.data.ndim)))


def mean(a) -> Tensor:
    a = ensure(a)
    return mul(tsum(a), 1.0 / a.size)


def mean_axes(a, axes, keepdims: bool = False) -> Tensor:
    a = ensure(a)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_axes(a, axes, keepdims=keepdims), 1.0 / n)


def sum_per_sample(a) -> Tensor:
    """Sum over all axes except the leading batch axis."""
    a = ensure(a)
    return sum_axes(a, tuple(range(1, a.data.ndim)))


def norm(a) -> Tensor:
    """Global L2 norm (scalar)."""
    return sqrt(tsum(square(ensure(a))))


def norm_per_sample(a) -> Tensor:
    """Per-sample L2 norm over all non-batch axes, shape (B,)."""
    return sqrt(sum_per_sample(square(ensure(a))))


# ---------------------------------------------------------------------------
# linear algebra / softmax


def matmul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node("matmul", data, (a, b), vjp)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = ensure(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = sub(a, shift)
    lse = log(sum_axes(exp(s), (axis,), keepdims=True))
    return sub(s, lse)


# ---------------------------------------------------------------------------
# convolution / resampling


def _conv_geometry(xshape, k: int, stride: int, pad: int):
    B, C, H, W = xshape
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", xshape, (k, k))
    return B, C, H, W, ho, wo


def _im2col_data(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W, ho, wo = _conv_geometry(x.shape, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, k, k, B, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] \
                .transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * ho * wo)


def _col2im_data(cols: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W, ho, wo = _conv_geometry(xshape, k, stride, pad)
    c6 = cols.reshape(C, k, k, B, ho, wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                c6[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + H, pad:pad + W] if pad else xp


def im2col(x, k: int, stride: int, pad: int) -> Tensor:
    x = ensure(x)
    if x.data.ndim != 4:
        raise ShapeError("im2col", x.shape)
    xshape = x.shape
    data = _im2col_data(x.data, k, stride, pad)

    def vjp(g):
        return (col2im(g, xshape, k, stride, pad),)

    return _node("im2col", data, (x,), vjp)


def col2im(cols, xshape, k: int, stride: int, pad: int) -> Tensor:
    cols = ensure(cols)
    data = _col2im_data(cols.data, xshape, k, stride, pad)

    def vjp(g):
        return (im2col(g, k, stride, pad),)

    return _node("col2im", data, (cols,), vjp)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIHW weight.

    Composed from im2col + matmul, so double backward works without a
    dedicated backward rule. Kernel extents must be odd.
    """
    x, w = ensure(x), ensure(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", w.shape, "odd square kernel required")
    if cin != x.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, _, _, _, ho, wo = _conv_geometry(x.shape, kh, stride, pad)
    cols = im2col(x, kh, stride, pad)                      # (C*k*k, B*ho*wo)
    w2 = reshape(w, (cout, cin * kh * kw))
    out2 = matmul(w2, cols)                                # (cout, B*ho*wo)
    out = transpose(reshape(out2, (cout, B, ho, wo)), (1, 0, 2, 3))
    if b is not None:
        b = ensure(b)
        out = add(out, reshape(b, (1, cout, 1, 1)))
    return out


def upsample_nn(x, factor: int) -> Tensor:
    """Nearest-neighbour spatial upsampling of an NCHW tensor."""
    x = ensure(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample_nn", x.shape)
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def vjp(g):
        return (downsample_sum(g, factor),)

    return _node("upsample_nn", data, (x,), vjp)


def downsample_sum(x, factor: int) -> Tensor:
    """Sum-pooling over non-overlapping factor x factor windows."""
    x = ensure(x)
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError("downsample_sum", x.shape, (factor,))
    data = x.data.reshape(B, C, H // factor, factor, W // factor, factor).sum(axis=(3, 5))

    def vjp(g):
        return (upsample_nn(g, factor),)

    return _node("downsample_sum", data, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    """NCHW -> (B, C) spatial mean."""
    x = ensure(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    return mean_axes(x, (2, 3))


# ---------------------------------------------------------------------------
# differentiation


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
         on_unreachable: str = "flag") -> list[Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    With ``create_graph`` the returned tensors are graph nodes and may be
    differentiated again; without it they are detached constants. Targets
    not reachable from the loss yield a zero tensor with ``unreachable``
    set (and a warning), or raise when ``on_unreachable="raise"``.
    """
    if loss.data.shape != ():
        raise NotScalarError(f"loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # gradient flows from a node into a parent only if that parent can in
    # turn reach a requested target; everything else is skipped
    wrt_ids = {id(w) for w in wrt}
    needed: set[int] = set()
    for node in topo:  # parents precede children
        if id(node) in wrt_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    ctx = no_grad() if not create_graph else _NullCtx()
    grads: dict[int, Tensor] = {id(loss): Tensor(1.0)}
    with ctx:
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            if not any(p.requires_grad and id(p) in needed for p in node.parents):
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not p.requires_grad or id(p) not in needed:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"vjp of {node.op}", pg.shape, p.shape)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    results = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            if on_unreachable == "raise":
                raise UnreachableGradientError(
                    "gradient target is not reachable from the loss")
            warnings.warn("gradient target unreachable from loss; returning zero",
                          RuntimeWarning, stacklevel=2)
            z = Tensor(np.zeros(w.shape))
            z.unreachable = True
            results.append(z)
            continue
        results.append(g if create_graph else g.detach())
    return results


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient of ``f`` and central differences."""
    xt = Tensor(x.data.copy(), requires_grad=True)
    analytic = grad(f(xt), [xt])[0].data

    flat = x.data.reshape(-1).copy()
    worst = 0.0
    for i in range(flat.size):
        # probe points need grad-enabled tensors: f may differentiate internally
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(flat.reshape(x.shape), requires_grad=True)).item()
        flat[i] = orig - h
        fm = f(Tensor(flat.reshape(x.shape), requires_grad=True)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff_check")
        cd = (fp - fm) / (2 * h)
        err = abs(analytic.reshape(-1)[i] - cd) / (abs(cd) + 1e-12)
        worst = max(worst, err)
    return worst
