"""Dense tensors with a recorded computation graph and reverse-mode gradients.

The distillation loop needs d(outer loss)/d(synthetic pixels) through a
chain of unrolled SGD steps, i.e. gradients of gradients.  One mechanism
covers both orders: ``grad(..., build_graph=True)`` records the backward
pass itself as new graph nodes, so its result can be differentiated again.
Every primitive's VJP is written in terms of the same primitives, which
keeps the rule set closed under differentiation.

Tensors are immutable once created (backing arrays are marked read-only);
optimizer-style updates build new tensors.  Elements are float32 by
default and float64 where oracle-grade precision is wanted.

``osum`` accumulates strictly in index order (unlike ``sum``, which uses
pairwise blocking), so reductions that must be reproducible against naive
reference loops get bit-identical results.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, GraphError, LabelError, NumericError

DEFAULT_DTYPE = np.float32

_RECORDING = True


class _recording:
    """Force graph recording on or off for a lexical region."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _RECORDING
        self.prev = _RECORDING
        _RECORDING = self.enabled

    def __exit__(self, *exc):
        global _RECORDING
        _RECORDING = self.prev


class Tensor:
    """Immutable n-d array node, optionally attached to the graph that
    produced it."""

    __slots__ = ("data", "requires_grad", "_inputs", "_vjp")

    __array_ufunc__ = None  # numpy must defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite elements")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._inputs = ()
        self._vjp = None

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """Read-only view of the backing array."""
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._inputs = ()
        out._vjp = None
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap a primitive result into a Tensor, recording provenance when the
    graph is live and any input participates in differentiation."""
    if not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    rg = _RECORDING and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    if not isinstance(data, np.ndarray):  # ufuncs on 0-d arrays yield scalars
        data = np.asarray(data)
    if data.base is None and data.flags.owndata:
        data.flags.writeable = False
    out.data = data
    out.requires_grad = rg
    out._inputs = inputs if rg else ()
    out._vjp = vjp if rg else None
    return out


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def constant(value, dtype=None) -> Tensor:
    """A graph-free tensor, handy for masks and hyperparameter scalars."""
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a cotangent back to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    if g.shape != shape:  # e.g. () vs (1,)
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _node(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _coerce(a, like=b if isinstance(b, Tensor) else None)
    b = _coerce(b, like=a)
    data = a.data / b.data

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), vjp)


def neg(x) -> Tensor:
    x = _coerce(x)
    data = -x.data

    def vjp(g):
        return (neg(g),)

    return _node(data, (x,), vjp)


def pow_scalar(x, p: float) -> Tensor:
    """x ** p for a Python-number exponent."""
    x = _coerce(x)
    p = float(p)
    data = x.data ** p

    def vjp(g):
        return (mul(g, mul(constant(p, dtype=x.dtype), pow_scalar(x, p - 1.0))),)

    return _node(data, (x,), vjp)


def sqrt(x) -> Tensor:
    return pow_scalar(x, 0.5)


def exp(x) -> Tensor:
    x = _coerce(x)
    data = np.exp(x.data)

    def vjp(g):
        return (mul(g, out),)

    out = _node(data, (x,), vjp)
    return out


def log(x) -> Tensor:
    x = _coerce(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def vjp(g):
        return (div(g, x),)

    return _node(data, (x,), vjp)


def relu(x) -> Tensor:
    x = _coerce(x)
    data = np.maximum(x.data, 0)
    mask = constant((x.data > 0).astype(x.data.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# shape and gather primitives
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    old = x.shape
    data = x.data.reshape(shape)

    def vjp(g):
        return (reshape(g, old),)

    return _node(data, (x,), vjp)


def transpose(x, axes) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def vjp(g):
        return (transpose(g, inv),)

    return _node(data, (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = _coerce(x)
    old = x.shape
    data = np.broadcast_to(x.data, shape)

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _node(data, (x,), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _coerce(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def vjp(g):
        if x.ndim == 0:
            return (reshape(g, ()),)
        if axis is None:
            gg = reshape(g, (1,) * x.ndim)
        elif keepdims:
            gg = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            shp = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
            gg = reshape(g, shp)
        return (broadcast_to(gg, x.shape),)

    return _node(data, (x,), vjp)


def osum(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum accumulated strictly in index order (row-major for axis=None).

    Matches what a plain ``for`` loop over the elements computes, bit for
    bit, which pairwise-blocked ``sum`` does not guarantee.
    """
    x = _coerce(x)
    if x.size == 0:
        raise DimensionError("osum of an empty tensor")
    if axis is None:
        data = np.asarray(np.cumsum(x.data.ravel())[-1])
        if keepdims:
            data = data.reshape((1,) * x.ndim)
    else:
        if not isinstance(axis, int):
            raise DimensionError("osum supports a single integer axis")
        ax = axis % x.ndim
        data = np.cumsum(x.data, axis=ax)
        data = np.take(data, [-1], axis=ax) if keepdims else np.take(data, -1, axis=ax)
        data = np.ascontiguousarray(data)

    def vjp(g):
        if x.ndim == 0:
            return (reshape(g, ()),)
        if axis is None:
            gg = reshape(g, (1,) * x.ndim)
        elif keepdims:
            gg = g
        else:
            ax = axis % x.ndim
            shp = tuple(1 if i == ax else s for i, s in enumerate(x.shape))
            gg = reshape(g, shp)
        return (broadcast_to(gg, x.shape),)

    return _node(data, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a % x.ndim]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def pad(x, pads) -> Tensor:
    """Zero-pad; ``pads`` is one (before, after) pair per axis."""
    x = _coerce(x)
    pads = tuple((int(b), int(a)) for b, a in pads)
    if len(pads) != x.ndim:
        raise DimensionError(f"pad expects {x.ndim} pairs, got {len(pads)}")
    data = np.pad(x.data, pads)
    starts = tuple(b for b, _ in pads)
    stops = tuple(b + s for (b, _), s in zip(pads, x.shape))

    def vjp(g):
        return (crop(g, starts, stops),)

    return _node(data, (x,), vjp)


def crop(x, starts, stops) -> Tensor:
    """Slice [start, stop) along every axis; adjoint of ``pad``."""
    x = _coerce(x)
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    if len(starts) != x.ndim or len(stops) != x.ndim:
        raise DimensionError("crop needs one (start, stop) per axis")
    for st, sp, dim in zip(starts, stops, x.shape):
        if not (0 <= st < sp <= dim):
            raise DimensionError(f"crop range [{st}, {sp}) invalid for axis of size {dim}")
    data = x.data[tuple(slice(st, sp) for st, sp in zip(starts, stops))]
    pads = tuple((st, dim - sp) for st, sp, dim in zip(starts, stops, x.shape))

    def vjp(g):
        return (pad(g, pads),)

    return _node(data, (x,), vjp)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows along an axis with a 1-D integer index array."""
    x = _coerce(x)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("take expects a 1-D integer index array")
    ax = axis % x.ndim
    dim = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= dim):
        raise DimensionError(f"take index out of range for axis of size {dim}")
    data = np.take(x.data, idx, axis=ax)
    shape = x.shape

    def vjp(g):
        return (scatter_add(g, idx, ax, shape),)

    return _node(data, (x,), vjp)


def scatter_add(x, indices, axis: int, shape) -> Tensor:
    """Accumulate slices of ``x`` into a zero tensor of ``shape``; the
    adjoint of ``take`` (repeated indices add)."""
    x = _coerce(x)
    idx = np.asarray(indices)
    shape = tuple(shape)
    ax = axis % len(shape)
    data = np.zeros(shape, dtype=x.dtype)
    np.add.at(data, (slice(None),) * ax + (idx,), x.data)

    def vjp(g):
        return (take(g, idx, ax),)

    return _node(data, (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    ax = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]

    def vjp(g):
        outs = []
        offset = 0
        for t, size in zip(tensors, sizes):
            starts = tuple(offset if i == ax else 0 for i in range(g.ndim))
            stops = tuple(
                offset + size if i == ax else s for i, s in enumerate(g.shape)
            )
            outs.append(crop(g, starts, stops))
            offset += size
        return tuple(outs)

    return _node(data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul is strictly 2-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _node(data, (a, b), vjp)


_CONV_IDX: dict = {}


def _conv_indices(h: int, w: int) -> np.ndarray:
    """Gather indices into a zero-padded (h+2, w+2) plane, flattened; nine
    taps per output pixel, row-major over output positions."""
    key = (h, w)
    if key not in _CONV_IDX:
        wp = w + 2
        rows = np.arange(h)[:, None, None, None]
        cols = np.arange(w)[None, :, None, None]
        dr = np.arange(3)[None, None, :, None]
        dc = np.arange(3)[None, None, None, :]
        _CONV_IDX[key] = ((rows + dr) * wp + (cols + dc)).reshape(-1).astype(np.int64)
    return _CONV_IDX[key]


def conv2d(x, kernel, padding: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1 ("same" spatial size).

    x: (N, C, H, W); kernel: (O, C, 3, 3) -> (N, O, H, W).  Built from
    pad/take/reshape/matmul so its backward (and double backward) come for
    free from the primitive VJPs.
    """
    x = _coerce(x)
    k = _coerce(kernel)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if (kh, kw) != (3, 3):
        raise DimensionError("conv2d supports 3x3 kernels only")
    if ck != c:
        raise DimensionError(f"kernel expects {ck} channels, input has {c}")
    if padding != 1:
        raise DimensionError("padding=1 (same) is the only supported mode")
    xp = pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    flat = reshape(xp, (n, c, (h + 2) * (w + 2)))
    patches = take(flat, _conv_indices(h, w), axis=2)  # (n, c, h*w*9)
    patches = reshape(patches, (n, c, h * w, 9))
    patches = transpose(patches, (0, 2, 1, 3))
    patches = reshape(patches, (n * h * w, c * 9))
    kmat = transpose(reshape(k, (o, c * 9)), (1, 0))
    y = matmul(patches, kmat)
    y = reshape(y, (n, h, w, o))
    return transpose(y, (0, 3, 1, 2))


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance.

    Affine scale/shift belongs to the model, not this op.
    """
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError("instance_norm expects (N, C, H, W)")
    if x.shape[2] * x.shape[3] < 2:
        raise DimensionError("instance_norm needs at least 2 elements per plane")
    mu = mean(x, axis=(2, 3), keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=(2, 3), keepdims=True)
    return mul(xc, pow_scalar(add(var, constant(eps, dtype=x.dtype)), -0.5))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the labeled class.

    logits: (N, C); labels: (N,) integer class ids.  The row max is
    subtracted as a detached constant: the value is algebraically
    unchanged and gradients of every order are unaffected, but the exp
    cannot overflow.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise DimensionError("logits must be (N, C)")
    n, c = logits.shape
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise LabelError("labels must be integers")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise LabelError(f"label outside [0, {c})")
    shift = constant(np.max(logits.data, axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(sum(exp(z), axis=1, keepdims=True))  # (n, 1)
    flat = reshape(z, (n * c,))
    picked = take(flat, np.arange(n, dtype=np.int64) * c + lab.astype(np.int64))
    losses = sub(reshape(lse, (n,)), picked)
    return mean(losses)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            stack.append((inp, False))
    return order


def grad(output: Tensor, inputs, build_graph: bool = False,
         allow_unreached: bool = False) -> list:
    """Gradients of a scalar ``output`` for each tensor in ``inputs``.

    With ``build_graph=True`` the backward pass is recorded, so returned
    gradients can be differentiated again.  An input the output does not
    depend on raises GraphError unless ``allow_unreached`` asks for an
    explicit zero (the stance a linear function's second derivative
    needs).
    """
    if not isinstance(output, Tensor):
        raise GraphError("grad output must be a Tensor")
    if output.size != 1:
        raise DimensionError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    topo = _topo(output)
    # only nodes on a path from a requested input to the output need work;
    # without this, differentiating an interior node (as every unroll step
    # does) would drag the whole upstream history through the vjps
    targets = {id(t) for t in inputs if t.requires_grad}
    relevant: set = set()
    for node in topo:  # topo order lists producers before consumers
        if id(node) in targets or any(id(i) in relevant for i in node._inputs):
            relevant.add(id(node))
    gmap: dict = {}
    gmap[id(output)] = constant(np.ones_like(output.data))
    with _recording(build_graph):
        for node in reversed(topo):
            g = gmap.get(id(node))
            if g is None or node._vjp is None:
                continue
            for inp, gi in zip(node._inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad or id(inp) not in relevant:
                    continue
                acc = gmap.get(id(inp))
                gmap[id(inp)] = gi if acc is None else add(acc, gi)
    results = []
    for t in inputs:
        g = gmap.get(id(t))
        if g is None:
            if allow_unreached:
                g = constant(np.zeros(t.shape, dtype=t.dtype))
            elif not t.requires_grad:
                raise GraphError("input does not require grad")
            else:
                raise GraphError("output is not connected to this input")
        results.append(g)
    return results
