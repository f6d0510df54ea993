"""Small vision models over a flat parameter vector.

Parameters live in one 1-D vector so trajectories are easy to store,
compare, and update; the forward pass slices differentiable views out of
that vector.  Slicing order (and therefore the vector layout) is fixed
per architecture and documented in ``layout``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, SpecError

ARCHS = ("convnet_d", "mlp", "lenet_like")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture id plus the knobs the builder honors.

    depth: conv blocks for convnet_d, hidden layers for mlp; lenet_like
    ignores depth and width (classic 6/16/120/84 sizes).
    """

    arch: str
    depth: int = 3
    width: int = 128
    input_shape: tuple = (3, 28, 28)
    classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise SpecError(f"unknown architecture {self.arch!r}, pick from {ARCHS}")
        if self.depth < 1:
            raise SpecError("depth must be >= 1")
        if self.width < 1:
            raise SpecError("width must be >= 1")
        if self.classes < 2:
            raise SpecError("need at least 2 classes")
        shape = tuple(int(s) for s in self.input_shape)
        if not shape or any(s < 1 for s in shape):
            raise SpecError(f"bad input shape {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        if self.arch in ("convnet_d", "lenet_like"):
            if len(shape) != 3:
                raise SpecError(f"{self.arch} needs a (C, H, W) input shape")
            halvings = self.depth if self.arch == "convnet_d" else 2
            if shape[1] >> halvings < 1 or shape[2] >> halvings < 1:
                raise SpecError(
                    f"input {shape} too small for {halvings} pooling stages"
                )


class _Param:
    __slots__ = ("name", "shape", "offset", "size", "init", "fan_in")

    def __init__(self, name, shape, offset, init, fan_in=0):
        self.name = name
        self.shape = tuple(shape)
        self.offset = offset
        self.size = int(np.prod(self.shape))
        self.init = init  # "uniform" | "ones" | "zeros"
        self.fan_in = fan_in


class Layout:
    """Ordered parameter table for one ModelSpec; offsets into the flat
    vector are cumulative in declaration order."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: list[_Param] = []
        self.size = 0
        builder = {"mlp": self._mlp, "convnet_d": self._convnet, "lenet_like": self._lenet}
        builder[spec.arch]()

    def _add(self, name, shape, init, fan_in=0):
        p = _Param(name, shape, self.size, init, fan_in)
        self.params.append(p)
        self.size += p.size
        return p

    def _linear(self, name, n_in, n_out):
        self._add(f"{name}.w", (n_out, n_in), "uniform", n_in)
        self._add(f"{name}.b", (n_out,), "uniform", n_in)

    def _conv(self, name, c_in, c_out):
        self._add(f"{name}.w", (c_out, c_in, 3, 3), "uniform", c_in * 9)
        self._add(f"{name}.b", (c_out,), "uniform", c_in * 9)

    def _mlp(self):
        spec = self.spec
        n_in = int(np.prod(spec.input_shape))
        dims = [n_in] + [spec.width] * spec.depth + [spec.classes]
        for i in range(len(dims) - 1):
            self._linear(f"fc{i}", dims[i], dims[i + 1])

    def _convnet(self):
        spec = self.spec
        c, h, w = spec.input_shape
        for i in range(spec.depth):
            c_in = c if i == 0 else spec.width
            self._conv(f"block{i}.conv", c_in, spec.width)
            self._add(f"block{i}.norm.gamma", (spec.width,), "ones")
            self._add(f"block{i}.norm.beta", (spec.width,), "zeros")
            h, w = h // 2, w // 2
        self._linear("head", spec.width * h * w, spec.classes)

    def _lenet(self):
        spec = self.spec
        c, h, w = spec.input_shape
        self._conv("conv0", c, 6)
        h, w = h // 2, w // 2
        self._conv("conv1", 6, 16)
        h, w = h // 2, w // 2
        self._linear("fc0", 16 * h * w, 120)
        self._linear("fc1", 120, 84)
        self._linear("fc2", 84, spec.classes)


_LAYOUTS: dict = {}


def layout(spec: ModelSpec) -> Layout:
    if spec not in _LAYOUTS:
        _LAYOUTS[spec] = Layout(spec)
    return _LAYOUTS[spec]


def param_count(spec: ModelSpec) -> int:
    return layout(spec).size


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> np.ndarray:
    """Flat parameter vector; weights and biases drawn uniform within
    +-1/sqrt(fan_in), norm scales at one, shifts at zero.  Draw order
    follows the layout, so a seed pins every bit."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lay = layout(spec)
    out = np.empty(lay.size, dtype=dtype)
    for p in lay.params:
        if p.init == "uniform":
            bound = 1.0 / math.sqrt(p.fan_in)
            vals = rng.uniform(-bound, bound, size=p.size)
        elif p.init == "ones":
            vals = np.ones(p.size)
        else:
            vals = np.zeros(p.size)
        out[p.offset:p.offset + p.size] = vals.astype(dtype)
    return out


def unflatten(spec: ModelSpec, vec: np.ndarray) -> list:
    """Shaped read-only views into a flat vector, in layout order."""
    lay = layout(spec)
    if vec.ndim != 1 or vec.size != lay.size:
        raise DimensionError(f"expected {lay.size} parameters, got shape {vec.shape}")
    views = []
    for p in lay.params:
        v = vec[p.offset:p.offset + p.size].reshape(p.shape)
        views.append(v)
    return views


def flatten(arrays) -> np.ndarray:
    """Concatenate shaped arrays back into one flat vector (bit-exact
    inverse of ``unflatten`` for matching shapes)."""
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def param_distance_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Squared L2 distance between two flat vectors, accumulated in strict
    index order in float64 so a naive reference loop reproduces it bit for
    bit."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"vectors must be 1-D and equal length: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.cumsum(d * d)[-1]) if d.size else 0.0


def _views(lay: Layout, theta: Tensor) -> dict:
    out = {}
    for p in lay.params:
        v = ad.crop(theta, (p.offset,), (p.offset + p.size,))
        out[p.name] = ad.reshape(v, p.shape) if p.shape != (p.size,) else v
    return out


def _avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h % 2 or w % 2:
        x = ad.crop(x, (0, 0, 0, 0), (n, c, 2 * h2, 2 * w2))
    x = ad.reshape(x, (n, c, h2, 2, w2, 2))
    return ad.mean(x, axis=(3, 5))


def apply(spec: ModelSpec, theta: Tensor, x: Tensor) -> Tensor:
    """Forward pass over a flat parameter tensor.

    Differentiable with respect to both ``theta`` and ``x``; that is what
    lets the outer loop push gradients through unrolled student updates
    into synthetic pixels.
    """
    lay = layout(spec)
    if theta.ndim != 1 or theta.size != lay.size:
        raise DimensionError(
            f"{spec.arch} expects {lay.size} parameters, got shape {theta.shape}"
        )
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise DimensionError(
            f"batch shape {x.shape} does not match input shape {spec.input_shape}"
        )
    v = _views(lay, theta)
    n = x.shape[0]
    if spec.arch == "mlp":
        h = ad.reshape(x, (n, int(np.prod(spec.input_shape))))
        for i in range(spec.depth + 1):
            h = ad.add(ad.matmul(h, ad.transpose(v[f"fc{i}.w"], (1, 0))), v[f"fc{i}.b"])
            if i < spec.depth:
                h = ad.relu(h)
        return h
    if spec.arch == "convnet_d":
        h = x
        for i in range(spec.depth):
            h = ad.conv2d(h, v[f"block{i}.conv.w"])
            h = ad.add(h, ad.reshape(v[f"block{i}.conv.b"], (1, spec.width, 1, 1)))
            h = ad.instance_norm(h)
            h = ad.mul(h, ad.reshape(v[f"block{i}.norm.gamma"], (1, spec.width, 1, 1)))
            h = ad.add(h, ad.reshape(v[f"block{i}.norm.beta"], (1, spec.width, 1, 1)))
            h = ad.relu(h)
            h = _avg_pool2(h)
        feat = h.shape[1] * h.shape[2] * h.shape[3]
        h = ad.reshape(h, (n, feat))
        return ad.add(ad.matmul(h, ad.transpose(v["head.w"], (1, 0))), v["head.b"])
    # lenet_like
    h = x
    for i, ch in enumerate((6, 16)):
        h = ad.conv2d(h, v[f"conv{i}.w"])
        h = ad.add(h, ad.reshape(v[f"conv{i}.b"], (1, ch, 1, 1)))
        h = ad.relu(h)
        h = _avg_pool2(h)
    feat = h.shape[1] * h.shape[2] * h.shape[3]
    h = ad.reshape(h, (n, feat))
    for i, last in ((0, False), (1, False), (2, True)):
        h = ad.add(ad.matmul(h, ad.transpose(v[f"fc{i}.w"], (1, 0))), v[f"fc{i}.b"])
        if not last:
            h = ad.relu(h)
    return h


class Model:
    """A spec plus one concrete flat parameter tensor."""

    def __init__(self, spec: ModelSpec, params: Tensor):
        lay = layout(spec)
        if params.size != lay.size:
            raise DimensionError(
                f"{spec.arch} expects {lay.size} parameters, got {params.size}"
            )
        self.spec = spec
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        return apply(self.spec, self.params, x)


def build(spec: ModelSpec, seed: int, dtype=np.float32,
          requires_grad: bool = False) -> Model:
    """Fresh model with seed-pinned fan-in uniform initialization."""
    vec = init_params(spec, seed, dtype)
    return Model(spec, Tensor(vec, requires_grad=requires_grad))
