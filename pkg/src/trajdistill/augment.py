"""Differentiable image augmentation for synthetic-data training.

Students and evaluation nets see augmented views of the learnable images,
so every transform here is built from gathers and arithmetic the autodiff
core can push pixel gradients through.  Geometric warps use bilinear
sampling with zero fill: four constant-weight gathers, linear in the
pixels.  One call applies one transform drawn uniformly from the policy's
enabled list; an empty list is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, PolicyError

TRANSFORMS = ("flip", "translate", "scale", "rotate", "brightness", "contrast", "cutout")


@dataclass(frozen=True)
class AugmentPolicy:
    """Enabled transforms, their ranges, and the parameter-sharing strategy.

    strategy "batch" draws one parameter set per call shared by every
    image; "individual" redraws per image.
    """

    transforms: tuple = ()
    strategy: str = "batch"
    flip_p: float = 0.5
    translate_frac: float = 0.25
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    rotate_deg: float = 15.0
    brightness: float = 0.3
    contrast: float = 0.5
    cutout_frac: float = 0.25
    seed: int = 0

    def __post_init__(self):
        names = tuple(self.transforms)
        object.__setattr__(self, "transforms", names)
        for t in names:
            if t not in TRANSFORMS:
                raise PolicyError(f"unknown transform {t!r}, pick from {TRANSFORMS}")
        if len(set(names)) != len(names):
            raise PolicyError("duplicate transform in policy")
        if not 0.0 <= self.flip_p <= 1.0:
            raise PolicyError("flip_p must be in [0, 1]")
        if not 0.0 <= self.translate_frac <= 1.0:
            raise PolicyError("translate_frac must be in [0, 1]")
        if self.scale_lo <= 0 or self.scale_hi < self.scale_lo:
            raise PolicyError("need 0 < scale_lo <= scale_hi")
        if self.rotate_deg < 0:
            raise PolicyError("rotate_deg must be >= 0")
        if self.brightness < 0:
            raise PolicyError("brightness must be >= 0")
        if not 0.0 <= self.contrast < 1.0:
            raise PolicyError("contrast must be in [0, 1)")
        if not 0.0 <= self.cutout_frac <= 1.0:
            raise PolicyError("cutout_frac must be in [0, 1]")
        if self.strategy not in ("batch", "individual"):
            raise PolicyError("strategy must be 'batch' or 'individual'")

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


# ---------------------------------------------------------------------------
# bilinear resampling (linear in the pixels; weights are constants)
# ---------------------------------------------------------------------------


def _bilinear(x: Tensor, src_r: np.ndarray, src_c: np.ndarray) -> Tensor:
    n, c, h, w = x.shape
    flat = ad.reshape(x, (n, c, h * w))
    out = None
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    for dr in (0, 1):
        for dc in (0, 1):
            ri = r0 + dr
            ci = c0 + dc
            wgt = (1.0 - np.abs(src_r - ri)) * (1.0 - np.abs(src_c - ci))
            wgt = wgt * ((ri >= 0) & (ri < h) & (ci >= 0) & (ci < w))
            idx = np.clip(ri, 0, h - 1) * w + np.clip(ci, 0, w - 1)
            term = ad.mul(ad.take(flat, idx, axis=2),
                          ad.constant(wgt.astype(x.dtype)))
            out = term if out is None else ad.add(out, term)
    return ad.reshape(out, (n, c, h, w))


def _affine(x: Tensor, mat: np.ndarray) -> Tensor:
    """Resample with the 2x3 map taking output (row, col) to source coords."""
    _, _, h, w = x.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_r = (mat[0, 0] * rr + mat[0, 1] * cc + mat[0, 2]).ravel()
    src_c = (mat[1, 0] * rr + mat[1, 1] * cc + mat[1, 2]).ravel()
    return _bilinear(x, src_r, src_c)


# ---------------------------------------------------------------------------
# transforms: sample parameters, then apply them
# ---------------------------------------------------------------------------


def _sample(name: str, policy: AugmentPolicy, shape, rng) -> dict:
    _, _, h, w = shape
    if name == "flip":
        return {"do": bool(rng.random() < policy.flip_p)}
    if name == "translate":
        return {"dr": float(rng.uniform(-policy.translate_frac * h,
                                        policy.translate_frac * h)),
                "dc": float(rng.uniform(-policy.translate_frac * w,
                                        policy.translate_frac * w))}
    if name == "scale":
        return {"s": float(rng.uniform(policy.scale_lo, policy.scale_hi))}
    if name == "rotate":
        return {"a": float(np.deg2rad(rng.uniform(-policy.rotate_deg,
                                                  policy.rotate_deg)))}
    if name == "brightness":
        return {"b": float(rng.uniform(-policy.brightness, policy.brightness))}
    if name == "contrast":
        return {"f": float(rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast))}
    # cutout: a zeroed square fully inside the frame
    sh = int(round(policy.cutout_frac * h))
    sw = int(round(policy.cutout_frac * w))
    return {"sh": sh, "sw": sw,
            "r0": int(rng.integers(0, h - sh + 1)) if sh < h else 0,
            "c0": int(rng.integers(0, w - sw + 1)) if sw < w else 0}


def _apply_one(name: str, x: Tensor, p: dict) -> Tensor:
    n, c, h, w = x.shape
    if name == "flip":
        if not p["do"]:
            return x
        idx = (np.arange(h)[:, None] * w + (w - 1 - np.arange(w))[None, :]).ravel()
        flat = ad.reshape(x, (n, c, h * w))
        return ad.reshape(ad.take(flat, idx.astype(np.int64), axis=2), (n, c, h, w))
    if name == "translate":
        mat = np.array([[1.0, 0.0, -p["dr"]], [0.0, 1.0, -p["dc"]]])
        return _affine(x, mat)
    if name == "scale":
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        inv = 1.0 / p["s"]
        mat = np.array([[inv, 0.0, cr - inv * cr], [0.0, inv, cc - inv * cc]])
        return _affine(x, mat)
    if name == "rotate":
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        cos, sin = np.cos(p["a"]), np.sin(p["a"])
        # inverse rotation about the image center
        mat = np.array([
            [cos, sin, cr - cos * cr - sin * cc],
            [-sin, cos, cc + sin * cr - cos * cc],
        ])
        return _affine(x, mat)
    if name == "brightness":
        return ad.add(x, ad.constant(np.full((), p["b"], dtype=x.dtype)))
    if name == "contrast":
        m = ad.mean(x, axis=(1, 2, 3), keepdims=True)
        return ad.add(ad.mul(ad.sub(x, m), ad.constant(np.full((), p["f"], dtype=x.dtype))), m)
    # cutout
    mask = np.ones((1, 1, h, w), dtype=x.dtype)
    mask[:, :, p["r0"]:p["r0"] + p["sh"], p["c0"]:p["c0"] + p["sw"]] = 0.0
    return ad.mul(x, ad.constant(mask))


def apply(policy: AugmentPolicy, batch: Tensor, rng: np.random.Generator) -> Tensor:
    """One randomly chosen transform from the policy, or the identity for
    an empty policy.  Identical rng state gives an identical result."""
    if batch.ndim != 4:
        raise DimensionError("augment expects a (N, C, H, W) batch")
    if not policy.transforms:
        return batch
    name = policy.transforms[int(rng.integers(len(policy.transforms)))]
    if policy.strategy == "batch":
        return _apply_one(name, batch, _sample(name, policy, batch.shape, rng))
    n = batch.shape[0]
    outs = []
    for i in range(n):
        row = ad.take(batch, np.array([i], dtype=np.int64), axis=0)
        outs.append(_apply_one(name, row, _sample(name, policy, batch.shape, rng)))
    return ad.concat(outs, axis=0)
