"""Dense 2-D raster primitives.

Grids are plain ``numpy`` arrays indexed ``[row, col]`` (``[y, x]``); binary
masks hold only 0/1 and level sets follow the convention ``phi > 0`` inside.
Pixel centres sit on integer coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * math.pi

SMOOTH_MAX_VARIANTS = ("exp-weighted-average", "log-sum-exp", "p-norm", "max")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    """Translation in pixels and a rotation (radians) about the window centre."""

    tx: float = 0.0
    ty: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kappa", float(self.kappa) % TWO_PI)

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.kappa], dtype=np.float64)

    def inverse(self) -> "AffineParams":
        # forward: y = R(k)(x - c) + c + t  =>  x = R(-k)(y - c - t) + c
        c, s = math.cos(self.kappa), math.sin(self.kappa)
        # R(-k) t
        itx = -(c * self.tx + s * self.ty)
        ity = -(-s * self.tx + c * self.ty)
        return AffineParams(itx, ity, -self.kappa)


@dataclass(frozen=True)
class SmoothParams:
    delta: float = 1.0
    gamma: float = 10.0
    variant: str = "log-sum-exp"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.variant not in SMOOTH_MAX_VARIANTS:
            raise ValueError(f"unknown smooth-max variant {self.variant!r}")


def as_mask(mask) -> np.ndarray:
    """Validate a binary mask and return it as a ``bool`` array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError("mask has zero size")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        arr = arr.astype(bool)
    return arr


def signed_distance(mask, clamp: float) -> np.ndarray:
    """Exact Euclidean signed distance between pixel centres.

    Inside pixels get the distance to the nearest outside pixel, outside
    pixels the negated distance to the nearest inside pixel, so a boundary
    pixel reads +1 or -1. Values are clamped to ``[-clamp, clamp]``.
    """
    m = as_mask(mask)
    if clamp <= 0:
        raise ValueError("clamp must be positive")
    if not m.any():
        return np.full(m.shape, -float(clamp))
    if m.all():
        return np.full(m.shape, float(clamp))
    inside = ndimage.distance_transform_edt(m)
    outside = ndimage.distance_transform_edt(~m)
    return np.clip(inside - outside, -clamp, clamp)


def smooth_heaviside(x, delta: float = 1.0):
    """Logistic step ``1 / (1 + exp(-x/delta))``."""
    z = np.asarray(x, dtype=np.float64) / delta
    # tanh form is stable for both signs
    out = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(out) if out.ndim == 0 else out


def smooth_heaviside_grad(x, delta: float = 1.0):
    h = smooth_heaviside(x, delta)
    out = h * (1.0 - h) / delta
    return out


def smooth_max_fields(stack: np.ndarray, gamma: float, variant: str = "log-sum-exp"):
    """Smooth maximum over axis 0 of ``stack`` and its partial derivatives.

    Returns ``(S, dS)`` where ``S`` has ``stack.shape[1:]`` and ``dS`` has the
    shape of ``stack``.
    """
    x = np.asarray(stack, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("smooth max of an empty sequence")
    if variant == "log-sum-exp":
        m = x.max(axis=0)
        e = np.exp(gamma * (x - m))
        z = e.sum(axis=0)
        s = m + np.log(z) / gamma
        return s, e / z
    if variant == "exp-weighted-average":
        m = x.max(axis=0)
        e = np.exp(gamma * (x - m))
        w = e / e.sum(axis=0)
        s = (w * x).sum(axis=0)
        return s, w * (1.0 + gamma * (x - s))
    if variant == "p-norm":
        if np.any(x < 0):
            raise ValueError("p-norm smooth max requires non-negative inputs")
        m = x.max(axis=0)
        safe = np.where(m > 0, m, 1.0)
        r = x / safe
        t = (r**gamma).sum(axis=0)
        s = np.where(m > 0, safe * t ** (1.0 / gamma), 0.0)
        grad = r ** (gamma - 1.0) * t ** (1.0 / gamma - 1.0)
        # all-zero columns: derivative left at 0
        grad = np.where(m > 0, grad, 0.0)
        return s, grad
    if variant == "max":
        # hard limit (gamma -> infinity); subgradient is one-hot on the first maximiser
        idx = np.argmax(x, axis=0)
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx[None], 1.0, axis=0)
        return x.max(axis=0), grad
    raise ValueError(f"unknown smooth-max variant {variant!r}")


def smooth_max(values: Sequence[float], params: SmoothParams) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("smooth max of an empty sequence")
    s, _ = smooth_max_fields(v, params.gamma, params.variant)
    return float(s)


def smooth_max_grad(values: Sequence[float], params: SmoothParams) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("smooth max of an empty sequence")
    _, g = smooth_max_fields(v, params.gamma, params.variant)
    return g


# ---------------------------------------------------------------------------
# bilinear sampling / affine warping


def _window_center(shape) -> tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def _bilinear(src: np.ndarray, u: np.ndarray, v: np.ndarray, fill: float):
    """Sample ``src`` at columns ``u`` and rows ``v``.

    Returns the values, the derivatives along ``u`` and ``v``, and the corner
    indices/weights needed to scatter gradients back into ``src``.
    """
    h, w = src.shape
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    x1 = x0 + 1
    y1 = y0 + 1

    def corner(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx = np.where(ok, yy * w + xx, 0)
        vals = np.where(ok, src.ravel()[idx], fill)
        return vals, ok, idx

    v00, ok00, i00 = corner(y0, x0)
    v01, ok01, i01 = corner(y0, x1)
    v10, ok10, i10 = corner(y1, x0)
    v11, ok11, i11 = corner(y1, x1)

    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    val = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    du = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dv = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    corners = ((i00, ok00, w00), (i01, ok01, w01), (i10, ok10, w10), (i11, ok11, w11))
    return val, du, dv, corners


def _scatter(corners, upstream: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size)
    for idx, ok, wt in corners:
        out += np.bincount(idx[ok], weights=(wt * upstream)[ok], minlength=size)
    return out


@dataclass
class WarpCache:
    """Everything :func:`warp_patch_backward` needs to replay a warp."""

    src_shape: tuple[int, int]
    rows: slice
    cols: slice
    u: np.ndarray
    v: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    corners: tuple
    kappa: float
    center_src: tuple[float, float]


def warp_patch(
    src: np.ndarray,
    out_shape: tuple[int, int],
    pivot: tuple[float, float],
    kappa: float,
    fill: float,
    rows: slice | None = None,
    cols: slice | None = None,
):
    """Sample ``src`` onto an output grid rotated by ``kappa`` about ``pivot``.

    The centre of ``src`` lands on the output coordinate ``pivot`` (x, y).
    Only the output sub-block ``[rows, cols]`` is evaluated; the returned
    patch has that block's shape.
    """
    src = np.asarray(src, dtype=np.float64)
    rows = rows if rows is not None else slice(0, out_shape[0])
    cols = cols if cols is not None else slice(0, out_shape[1])
    ys = np.arange(rows.start, rows.stop, dtype=np.float64)
    xs = np.arange(cols.start, cols.stop, dtype=np.float64)
    dx = xs[None, :] - pivot[0]
    dy = ys[:, None] - pivot[1]
    c, s = math.cos(kappa), math.sin(kappa)
    csx, csy = _window_center(src.shape)
    u = c * dx + s * dy + csx
    v = -s * dx + c * dy + csy
    val, du, dv, corners = _bilinear(src, u, v, fill)
    cache = WarpCache(src.shape, rows, cols, u, v, du, dv, corners, kappa, (csx, csy))
    return val, cache


def warp_patch_backward(cache: WarpCache, upstream: np.ndarray):
    """Gradients of ``sum(upstream * patch)`` w.r.t. src, pivot (x, y) and kappa."""
    g = np.asarray(upstream, dtype=np.float64)
    h, w = cache.src_shape
    grad_src = _scatter(cache.corners, g, h * w).reshape(h, w)
    gu = g * cache.du
    gv = g * cache.dv
    c, s = math.cos(cache.kappa), math.sin(cache.kappa)
    # u = c dx + s dy + csx, v = -s dx + c dy + csy, dx = x - px, dy = y - py
    d_px = float(np.sum(-c * gu + s * gv))
    d_py = float(np.sum(-s * gu - c * gv))
    csx, csy = cache.center_src
    d_kappa = float(np.sum(gu * (cache.v - csy) - gv * (cache.u - csx)))
    return grad_src, np.array([d_px, d_py]), d_kappa


def affine_warp(src, params: AffineParams, fill: float = 0.0) -> np.ndarray:
    """Warp ``src`` by ``params`` onto a grid of the same size.

    Output pixel ``x`` reads ``src`` bilinearly at ``R(-kappa)(x - t - c) + c``
    where ``c`` is the grid centre; samples outside ``src`` read ``fill``.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise DimensionError(f"expected a non-empty 2-D grid, got shape {src.shape}")
    csx, csy = _window_center(src.shape)
    val, _ = warp_patch(src, src.shape, (params.tx + csx, params.ty + csy), params.kappa, fill)
    return val


def warp_backward(src, params: AffineParams, upstream, fill: float = 0.0):
    """Exact gradient of ``sum(upstream * affine_warp(src, params))``.

    Returns ``(grad_src, grad_params)`` with ``grad_params = [d/dtx, d/dty, d/dkappa]``.
    """
    src = np.asarray(src, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != src.shape:
        raise DimensionError("upstream must match the warp output shape")
    csx, csy = _window_center(src.shape)
    _, cache = warp_patch(src, src.shape, (params.tx + csx, params.ty + csy), params.kappa, fill)
    grad_src, d_pivot, d_kappa = warp_patch_backward(cache, upstream)
    return grad_src, np.array([d_pivot[0], d_pivot[1], d_kappa])


def window_footprint(
    window_shape: tuple[int, int], pivot: tuple[float, float], out_shape: tuple[int, int]
) -> tuple[slice, slice]:
    """Output rows/cols that a window of ``window_shape`` can touch under any rotation."""
    reach = 0.5 * math.hypot(*window_shape) + 2.0
    r0 = max(0, int(math.floor(pivot[1] - reach)))
    r1 = min(out_shape[0], int(math.ceil(pivot[1] + reach)) + 1)
    c0 = max(0, int(math.floor(pivot[0] - reach)))
    c1 = min(out_shape[1], int(math.ceil(pivot[0] + reach)) + 1)
    return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


def extract_window(
    image: np.ndarray, center: tuple[float, float], kappa: float, size: int, fill: float = 0.0
) -> np.ndarray:
    """Inverse of placing a ``size``x``size`` window at ``center``: crop it back out.

    Window pixel ``w`` reads ``image`` at ``R(kappa)(w - c) + center``.
    """
    image = np.asarray(image, dtype=np.float64)
    cw = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - cw
    dy = ys - cw
    c, s = math.cos(kappa), math.sin(kappa)
    u = c * dx - s * dy + center[0]
    v = s * dx + c * dy + center[1]
    val, *_ = _bilinear(image, u, v, fill)
    return val


def mask_centroid(mask) -> tuple[float, float]:
    m = as_mask(mask)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise ValueError("centroid of an empty mask")
    return float(xs.mean()), float(ys.mean())


def lattice_margin(cache: WarpCache) -> float:
    """Smallest distance of any sample coordinate to the integer lattice.

    Bilinear sampling has kinks on the lattice; finite-difference checks are
    only meaningful when every coordinate moves by less than this margin.
    """
    fu = np.abs(cache.u - np.round(cache.u))
    fv = np.abs(cache.v - np.round(cache.v))
    return float(min(fu.min(initial=1.0), fv.min(initial=1.0)))
