"""Synthetic blob shapes and multi-instance scenes with known ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import mask_centroid, signed_distance
from .scene import Detection, SceneInputs


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlobParams:
    base_radius: float = 14.0
    n_harmonics: int = 4
    harmonic_amp: float = 0.3
    rng_seed: int = 0

    def validate(self, dims: tuple[int, int]) -> None:
        if not self.base_radius > 0:
            raise ValueError("base_radius must be positive")
        if not 0 <= self.harmonic_amp < 1:
            raise ValueError("harmonic_amp must be in [0, 1)")
        if self.n_harmonics < 0:
            raise ValueError("n_harmonics must be >= 0")
        if self.base_radius * (1 + self.harmonic_amp) > min(dims) / 2 - 1:
            raise ValueError("blob does not fit in the window")


def _blob_radius(params: BlobParams):
    """Radius function r(theta) with seeded harmonic perturbations."""
    rng = np.random.default_rng(params.rng_seed)
    n = params.n_harmonics
    u = rng.random(n)
    phases = rng.uniform(0, 2 * math.pi, n)
    amps = params.harmonic_amp * u / max(u.sum(), 1.0)
    orders = np.arange(2, n + 2)

    def radius(theta):
        pert = np.zeros_like(theta)
        for a, h, p in zip(amps, orders, phases):
            pert += a * np.cos(h * theta + p)
        return params.base_radius * (1.0 + pert)

    return radius


def _rasterize(radius, dims, cx, cy):
    h, w = dims
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    return np.hypot(dx, dy) <= radius(np.arctan2(dy, dx))


def gen_blob(params: BlobParams, dims) -> np.ndarray:
    """Star-shaped blob mask whose centroid sits on the window centre."""
    dims = (dims, dims) if np.isscalar(dims) else tuple(dims)
    params.validate(dims)
    radius = _blob_radius(params)
    tx, ty = (dims[1] - 1) / 2.0, (dims[0] - 1) / 2.0
    cx, cy = tx, ty
    mask = _rasterize(radius, dims, cx, cy)
    for _ in range(4):
        mx, my = mask_centroid(mask)
        if abs(mx - tx) < 0.05 and abs(my - ty) < 0.05:
            break
        cx += tx - mx
        cy += ty - my
        mask = _rasterize(radius, dims, cx, cy)
    return mask


def gen_shape_set(n: int, params: BlobParams, dims, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [gen_blob(replace(params, rng_seed=int(s)), dims) for s in seeds]


def gen_tapered_bar(dims, length: float, width_start: float, width_end: float, angle: float = 0.0) -> np.ndarray:
    """Bar whose width changes linearly along its axis, turned by ``angle``.

    At ``angle = 0`` the axis runs along +x with ``width_start`` at the left
    end. The area centroid sits on the window centre, and the turn matches
    the direction of :func:`contourfusion.grid.affine_warp`.
    """
    dims = (dims, dims) if np.isscalar(dims) else tuple(dims)
    if not (length > 0 and width_start > 0 and width_end > 0):
        raise ValueError("bar length and widths must be positive")
    a = 0.5 * (width_start + width_end)
    b = (width_end - width_start) / length
    shift = b * length**2 / (12.0 * a)  # centroid offset along the axis
    h, w = dims
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - (w - 1) / 2.0, ys - (h - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy + shift
    v = -s * dx + c * dy
    return (np.abs(u) <= length / 2) & (np.abs(v) <= 0.5 * (a + b * u))


@dataclass
class SceneTruth:
    gt_masks: list[np.ndarray]
    p_sem: np.ndarray  # (2, H, W): background, foreground
    detections: list[Detection]
    centroids: list[tuple[float, float]]

    def to_inputs(self, window: int) -> SceneInputs:
        return SceneInputs(self.p_sem, list(self.detections), {1: window})


def _paste(window: np.ndarray, offset: tuple[int, int], dims) -> np.ndarray:
    out = np.zeros(dims, dtype=bool)
    oy, ox = offset
    h, w = window.shape
    ys0, xs0 = max(0, oy), max(0, ox)
    ys1, xs1 = min(dims[0], oy + h), min(dims[1], ox + w)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0:ys1, xs0:xs1] = window[ys0 - oy: ys1 - oy, xs0 - ox: xs1 - ox]
    return out


def place_blobs(
    blobs: list[np.ndarray],
    radii: list[float],
    dims: tuple[int, int],
    overlap_target: float,
    rng: np.random.Generator,
    max_tries: int = 500,
) -> list[tuple[int, int]]:
    """Window offsets (row, col) so consecutive blobs touch with the requested overlap."""
    d = blobs[0].shape[0]
    h, w = dims
    for _ in range(max_tries):
        offsets: list[tuple[int, int]] = []
        centers: list[np.ndarray] = []
        ok = True
        for i, blob in enumerate(blobs):
            ys, xs = np.nonzero(blob)
            placed = False
            for _ in range(max_tries):
                if i == 0:
                    c = np.array([rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h])
                else:
                    j = int(rng.integers(0, i))
                    ang = rng.uniform(0, 2 * math.pi)
                    dist = (radii[i] + radii[j]) * (1.0 - overlap_target)
                    c = centers[j] + dist * np.array([math.cos(ang), math.sin(ang)])
                off = (int(round(c[1] - (d - 1) / 2)), int(round(c[0] - (d - 1) / 2)))
                if ys.min() + off[0] < 1 or ys.max() + off[0] > h - 2:
                    continue
                if xs.min() + off[1] < 1 or xs.max() + off[1] > w - 2:
                    continue
                cc = np.array([off[1] + (d - 1) / 2, off[0] + (d - 1) / 2])
                if any(np.linalg.norm(cc - centers[k]) < (radii[i] + radii[k]) * (1.0 - overlap_target) - 1.0
                       for k in range(i)):
                    continue
                offsets.append(off)
                centers.append(cc)
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return offsets
    raise GenerationError(f"could not place {len(blobs)} blobs in a {dims} image")


def gen_scene(
    n_shapes: int,
    blob: BlobParams,
    overlap_target: float = 0.1,
    noise_level: float = 0.1,
    jitter: float = 2.0,
    seed: int = 0,
    image_dims: tuple[int, int] = (128, 128),
    window: int = 64,
    p_range: tuple[float, float] = (0.02, 0.98),
) -> SceneTruth:
    """Place ``n_shapes`` blobs, resolve overlaps, and simulate the detector inputs."""
    if n_shapes < 1:
        raise ValueError("need at least one shape")
    rng = np.random.default_rng(seed)
    blob_seeds = rng.integers(0, 2**31 - 1, size=n_shapes)
    blobs = [gen_blob(replace(blob, rng_seed=int(s)), window) for s in blob_seeds]
    radii = [blob.base_radius] * n_shapes
    offsets = place_blobs(blobs, radii, image_dims, overlap_target, rng)

    placed = [_paste(b, off, image_dims) for b, off in zip(blobs, offsets)]
    big = float(max(image_dims))
    sd = np.stack([np.where(p, signed_distance(p, big), -np.inf) for p in placed])
    owner = np.argmax(sd, axis=0)
    union = np.any(np.stack(placed), axis=0)
    gt = [union & (owner == i) for i in range(n_shapes)]
    if any(not g.any() for g in gt):
        raise GenerationError("an instance vanished while resolving overlaps")

    fg = union.astype(np.float64)
    if noise_level > 0:
        fg = fg + rng.normal(0.0, noise_level, size=fg.shape)
    fg = np.clip(fg, *p_range)
    p_sem = np.stack([1.0 - fg, fg])

    dets, cents = [], []
    h, w = image_dims
    for g in gt:
        cx, cy = mask_centroid(g)
        cents.append((cx, cy))
        r = jitter * math.sqrt(rng.random())
        a = rng.uniform(0, 2 * math.pi)
        jx = float(np.clip(cx + r * math.cos(a), 0, w - 1))
        jy = float(np.clip(cy + r * math.sin(a), 0, h - 1))
        ys, xs = np.nonzero(g)
        bx, by = (xs.min() + xs.max()) / 2, (ys.min() + ys.max()) / 2
        hw, hh = 1.1 * (xs.max() - xs.min() + 1) / 2, 1.1 * (ys.max() - ys.min() + 1) / 2
        dets.append(Detection((jx, jy), (bx - hw, by - hh, bx + hw, by + hh), 1))
    return SceneTruth(gt, p_sem, dets, cents)
