"""Segmentation by joint evolution of all shapes.

Shapes are initialised from the detections, all parameters are optimised
together with L-BFGS on the total energy, and the final soft fields are
turned into pairwise-disjoint instance masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lbfgs
from .decoder import DecoderWeights, decode
from .energy import (
    EnergyModels,
    EnergyWeights,
    OrientationModel,
    build_interaction_graph,
    composite_field,
    energy_and_grad,
    grads_to_vector,
    states_to_vector,
    vector_to_states,
)
from .grid import AffineParams, SmoothParams, affine_warp, extract_window, smooth_heaviside
from .scene import SceneInputs, ShapeState
from .shape_model import KpcaModel, encode


@dataclass(frozen=True)
class InitConfig:
    use_rotation_init: bool = False
    delta_kappa: float = math.pi / 12
    min_init_pixels: int = 10
    rot_prior_weight: float = 1.0
    rot_fit_weight: float = 1.0
    # grid values within this relative margin of the minimum count as ties
    rot_tie_tolerance: float = 1e-3

    def __post_init__(self):
        if not 0 < self.delta_kappa <= math.pi / 2:
            raise ValueError("delta_kappa must lie in (0, pi/2]")
        if self.min_init_pixels < 0:
            raise ValueError("min_init_pixels must be >= 0")


@dataclass(frozen=True)
class EvolveConfig:
    max_iterations: int = 500
    grad_tolerance: float = 1e-5
    lbfgs_memory: int = 10
    empty_shape_area_threshold: int = 10
    optimize_rotation: bool = False

    def __post_init__(self):
        if self.max_iterations < 0 or self.grad_tolerance <= 0 or self.lbfgs_memory < 1:
            raise ValueError("max_iterations >= 0, grad_tolerance > 0 and lbfgs_memory >= 1 required")
        if self.empty_shape_area_threshold < 0:
            raise ValueError("empty_shape_area_threshold must be >= 0")


@dataclass
class SegmentationResult:
    masks: list[np.ndarray]  # kept instances only, pairwise disjoint
    kept: list[int]  # state index of each mask
    pruned: list[bool]  # one flag per state
    states: list[ShapeState]
    trace: list[float] = field(default_factory=list)
    status: str = "converged"
    n_iter: int = 0


# ---- initialisation -----------------------------------------------------------------


def rotate_mask(mask, kappa: float) -> np.ndarray:
    """Rotate a binary window about its centre, re-binarised at 0.5."""
    return affine_warp(np.asarray(mask, dtype=np.float64), AffineParams(0.0, 0.0, kappa), 0.0) >= 0.5


def init_mask(inputs: SceneInputs, det_index: int) -> np.ndarray:
    """Bounding-box pixels whose dominant class is the detected one, as a window around the centre."""
    det = inputs.detections[det_index]
    h, w = inputs.image_dims
    ys, xs = np.mgrid[0:h, 0:w]
    x0, y0, x1, y1 = det.bbox
    inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    dominant = inputs.p_sem.argmax(axis=0) == det.class_id
    full = (inside & dominant).astype(np.float64)
    win = extract_window(full, det.center, 0.0, inputs.window_for(det.class_id), 0.0)
    return win >= 0.5


def rotation_energies(mask, kpca: KpcaModel, decoder: DecoderWeights, ori: OrientationModel,
                      cfg: InitConfig, delta: float = 1.0):
    """Grid angles ``k * delta_kappa`` over [0, 2 pi) and the rotation-search energy at each."""
    n = int(math.floor(2 * math.pi / cfg.delta_kappa + 1e-9))
    kappas = np.arange(n) * cfg.delta_kappa
    energies = np.empty(n)
    for i, k in enumerate(kappas):
        rot = rotate_mask(mask, k)
        if rot.any():
            h = smooth_heaviside(decode(decoder, encode(kpca, rot)), delta)
        else:
            h = smooth_heaviside(decode(decoder, np.zeros(kpca.c)), delta)
        h = np.clip(h, 1e-6, 1 - 1e-6)
        bce = -np.sum(rot * np.log(h) + (~rot) * np.log(1 - h))
        energies[i] = cfg.rot_fit_weight * bce - cfg.rot_prior_weight * ori.log_prob(float(k))[0]
    return kappas, energies


def init_rotation(mask, kpca: KpcaModel, decoder: DecoderWeights, ori: OrientationModel,
                  cfg: InitConfig, delta: float = 1.0) -> float:
    """Angle that rotates ``mask`` into the pose the shape model explains best.

    Returns the smallest grid angle whose energy is within the tie margin of
    the minimum. A mask showing the model's shape turned by ``+t`` yields
    about ``-t`` (mod 2 pi).
    """
    kappas, e = rotation_energies(mask, kpca, decoder, ori, cfg, delta)
    lo = e.min()
    tied = np.flatnonzero(e <= lo + cfg.rot_tie_tolerance * max(1.0, abs(lo)))
    return float(kappas[tied[0]])


def initialize_states(inputs: SceneInputs, kpca: KpcaModel, decoder: DecoderWeights, cfg: InitConfig = InitConfig(),
                      ori: OrientationModel = OrientationModel(), delta: float = 1.0) -> list[ShapeState]:
    """One state per detection: centre at the detection, code from the projected init mask."""
    states = []
    for i, det in enumerate(inputs.detections):
        m = init_mask(inputs, i)
        kappa = 0.0
        if m.sum() < cfg.min_init_pixels:
            alpha = np.zeros(kpca.c)
        else:
            if cfg.use_rotation_init:
                found = init_rotation(m, kpca, decoder, ori, cfg, delta)
                m = rotate_mask(m, found)
                kappa = (-found) % (2 * math.pi)
            alpha = encode(kpca, m) if m.any() else np.zeros(kpca.c)
        states.append(ShapeState(np.array(det.center, dtype=np.float64), kappa, alpha, det.class_id))
    return states


# ---- evolution -----------------------------------------------------------------------------


def _layout(states, optimize_rotation: bool, alpha_scale):
    """Free-parameter masks (all, codes only) and the diagonal scaling."""
    free, codes, scale = [], [], []
    for s in states:
        c = len(s.alpha)
        free += [True, True, optimize_rotation] + [True] * c
        codes += [False, False, False] + [True] * c
        a = np.ones(c) if alpha_scale is None else np.maximum(np.asarray(alpha_scale, dtype=np.float64), 1e-6)
        scale += [1.0, 1.0, 1.0] + list(a)
    return np.array(free, dtype=bool), np.array(codes, dtype=bool), np.array(scale)


def run_evolution(states, models: EnergyModels, inputs: SceneInputs, weights: EnergyWeights = EnergyWeights(),
                  smooth: SmoothParams = SmoothParams(), cfg: EvolveConfig = EvolveConfig(),
                  alpha_scale=None, callback=None) -> SegmentationResult:
    """Minimise the total energy over all shape parameters jointly.

    ``alpha_scale`` (per-component code spread, e.g. ``sqrt(lambda)``) sets the
    diagonal preconditioner; positions and angles are left in pixels and radians.
    Orientation is held fixed unless ``cfg.optimize_rotation`` is set.

    Bilinear placement makes the energy piecewise smooth in position, with
    kinks where samples cross the pixel lattice; with a fixed angle all
    samples cross together, so minima in position often sit on a kink where
    the line search cannot make progress. When that happens the run continues
    over the codes alone (pose frozen), then returns to the joint problem,
    until neither makes progress. Every phase starts from the best point so far,
    so the energy trace stays non-increasing.
    """
    states = [s.copy() for s in states]
    graph = build_interaction_graph(inputs.detections, models.loc, inputs.window_sizes)
    x = states_to_vector(states)
    free_all, free_codes, scale = _layout(states, cfg.optimize_rotation, alpha_scale)
    if not x.size:
        out = extract_instance_masks([], models, inputs, smooth, cfg)
        return out

    def make_fun(free, base):
        def fun(xf):
            xx = base.copy()
            xx[free] = xf
            r = energy_and_grad(vector_to_states(xx, states), models, inputs, weights, smooth, graph)
            return r.energy, grads_to_vector(r.grads)[free]
        return fun

    trace: list[float] = []
    n_iter = 0
    status = "max_iterations"
    phases = [free_all, free_codes]
    phase, stalled = 0, 0
    while True:
        free = phases[phase]
        budget = cfg.max_iterations - n_iter
        res = lbfgs.minimize(make_fun(free, x), x[free], scale[free], cfg.lbfgs_memory, cfg.grad_tolerance,
                             budget, callback=callback)
        x = x.copy()
        x[free] = res.x
        if trace:
            progress = trace[-1] - res.trace[-1]
            trace.extend(res.trace[1:])
        else:
            progress = np.inf
            trace.extend(res.trace)
        n_iter += res.n_iter
        if res.status == "converged" and phase == 0:
            status = "converged"
            break
        if n_iter >= cfg.max_iterations:
            status = "max_iterations"
            break
        # a stalled or converged sub-phase: try the other block set
        stalled = stalled + 1 if progress <= 1e-12 * max(1.0, abs(trace[-1])) or res.n_iter == 0 else 0
        if stalled >= 2:
            status = res.status
            break
        phase = 1 - phase
    final = vector_to_states(x, states)
    out = extract_instance_masks(final, models, inputs, smooth, cfg)
    out.trace, out.status, out.n_iter = trace, status, n_iter
    return out


def assign_pixels(fields, area_threshold: int):
    """Disjoint masks from soft fields.

    A pixel joins the shape with the largest ``h`` among those with ``h >= 0.5``
    (ties to the lower index). Shapes left with fewer than ``area_threshold``
    pixels are pruned and their pixels stay unassigned.
    """
    stack = np.asarray(fields, dtype=np.float64)
    n = stack.shape[0]
    if n == 0:
        return [], [], []
    cand = np.where(stack >= 0.5, stack, -np.inf)
    owner = np.argmax(cand, axis=0)
    any_cand = np.isfinite(cand.max(axis=0))
    masks, kept, pruned = [], [], []
    for i in range(n):
        m = any_cand & (owner == i)
        small = int(m.sum()) < area_threshold
        pruned.append(small)
        if not small:
            masks.append(m)
            kept.append(i)
    return masks, kept, pruned


def extract_instance_masks(states, models: EnergyModels, inputs: SceneInputs, smooth: SmoothParams,
                           cfg: EvolveConfig = EvolveConfig()) -> SegmentationResult:
    fields = composite_field(states, models.decoder, smooth, inputs.image_dims)
    masks, kept, pruned = assign_pixels(fields, cfg.empty_shape_area_threshold)
    return SegmentationResult(masks, kept, pruned, [s.copy() for s in states])


def segment(inputs: SceneInputs, kpca: KpcaModel, models: EnergyModels, weights: EnergyWeights = EnergyWeights(),
            smooth: SmoothParams = SmoothParams(), init_cfg: InitConfig = InitConfig(),
            evolve_cfg: EvolveConfig = EvolveConfig()) -> SegmentationResult:
    """Initialise from the detections, evolve and extract masks."""
    states = initialize_states(inputs, kpca, models.decoder, init_cfg, models.ori, smooth.delta)
    return run_evolution(states, models, inputs, weights, smooth, evolve_cfg, kpca.code_scale())
