"""Total scene energy over all evolving shapes and its exact gradient.

Each shape ``i`` contributes a soft indicator ``h_i`` in image coordinates:
its decoded level set goes through the smooth Heaviside and is then rotated
by ``kappa_i`` and placed with its window centre on ``center_i`` (zero
outside the window). The energy is the image data term plus priors on code,
position and orientation plus a pairwise overlap penalty along the edges of
the interaction graph.

All integrals are pixel sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import i0e

from .decoder import DecoderWeights, decode_batch_backward, decode_batch_with_cache
from .grid import SmoothParams, smooth_heaviside, smooth_max_fields, warp_patch, warp_patch_backward, window_footprint
from .scene import SceneInputs, ShapeState
from .shape_model import KdePrior, kde_log_prior

P_CLAMP = 1e-6


@dataclass(frozen=True)
class EnergyWeights:
    gamma_shp: float = 1.0
    gamma_loc: float = 0.1
    gamma_ori: float = 0.0
    gamma_ovp: float = 5.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    def scaled(self, factor: float) -> "EnergyWeights":
        return EnergyWeights(*(factor * v for v in self.__dict__.values()))


@dataclass(frozen=True)
class LocationModel:
    """Isotropic Gaussian around each detector centre (normalising constant dropped)."""

    sigma_loc: float = 4.0

    def __post_init__(self):
        if not self.sigma_loc > 0:
            raise ValueError("sigma_loc must be positive")

    @property
    def reach(self) -> float:
        return 3.0 * self.sigma_loc

    def log_prob(self, center, anchor):
        d = np.asarray(center, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)
        s2 = self.sigma_loc**2
        return -float(d @ d) / (2.0 * s2), -d / s2


@dataclass(frozen=True)
class OrientationModel:
    kind: str = "uniform"
    mu: float = 0.0
    concentration: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "von-mises"):
            raise ValueError(f"unknown orientation model {self.kind!r}")
        if not self.concentration >= 0:
            raise ValueError("concentration must be >= 0")

    def log_prob(self, kappa: float):
        if self.kind == "uniform":
            return -math.log(2 * math.pi), 0.0
        k = self.concentration
        # log I0(k) = log(i0e(k)) + k keeps large concentrations finite
        norm = math.log(2 * math.pi) + math.log(i0e(k)) + k
        return k * math.cos(kappa - self.mu) - norm, -k * math.sin(kappa - self.mu)


@dataclass
class InteractionGraph:
    edges: list[tuple[int, int]]
    rects: list[tuple[float, float, float, float]]  # (x0, y0, x1, y1)

    def neighbours(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})


def build_interaction_graph(detections, loc: LocationModel, window_sizes) -> InteractionGraph:
    """Edge ``(i, j)`` iff the windows around the two detections, each dilated
    by the location reach, intersect (touching counts)."""
    rects = []
    for d in detections:
        half = window_sizes[d.class_id] / 2.0 + loc.reach
        x, y = d.center
        rects.append((x - half, y - half, x + half, y + half))
    edges = []
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            a, b = rects[i], rects[j]
            if a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]:
                edges.append((i, j))
    return InteractionGraph(edges, rects)


@dataclass
class EnergyModels:
    decoder: DecoderWeights
    prior: KdePrior
    loc: LocationModel = field(default_factory=LocationModel)
    ori: OrientationModel = field(default_factory=OrientationModel)


@dataclass
class ShapeGrad:
    center: np.ndarray  # (d/dx, d/dy)
    kappa: float
    alpha: np.ndarray


# ---- per-shape fields --------------------------------------------------------


@dataclass
class _Fields:
    stack: np.ndarray  # (n, H, W) dense h_i
    hprime: np.ndarray  # (n, D, D) dH/dphi
    warps: list
    decoder_cache: object


def _place_fields(states, decoder: DecoderWeights, smooth: SmoothParams, image_dims) -> _Fields:
    n = len(states)
    h, w = image_dims
    stack = np.zeros((n, h, w))
    if n == 0:
        return _Fields(stack, np.zeros((0,) + decoder.out_dims), [], None)
    alphas = np.stack([np.asarray(s.alpha, dtype=np.float64) for s in states])
    phis, dcache = decode_batch_with_cache(decoder, alphas)
    hw = smooth_heaviside(phis, smooth.delta)
    hprime = hw * (1.0 - hw) / smooth.delta
    warps = []
    for i, s in enumerate(states):
        pivot = (float(s.center[0]), float(s.center[1]))
        rows, cols = window_footprint(hw[i].shape, pivot, image_dims)
        patch, cache = warp_patch(hw[i], image_dims, pivot, float(s.kappa), 0.0, rows, cols)
        stack[i, rows, cols] = patch
        warps.append(cache)
    return _Fields(stack, hprime, warps, dcache)


def composite_field(states, decoder: DecoderWeights, smooth: SmoothParams, image_dims) -> list[np.ndarray]:
    """Per-shape soft indicators ``h_i`` in image coordinates (cropped at the image edge)."""
    return list(_place_fields(states, decoder, smooth, image_dims).stack)


# ---- image terms ------------------------------------------------------------------


def _clamped_log(p):
    return np.log(np.clip(p, P_CLAMP, 1.0 - P_CLAMP))


def _single_class(stack, p_fg, smooth: SmoothParams):
    log_p, log_q = _clamped_log(p_fg), _clamped_log(1.0 - p_fg)
    if stack.shape[0] == 0:
        return float(-np.sum(log_q)), stack.copy()
    s, ds = smooth_max_fields(stack, smooth.gamma, smooth.variant)
    e = -np.sum(s * log_p + (1.0 - s) * log_q)
    dE_dS = -(log_p - log_q)
    return float(e), ds * dE_dS


def image_energy_single_class(h_fields, p_fg, smooth: SmoothParams) -> float:
    """Binary cross-entropy between the smooth union of the fields and ``p_fg``."""
    stack = np.asarray(h_fields, dtype=np.float64).reshape((-1,) + np.shape(p_fg))
    return _single_class(stack, np.asarray(p_fg, dtype=np.float64), smooth)[0]


def class_memberships(stack, class_ids, n_classes: int, smooth: SmoothParams):
    """Per-class membership ``S^c`` (index 0 is background) and the pieces for backprop.

    ``S^c`` is the smooth max over shapes of class ``c`` (0 if it has none) and
    ``S^0 = 1 - smooth max over all shapes`` (1 with no shapes).
    """
    shape = stack.shape[1:]
    S = np.zeros((n_classes,) + shape)
    parts = {}
    class_ids = np.asarray(class_ids, dtype=int)
    for c in range(1, n_classes):
        idx = np.flatnonzero(class_ids == c)
        if idx.size:
            S[c], d = smooth_max_fields(stack[idx], smooth.gamma, smooth.variant)
            parts[c] = (idx, d)
    if stack.shape[0]:
        s_all, d_all = smooth_max_fields(stack, smooth.gamma, smooth.variant)
        S[0] = 1.0 - s_all
        parts[0] = (np.arange(stack.shape[0]), -d_all)
    else:
        S[0] = 1.0
    return S, parts


def _multi_class(stack, class_ids, p_sem, smooth: SmoothParams):
    S, parts = class_memberships(stack, class_ids, p_sem.shape[0], smooth)
    logs = _clamped_log(p_sem)
    z = S.sum(axis=0)
    pt = S / z
    e = -np.sum(pt * logs)
    # dE/dS^c = -(log P^c - sum_k pt^k log P^k) / z
    mean_log = (pt * logs).sum(axis=0)
    dS = -(logs - mean_log) / z
    grad = np.zeros_like(stack)
    for c, (idx, d) in parts.items():
        grad[idx] += d * dS[c]
    return float(e), grad


def image_energy_multi_class(h_fields, class_ids, p_sem, smooth: SmoothParams) -> float:
    """Cross-entropy between normalised class memberships and ``p_sem`` (background first)."""
    p_sem = np.asarray(p_sem, dtype=np.float64)
    stack = np.asarray(h_fields, dtype=np.float64).reshape((-1,) + p_sem.shape[1:])
    return _multi_class(stack, class_ids, p_sem, smooth)[0]


# ---- priors -------------------------------------------------------------------------


def _prior(states, prior: KdePrior, loc, ori, graph, stack, weights: EnergyWeights, anchors):
    n = len(states)
    terms = {"shape": 0.0, "location": 0.0, "orientation": 0.0, "overlap": 0.0}
    g_alpha = [np.zeros(len(s.alpha)) for s in states]
    g_center = [np.zeros(2) for _ in states]
    g_kappa = [0.0] * n
    g_stack = np.zeros_like(stack)
    for i, s in enumerate(states):
        if weights.gamma_shp:
            v, g = kde_log_prior(prior, s.alpha)
            terms["shape"] -= weights.gamma_shp * v
            g_alpha[i] = -weights.gamma_shp * g
        if weights.gamma_loc:
            v, g = loc.log_prob(s.center, anchors[i])
            terms["location"] -= weights.gamma_loc * v
            g_center[i] = -weights.gamma_loc * g
        if weights.gamma_ori:
            v, g = ori.log_prob(float(s.kappa))
            terms["orientation"] -= weights.gamma_ori * v
            g_kappa[i] = -weights.gamma_ori * g
    if weights.gamma_ovp:
        for a, b in graph.edges:
            terms["overlap"] += weights.gamma_ovp * float(np.sum(stack[a] * stack[b]))
            g_stack[a] += weights.gamma_ovp * stack[b]
            g_stack[b] += weights.gamma_ovp * stack[a]
    return sum(terms.values()), terms, (g_alpha, g_center, g_kappa, g_stack)


def prior_energy(states, kde_prior, loc_model, ori_model, graph, h_fields, weights: EnergyWeights, anchors):
    """Shape, location, orientation and overlap terms; returns ``(total, breakdown)``.

    ``anchors`` are the detector centres the location prior is measured from.
    """
    stack = np.asarray(h_fields, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    total, terms, _ = _prior(states, kde_prior, loc_model, ori_model, graph, stack, weights, anchors)
    return total, terms


# ---- total ----------------------------------------------------------------------------


@dataclass
class EnergyResult:
    energy: float
    grads: list[ShapeGrad]
    terms: dict[str, float]
    fields: np.ndarray


def energy_and_grad(states, models: EnergyModels, inputs: SceneInputs, weights: EnergyWeights,
                    smooth: SmoothParams, graph: InteractionGraph | None = None) -> EnergyResult:
    """Energy, per-term breakdown, per-shape fields and exact gradients."""
    if graph is None:
        graph = build_interaction_graph(inputs.detections, models.loc, inputs.window_sizes)
    anchors = [d.center for d in inputs.detections]
    f = _place_fields(states, models.decoder, smooth, inputs.image_dims)
    class_ids = [s.class_id for s in states]
    if inputs.n_classes == 2:
        e_img, g_stack = _single_class(f.stack, inputs.p_sem[1], smooth)
    else:
        e_img, g_stack = _multi_class(f.stack, class_ids, inputs.p_sem, smooth)
    e_pr, terms, (g_alpha, g_center, g_kappa, g_ovp) = _prior(
        states, models.prior, models.loc, models.ori, graph, f.stack, weights, anchors)
    g_stack = g_stack + g_ovp
    terms = {"image": e_img, **terms}

    grads = []
    n = len(states)
    if n:
        d_phi = np.zeros_like(f.hprime)
        for i, cache in enumerate(f.warps):
            up = g_stack[i, cache.rows, cache.cols]
            g_src, d_pivot, d_kappa = warp_patch_backward(cache, up)
            d_phi[i] = g_src * f.hprime[i]
            g_center[i] = g_center[i] + d_pivot
            g_kappa[i] = g_kappa[i] + d_kappa
        ga, _ = decode_batch_backward(models.decoder, f.decoder_cache, d_phi)
        for i in range(n):
            grads.append(ShapeGrad(np.asarray(g_center[i]), float(g_kappa[i]), ga[i] + g_alpha[i]))
    return EnergyResult(e_img + e_pr, grads, terms, f.stack)


def total_energy_and_grad(states, models: EnergyModels, inputs: SceneInputs, weights: EnergyWeights,
                          smooth: SmoothParams, graph: InteractionGraph | None = None):
    """Returns ``(E, grads)`` with one :class:`ShapeGrad` per state."""
    r = energy_and_grad(states, models, inputs, weights, smooth, graph)
    return r.energy, r.grads


# ---- flat parameter vectors ---------------------------------------------------------


def states_to_vector(states) -> np.ndarray:
    """Concatenate ``[x, y, kappa, alpha...]`` for every shape."""
    if not states:
        return np.zeros(0)
    return np.concatenate([np.r_[s.center[0], s.center[1], s.kappa, s.alpha] for s in states]).astype(np.float64)


def vector_to_states(x, template) -> list[ShapeState]:
    out, k = [], 0
    for s in template:
        c = len(s.alpha)
        out.append(ShapeState(np.array(x[k:k + 2], dtype=np.float64), float(x[k + 2]),
                              np.array(x[k + 3:k + 3 + c], dtype=np.float64), s.class_id))
        k += 3 + c
    return out


def grads_to_vector(grads) -> np.ndarray:
    if not grads:
        return np.zeros(0)
    return np.concatenate([np.r_[g.center, g.kappa, g.alpha] for g in grads])
