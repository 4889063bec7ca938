"""Finite-difference checks of every analytic gradient on seeded toy problems.

The main suite compares the total energy gradient with central differences
on small multi-shape scenes; two smaller suites check the decoder's code
gradient and the bilinear warp gradient in isolation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoder import DeepDecoderSpec, decode, decode_backward, init_deep
from .energy import (
    EnergyModels,
    EnergyWeights,
    LocationModel,
    OrientationModel,
    energy_and_grad,
    grads_to_vector,
    states_to_vector,
    vector_to_states,
)
from .grid import AffineParams, SmoothParams, affine_warp, warp_backward
from .scene import Detection, SceneInputs, ShapeState
from .shape_model import fit_kde

TOY_SPEC = DeepDecoderSpec(c=8, d_f=3, n_conv0=16, d0=2, d_out=16)


def toy_decoder(spec: DeepDecoderSpec, rng: np.random.Generator):
    """Random deep decoder whose output has a blob-like positive core.

    The final bias is shifted so roughly the centre of the window reads
    positive; weights are large enough that the codes visibly matter.
    """
    w = init_deep(spec, rng)
    p = w.params
    for k, v in p.items():
        if k.endswith(("kernel", ".w")):
            p[k] = (rng.normal(0.0, 0.5 / np.sqrt(v.shape[0]), size=v.shape)).astype(np.float32)
        elif k.endswith("running_var"):
            p[k] = rng.uniform(0.5, 1.5, size=v.shape).astype(np.float32)
        elif k.endswith("running_mean") or k.endswith("beta"):
            p[k] = rng.normal(0.0, 0.1, size=v.shape).astype(np.float32)
    w._f64 = None
    return w


@dataclass
class ToyScene:
    states: list[ShapeState]
    models: EnergyModels
    inputs: SceneInputs
    weights: EnergyWeights
    smooth: SmoothParams


def toy_scene(seed: int, image: int = 32, n_shapes: int = 3, spec: DeepDecoderSpec = TOY_SPEC) -> ToyScene:
    rng = np.random.default_rng(seed)
    dec = toy_decoder(spec, rng)
    codes = rng.normal(size=(10, spec.c))
    prior = fit_kde(codes)
    # smooth random foreground probabilities
    yy, xx = np.mgrid[0:image, 0:image]
    fg = np.zeros((image, image))
    for _ in range(4):
        cx, cy = rng.uniform(0, image, 2)
        fg += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rng.uniform(3, 8) ** 2))
    fg = np.clip(0.05 + 0.9 * fg / fg.max(), 0.01, 0.99)
    d = spec.d_out
    dets, states = [], []
    for _ in range(n_shapes):
        cx, cy = rng.uniform(d / 2, image - d / 2, 2)
        dets.append(Detection((float(cx), float(cy)), (cx - d / 2, cy - d / 2, cx + d / 2, cy + d / 2), 1))
        states.append(ShapeState(np.array([cx, cy]) + rng.normal(0, 1.5, 2), float(rng.uniform(-np.pi, np.pi)),
                                 rng.normal(size=spec.c)))
    inputs = SceneInputs(np.stack([1 - fg, fg]), dets, {1: d})
    models = EnergyModels(dec, prior, LocationModel(4.0), OrientationModel("von-mises", 0.3, 1.0))
    weights = EnergyWeights(gamma_shp=1.0, gamma_loc=0.1, gamma_ori=0.5, gamma_ovp=5.0)
    return ToyScene(states, models, inputs, weights, SmoothParams(delta=0.1, gamma=10.0))


@dataclass
class GradcheckResult:
    seed: int
    rel_error: float
    max_abs_error: float
    n_params: int


def check_gradient(scene: ToyScene, eps: float = 1e-6) -> tuple[float, float, int]:
    """Relative error ``|g - fd| / max(|g|, |fd|)`` over the full parameter vector."""
    x0 = states_to_vector(scene.states)

    def energy(x):
        st = vector_to_states(x, scene.states)
        return energy_and_grad(st, scene.models, scene.inputs, scene.weights, scene.smooth).energy

    r = energy_and_grad(scene.states, scene.models, scene.inputs, scene.weights, scene.smooth)
    g = grads_to_vector(r.grads)
    fd = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = eps
        fd[i] = (energy(x0 + e) - energy(x0 - e)) / (2 * eps)
    rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300))
    return rel, float(np.max(np.abs(g - fd))), x0.size


def _rel(g, fd) -> float:
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300))


def check_decoder_gradient(seed: int, spec: DeepDecoderSpec = TOY_SPEC, eps: float = 1e-6) -> float:
    """Relative error of ``d/d alpha sum(u * decode(alpha))`` for a random toy decoder."""
    rng = np.random.default_rng(seed)
    dec = toy_decoder(spec, rng)
    alpha = rng.normal(size=spec.c)
    up = rng.normal(size=dec.out_dims)
    g, _ = decode_backward(dec, alpha, up)
    fd = np.zeros(spec.c)
    for i in range(spec.c):
        e = np.zeros(spec.c)
        e[i] = eps
        fd[i] = (np.sum(up * decode(dec, alpha + e)) - np.sum(up * decode(dec, alpha - e))) / (2 * eps)
    return _rel(g, fd)


def check_warp_gradient(seed: int, size: int = 12, eps: float = 1e-6) -> float:
    """Relative error of the warp gradient in the pose, at a generic (off-lattice) pose."""
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(size, size))
    up = rng.normal(size=(size, size))
    x0 = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 2 * np.pi)])
    _, g = warp_backward(src, AffineParams(*x0), up)

    def f(x):
        return float(np.sum(up * affine_warp(src, AffineParams(*x))))

    fd = np.array([(f(x0 + e) - f(x0 - e)) / (2 * eps) for e in np.eye(3) * eps])
    return _rel(g, fd)


def run_all(seed: int = 0, tol: float = 1e-4, log=print) -> tuple[bool, dict]:
    """Every suite on seeds ``seed .. seed + 4``; returns the verdict and a report."""
    seeds = range(seed, seed + 5)
    ok_energy, energy = run_gradcheck(seeds, tol, log=log)
    dec = [check_decoder_gradient(s) for s in seeds]
    warp = [check_warp_gradient(s) for s in seeds]
    if log:
        log(f"decoder code gradient: max rel error {max(dec):.3e}")
        log(f"warp pose gradient: max rel error {max(warp):.3e}")
    ok = ok_energy and max(dec) < tol and max(warp) < tol
    report = {
        "tolerance": tol,
        "energy": [{"seed": r.seed, "rel_error": r.rel_error, "max_abs_error": r.max_abs_error,
                    "n_params": r.n_params} for r in energy],
        "decoder": [{"seed": s, "rel_error": e} for s, e in zip(seeds, dec)],
        "warp": [{"seed": s, "rel_error": e} for s, e in zip(seeds, warp)],
        "passed": ok,
    }
    return ok, report


def run_gradcheck(seeds=range(5), tol: float = 1e-4, eps: float = 1e-6, log=print) -> tuple[bool, list[GradcheckResult]]:
    results = []
    t0 = time.perf_counter()
    for s in seeds:
        rel, mx, n = check_gradient(toy_scene(s), eps)
        results.append(GradcheckResult(int(s), rel, mx, n))
        if log:
            log(f"seed {s}: rel error {rel:.3e} (max abs {mx:.3e}, {n} parameters)")
    ok = all(r.rel_error < tol for r in results)
    if log:
        log(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s (tolerance {tol:g})")
    return ok, results
