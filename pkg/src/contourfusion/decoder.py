"""Decoders that map shape codes to level-set grids.

Two variants share one interface:

* ``linear``: ``phi(alpha) = mean_phi + sum_k alpha_k psi_k`` with eigen-fields
  taken from a linear-kernel shape model.
* ``deep``: dense projection to a small ``d0 x d0 x n_conv0`` block, ``u``
  upsampling stages (stride-2 transposed conv, batch norm, leaky ReLU) that
  halve the filter count and double the extent, then a 1-channel stride-1
  convolution and ``tanh``. The output ``z`` in (-1, 1) is used directly as
  the level set; training reads it as the probability ``p = (z + 1) / 2``.

Parameters are stored as float32 (the training precision). Decoding casts
them to float64 once and caches the copy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers, tensorio
from .tensorio import FormatError

# names of tensors that are statistics or fixed scalings, not trained by Adam
_FROZEN = ("running_mean", "running_var", "in_scale")


@dataclass(frozen=True)
class DeepDecoderSpec:
    c: int
    d_f: int = 3
    n_conv0: int = 256
    d0: int = 6
    d_out: int = 96

    def __post_init__(self):
        if self.c < 1:
            raise ValueError("c must be >= 1")
        if self.d_f < 1 or self.d_f % 2 == 0:
            raise ValueError("d_f must be odd")
        ratio = self.d_out / self.d0
        u = round(math.log2(ratio)) if ratio > 0 else 0
        if u < 1 or self.d0 * 2**u != self.d_out:
            raise ValueError("d_out / d0 must be 2**u with u >= 1")
        if self.n_conv0 % 2**u:
            raise ValueError("n_conv0 must be divisible by 2**u")

    @property
    def u(self) -> int:
        return round(math.log2(self.d_out // self.d0))

    def stage_channels(self) -> list[int]:
        """Input filter count of each upsampling stage."""
        return [self.n_conv0 >> k for k in range(self.u)]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        f, d0, n0 = self.d_f, self.d0, self.n_conv0
        shapes = {
            "dense.w": (self.c, d0 * d0 * n0),
            "dense.b": (d0 * d0 * n0,),
            "dense.in_scale": (self.c,),
        }
        for k, cin in enumerate(self.stage_channels()):
            cout = cin // 2
            shapes[f"stage{k}.kernel"] = (cin, cout, f, f)
            shapes[f"stage{k}.bias"] = (cout,)
            for s in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"stage{k}.bn.{s}"] = (cout,)
        last = n0 >> self.u
        shapes["out.kernel"] = (last, f, f)
        shapes["out.bias"] = (1,)
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 1000
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class DecoderWeights:
    """Decoder parameters.

    Deep tensors (channels-last activations, kernels in ``(C_in, C_out, f, f)``):
    ``dense.w (c, d0*d0*n0)`` whose columns are ordered (row, col, channel);
    ``dense.b``; ``dense.in_scale (c,)``, a fixed per-component input scaling;
    ``stage{k}.kernel``, ``stage{k}.bias``, ``stage{k}.bn.{gamma,beta,running_mean,running_var}``;
    ``out.kernel (C, f, f)`` and ``out.bias (1,)``.
    Linear tensors: ``mean_phi (D, D)`` and ``psi (c, D, D)``.
    """

    variant: str
    params: dict[str, np.ndarray]
    spec: DeepDecoderSpec | None = None
    _f64: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in ("linear", "deep"):
            raise ValueError(f"unknown decoder variant {self.variant!r}")
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.params.items()}
        if self.variant == "deep":
            if self.spec is None:
                raise ValueError("deep weights need a spec")
            expected = self.spec.param_shapes()
        else:
            if set(self.params) != {"mean_phi", "psi"}:
                raise ValueError("linear weights need exactly mean_phi and psi")
            d = self.params["mean_phi"].shape
            expected = {"mean_phi": d, "psi": (self.params["psi"].shape[0],) + d}
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match the spec")
        for k, shape in expected.items():
            if self.params[k].shape != tuple(shape):
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {shape}")
        for k, v in self.params.items():
            if k.endswith("running_var") and not np.all(v > 0):
                raise ValueError(f"{k} must be positive")

    @property
    def c(self) -> int:
        return self.spec.c if self.variant == "deep" else self.params["psi"].shape[0]

    @property
    def out_dims(self) -> tuple[int, int]:
        if self.variant == "deep":
            return (self.spec.d_out, self.spec.d_out)
        return self.params["mean_phi"].shape

    def f64(self) -> dict[str, np.ndarray]:
        if self._f64 is None:
            self._f64 = {k: v.astype(np.float64) for k, v in self.params.items()}
        return self._f64


def trainable_names(params) -> list[str]:
    return [k for k in params if not k.endswith(_FROZEN)]


# ---- construction --------------------------------------------------------


def linear_from_kpca(model) -> DecoderWeights:
    """Eigen-fields ``psi_k = sum_i beta_ik (phi_i - mean_phi)`` of a linear-kernel model."""
    if model.spec.kind != "linear-on-signed-distance":
        raise ValueError("a linear decoder needs a linear-kernel shape model")
    h, w = model.dims
    centred = model.train_phi - model.train_phi.mean(axis=0)
    psi = (model.beta.T @ centred).reshape(model.c, h, w)
    return DecoderWeights("linear", {"mean_phi": model.mean_phi, "psi": psi})


def init_deep(spec: DeepDecoderSpec, rng: np.random.Generator, code_std=None) -> DecoderWeights:
    """N(0, 0.02) weights, zero biases, unit batch-norm scale.

    ``code_std`` (per-component spread of the training codes) sets the fixed
    input scaling so the dense layer sees unit-variance inputs.
    """
    params = {}
    for name, shape in spec.param_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("w", "kernel"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif leaf in ("gamma", "running_var"):
            params[name] = np.ones(shape)
        elif leaf == "in_scale":
            if code_std is None:
                params[name] = np.ones(shape)
            else:
                s = np.asarray(code_std, dtype=np.float64)
                params[name] = np.where(s > 1e-12, 1.0 / np.maximum(s, 1e-12), 1.0)
        else:
            params[name] = np.zeros(shape)
    return DecoderWeights("deep", params, spec)


# ---- deep forward / backward ----------------------------------------------


def _deep_forward(p, spec: DeepDecoderSpec, alphas, train: bool):
    n = alphas.shape[0]
    x = alphas * p["dense.in_scale"]
    h, c_dense = layers.dense_forward(x, p["dense.w"], p["dense.b"])
    h = h.reshape(n, spec.d0, spec.d0, spec.n_conv0)
    stages, stats = [], []
    for k in range(spec.u):
        h, c_t = layers.tconv_forward(h, p[f"stage{k}.kernel"], p[f"stage{k}.bias"])
        h, c_b, st = layers.bn_forward(
            h, p[f"stage{k}.bn.gamma"], p[f"stage{k}.bn.beta"],
            p[f"stage{k}.bn.running_mean"], p[f"stage{k}.bn.running_var"], train,
        )
        h, pos = layers.leaky_forward(h)
        stages.append((c_t, c_b, pos))
        stats.append(st)
    pre, c_out = layers.conv_same_forward(h, p["out.kernel"], p["out.bias"])
    z = np.tanh(pre)
    return z, pre, (c_dense, stages, c_out), stats


def _deep_backward(p, spec: DeepDecoderSpec, cache, dpre, need_theta: bool = True):
    """Backprop from the pre-tanh output; returns (grad_alphas, grads)."""
    c_dense, stages, c_out = cache
    grads = {}
    dh, grads["out.kernel"], grads["out.bias"] = layers.conv_same_backward(dpre, c_out)
    for k in reversed(range(spec.u)):
        c_t, c_b, pos = stages[k]
        dh = layers.leaky_backward(dh, pos)
        dh, grads[f"stage{k}.bn.gamma"], grads[f"stage{k}.bn.beta"] = layers.bn_backward(dh, c_b)
        dh, grads[f"stage{k}.kernel"], grads[f"stage{k}.bias"] = layers.tconv_backward(dh, c_t)
    dh = dh.reshape(dh.shape[0], -1)
    dx, grads["dense.w"], grads["dense.b"] = layers.dense_backward(dh, c_dense)
    return dx * p["dense.in_scale"], (grads if need_theta else None)


# ---- public decode API ------------------------------------------------------


def _check_alphas(weights: DecoderWeights, alphas) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != weights.c:
        raise ValueError(f"expected codes of length {weights.c}, got shape {a.shape}")
    return a


def decode_batch_with_cache(weights: DecoderWeights, alphas):
    """Decode ``(n, c)`` codes to ``(n, D, D)`` fields in float64, keeping what backward needs."""
    a = _check_alphas(weights, alphas)
    p = weights.f64()
    if weights.variant == "linear":
        phi = p["mean_phi"] + np.tensordot(a, p["psi"], axes=(1, 0))
        return phi, a
    z, _, cache, _ = _deep_forward(p, weights.spec, a, train=False)
    return z, (cache, z)


def decode_batch_backward(weights: DecoderWeights, cache, upstream, need_theta: bool = False):
    """Gradients of ``sum(upstream * decode_batch(alphas))``; returns (grad_alphas, grad_theta)."""
    p = weights.f64()
    up = np.asarray(upstream, dtype=np.float64)
    if weights.variant == "linear":
        ga = np.tensordot(up, p["psi"], axes=([1, 2], [1, 2]))
        gt = None
        if need_theta:
            gt = {"mean_phi": up.sum(axis=0), "psi": np.tensordot(cache, up, axes=(0, 0))}
        return ga, gt
    deep_cache, z = cache
    return _deep_backward(p, weights.spec, deep_cache, up * (1.0 - z * z), need_theta)


def decode(weights: DecoderWeights, alpha) -> np.ndarray:
    """Level-set grid for a single code ``alpha``."""
    phi, _ = decode_batch_with_cache(weights, np.atleast_2d(alpha))
    return phi[0]


def decode_backward(weights: DecoderWeights, alpha, upstream):
    """Exact gradients of ``sum(upstream * decode(weights, alpha))``.

    Returns ``(grad_alpha, grad_theta)``; ``grad_theta`` holds one array per
    trainable parameter (batch-norm running statistics and the fixed input
    scaling are excluded).
    """
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != weights.out_dims:
        raise ValueError(f"upstream has shape {up.shape}, expected {weights.out_dims}")
    _, cache = decode_batch_with_cache(weights, a)
    ga, gt = decode_batch_backward(weights, cache, up[None], need_theta=True)
    return ga[0], gt


# ---- training ----------------------------------------------------------------


def bce_from_logits(pre, target):
    """Mean BCE of ``p = (tanh(pre) + 1) / 2`` against ``target``, and its gradient."""
    two = 2.0 * pre
    loss = np.mean(np.logaddexp(0.0, two) - two * target)
    p = 0.5 * (np.tanh(pre) + 1.0)
    return float(loss), 2.0 * (p - target) / pre.size


def train_decoder(spec: DeepDecoderSpec, pairs, config: TrainConfig = TrainConfig(), log=None):
    """Fit a deep decoder to ``(code, mask)`` pairs with Adam on per-pixel BCE.

    Runs in float32. Batch norm uses minibatch statistics during training and
    updates running averages with momentum 0.9. Returns the weights and the
    per-epoch mean loss.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    codes = np.stack([np.asarray(a, dtype=np.float64).ravel() for a, _ in pairs])
    masks = np.stack([np.asarray(m) for _, m in pairs])
    if codes.shape[1] != spec.c:
        raise ValueError(f"codes have length {codes.shape[1]}, spec expects {spec.c}")
    if masks.shape[1:] != (spec.d_out, spec.d_out):
        raise ValueError(f"masks are {masks.shape[1:]}, spec expects {spec.d_out}x{spec.d_out}")
    codes32 = codes.astype(np.float32)
    targets = (masks > 0).astype(np.float32)

    rng = np.random.default_rng(config.rng_seed)
    std = codes.std(axis=0) if len(codes) > 1 else None
    weights = init_deep(spec, rng, std)
    p = weights.params
    names = trainable_names(p)
    m1 = {k: np.zeros_like(p[k]) for k in names}
    m2 = {k: np.zeros_like(p[k]) for k in names}
    b1, b2 = np.float32(config.beta1), np.float32(config.beta2)
    lr, eps = np.float32(config.learning_rate), np.float32(config.epsilon)
    step = 0
    n = len(pairs)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, pre, cache, stats = _deep_forward(p, spec, codes32[idx], train=True)
            loss, dpre = bce_from_logits(pre, targets[idx])
            total += loss * len(idx)
            _, grads = _deep_backward(p, spec, cache, dpre.astype(np.float32))
            step += 1
            c1 = 1.0 - float(b1) ** step
            c2 = 1.0 - float(b2) ** step
            for k in names:
                g = grads[k]
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                p[k] -= lr * (m1[k] / np.float32(c1)) / (np.sqrt(m2[k] / np.float32(c2)) + eps)
            for k, (mean, var) in enumerate(stats):
                p[f"stage{k}.bn.running_mean"] = (0.9 * p[f"stage{k}.bn.running_mean"] + 0.1 * mean).astype(np.float32)
                p[f"stage{k}.bn.running_var"] = (0.9 * p[f"stage{k}.bn.running_var"] + 0.1 * var).astype(np.float32)
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    weights._f64 = None
    return weights, history


# ---- persistence -----------------------------------------------------------------


def save_weights(weights: DecoderWeights, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "decoder-weights", "variant": weights.variant, "params": sorted(weights.params)}
    if weights.spec is not None:
        s = weights.spec
        manifest.update(c=s.c, d_f=s.d_f, n_conv0=s.n_conv0, d0=s.d0, d_out=s.d_out, u=s.u)
    else:
        manifest.update(c=weights.c, dims=list(weights.out_dims))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in sorted(weights.params):
        tensorio.write_tensor(path / f"{name}.cft", weights.params[name])


def load_weights(path, variant: str | None = None) -> DecoderWeights:
    """Read a weight bundle; ``variant`` (if given) must match the manifest."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read decoder manifest in {path}: {exc}") from exc
    if manifest.get("format") != "decoder-weights":
        raise FormatError(f"{path} is not a decoder weight bundle")
    if variant is not None and manifest.get("variant") != variant:
        raise FormatError(f"bundle holds a {manifest.get('variant')!r} decoder, expected {variant!r}")
    spec = None
    if manifest["variant"] == "deep":
        try:
            spec = DeepDecoderSpec(*(manifest[k] for k in ("c", "d_f", "n_conv0", "d0", "d_out")))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad decoder spec in manifest: {exc}") from exc
    try:
        params = {name: tensorio.read_tensor(path / f"{name}.cft") for name in manifest["params"]}
    except OSError as exc:
        raise FormatError(f"missing tensor in {path}: {exc}") from exc
    try:
        return DecoderWeights(manifest["variant"], params, spec)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
