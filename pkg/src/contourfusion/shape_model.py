"""Kernel-PCA shape codes and the KDE prior over them.

Kernels act on the clamped signed-distance fields of the training masks, so
the linear kernel reproduces the classic eigenshape construction exactly and
its eigen-directions can be turned into a linear decoder.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .grid import DimensionError, as_mask, mask_centroid, signed_distance
from .tensorio import FormatError

log = logging.getLogger(__name__)

KERNEL_KINDS = ("linear-on-signed-distance", "rbf-on-signed-distance")

# eigenvalues below this fraction of the largest are treated as zero
EIG_REL_TOL = 1e-10
# negative eigenvalues beyond this fraction of the largest mean the kernel is not PSD
PSD_REL_TOL = 1e-8


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeKernelSpec:
    kind: str = "linear-on-signed-distance"
    rbf_scale: float = 1.0
    clamp: float = 64.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf-on-signed-distance" and not self.rbf_scale > 0:
            raise ValueError("rbf_scale must be > 0")
        if not self.clamp > 0:
            raise ValueError("clamp must be > 0")


def kernel_matrix(spec: ShapeKernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel between rows of ``a`` and rows of ``b`` (flattened signed-distance fields)."""
    gram = a @ b.T
    if spec.kind == "linear-on-signed-distance":
        return gram
    sq_a = np.einsum("ij,ij->i", a, a)
    sq_b = np.einsum("ij,ij->i", b, b)
    d2 = np.maximum(sq_a[:, None] + sq_b[None, :] - 2.0 * gram, 0.0)
    return np.exp(-d2 / (2.0 * spec.rbf_scale**2))


@dataclass
class KpcaModel:
    spec: ShapeKernelSpec
    beta: np.ndarray  # (N_T, c)
    lam: np.ndarray  # (c,), descending
    train_phi: np.ndarray  # (N_T, H*W)
    col_mean: np.ndarray  # (N_T,) column means of the uncentred kernel matrix
    grand_mean: float
    mean_phi: np.ndarray  # (H, W)
    train_codes: np.ndarray  # (N_T, c)
    reduced: bool = False

    @property
    def c(self) -> int:
        return self.beta.shape[1]

    @property
    def n_train(self) -> int:
        return self.beta.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.mean_phi.shape

    def code_scale(self) -> np.ndarray:
        """Per-component standard deviation of the training codes (``sqrt(lambda)``)."""
        return np.sqrt(np.maximum(self.lam, 0.0))


def check_training_shapes(masks: Sequence[np.ndarray], centroid_tol: float = 0.5) -> list[np.ndarray]:
    out = [as_mask(m) for m in masks]
    if not out:
        raise ValueError("need at least 2 shapes")
    shape = out[0].shape
    for i, m in enumerate(out):
        if m.shape != shape:
            raise DimensionError(f"mask {i} has shape {m.shape}, expected {shape}")
        if not m.any():
            raise ValueError(f"mask {i} is empty")
        cx, cy = mask_centroid(m)
        h, w = shape
        if abs(cx - (w - 1) / 2) > centroid_tol or abs(cy - (h - 1) / 2) > centroid_tol:
            raise ValueError(f"mask {i} is not centred (centroid at {cx:.2f}, {cy:.2f})")
    return out


def fit_kpca(masks: Sequence[np.ndarray], spec: ShapeKernelSpec, c: int) -> KpcaModel:
    """Fit kernel PCA to centred training masks and keep ``c`` components.

    The centred kernel matrix is diagonalised as ``N lambda beta = K beta``;
    every kept ``beta`` is scaled so that ``beta^T K beta = 1``, which makes
    the feature-space eigenvectors unit length.
    """
    masks = check_training_shapes(masks)
    n = len(masks)
    if n < 2:
        raise ValueError("need at least 2 shapes")
    if c < 1 or c > n - 1:
        raise ValueError(f"component count must be in [1, {n - 1}], got {c}")

    phis = np.stack([signed_distance(m, spec.clamp).ravel() for m in masks])
    k = kernel_matrix(spec, phis, phis)
    col_mean = k.mean(axis=0)
    grand = float(k.mean())
    kc = k - col_mean[None, :] - col_mean[:, None] + grand
    kc = 0.5 * (kc + kc.T)

    mu, vec = np.linalg.eigh(kc)
    order = np.argsort(mu)[::-1]
    mu, vec = mu[order], vec[:, order]
    top = max(float(mu[0]), 0.0)
    if top <= 0:
        raise KernelError("centred kernel matrix has no positive eigenvalue")
    if mu[-1] < -PSD_REL_TOL * top:
        raise KernelError(f"kernel is not positive semi-definite (eigenvalue {mu[-1]:.3e})")

    positive = int(np.sum(mu > EIG_REL_TOL * top))
    reduced = positive < c
    if reduced:
        log.warning("only %d positive eigenvalues, reducing c from %d", positive, c)
        c = positive
    mu, vec = mu[:c], vec[:, :c].copy()

    # deterministic sign: largest-magnitude entry positive
    pivot = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[pivot, np.arange(c)])
    vec *= signs

    beta = vec / np.sqrt(mu)
    lam = mu / n
    codes = kc @ beta
    return KpcaModel(
        spec=spec,
        beta=beta,
        lam=lam,
        train_phi=phis,
        col_mean=col_mean,
        grand_mean=grand,
        mean_phi=phis.mean(axis=0).reshape(masks[0].shape),
        train_codes=codes,
        reduced=reduced,
    )


def encode_phi(model: KpcaModel, phi: np.ndarray) -> np.ndarray:
    """Project signed-distance fields (one per row, or a single grid) onto the components."""
    x = np.atleast_2d(np.asarray(phi, dtype=np.float64).reshape(-1, model.train_phi.shape[1]))
    kx = kernel_matrix(model.spec, x, model.train_phi)  # (m, N)
    kxc = kx - model.col_mean[None, :] - kx.mean(axis=1, keepdims=True) + model.grand_mean
    return kxc @ model.beta


def encode(model: KpcaModel, mask) -> np.ndarray:
    m = as_mask(mask)
    if m.shape != model.dims:
        raise DimensionError(f"mask shape {m.shape} does not match model dims {model.dims}")
    return encode_phi(model, signed_distance(m, model.spec.clamp))[0]


def encode_training_set(model: KpcaModel, masks: Sequence[np.ndarray]):
    """Pair each training mask with its code; these pairs supervise the decoder."""
    if len(masks) != model.n_train:
        raise ValueError("mask count does not match the fitted model")
    return [(as_mask(m), model.train_codes[i].copy()) for i, m in enumerate(masks)]


# ---------------------------------------------------------------------------
# KDE prior


@dataclass
class KdePrior:
    codes: np.ndarray  # (N, c)
    sigma: float
    fallback: bool = field(default=False)


def fit_kde(codes, sigma: float | None = None) -> KdePrior:
    """Gaussian KDE over shape codes.

    Without an explicit bandwidth, ``sigma`` is the mean distance from each
    code to its nearest neighbour.
    """
    x = np.asarray(codes, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("KDE needs at least 2 codes")
    if sigma is not None:
        if not sigma > 0:
            raise ValueError("sigma must be > 0")
        return KdePrior(x.copy(), float(sigma))
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    s = float(nn.mean())
    if not s > 0:
        log.warning("all KDE codes coincide, falling back to sigma=1.0")
        return KdePrior(x.copy(), 1.0, fallback=True)
    return KdePrior(x.copy(), s)


def kde_log_prior(prior: KdePrior, alpha) -> tuple[float, np.ndarray]:
    """``log sum_i exp(-|alpha - a_i|^2 / 2 sigma^2)`` and its gradient."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (prior.codes.shape[1],):
        raise DimensionError(f"code length {a.shape} does not match prior ({prior.codes.shape[1]},)")
    diff = a[None, :] - prior.codes
    e = -np.einsum("ij,ij->i", diff, diff) / (2.0 * prior.sigma**2)
    m = e.max()
    w = np.exp(e - m)
    z = w.sum()
    value = float(m + np.log(z))
    grad = -(w[:, None] * diff).sum(axis=0) / (z * prior.sigma**2)
    return value, grad


# ---------------------------------------------------------------------------
# bundle IO

_BUNDLE_TENSORS = ("beta", "lambda", "train_phi", "mean_phi", "train_codes", "centering")


def save_bundle(model: KpcaModel, prior: KdePrior, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = model.dims
    manifest = {
        "format": "kpca-bundle",
        "kernel": model.spec.kind,
        "rbf_scale": model.spec.rbf_scale,
        "clamp": model.spec.clamp,
        "c": model.c,
        "sigma": prior.sigma,
        "dims": [h, w],
        "n_train": model.n_train,
        "reduced": model.reduced,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tensors = {
        "beta": model.beta,
        "lambda": model.lam,
        "train_phi": model.train_phi,
        "mean_phi": model.mean_phi,
        "train_codes": model.train_codes,
        "centering": np.append(model.col_mean, model.grand_mean),
    }
    for name in _BUNDLE_TENSORS:
        tensorio.write_tensor(path / f"{name}.cft", tensors[name])


def load_bundle(path: str | Path) -> tuple[KpcaModel, KdePrior]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read shape-model manifest in {path}: {exc}") from exc
    if manifest.get("format") != "kpca-bundle":
        raise FormatError(f"{path} is not a shape-model bundle")
    t = {name: tensorio.read_tensor(path / f"{name}.cft").astype(np.float64) for name in _BUNDLE_TENSORS}
    n, c = manifest["n_train"], manifest["c"]
    h, w = manifest["dims"]
    expected = {
        "beta": (n, c),
        "lambda": (c,),
        "train_phi": (n, h * w),
        "mean_phi": (h, w),
        "train_codes": (n, c),
        "centering": (n + 1,),
    }
    for name, shape in expected.items():
        if t[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {t[name].shape}, expected {shape}")
    spec = ShapeKernelSpec(manifest["kernel"], manifest["rbf_scale"], manifest["clamp"])
    model = KpcaModel(
        spec=spec,
        beta=t["beta"],
        lam=t["lambda"],
        train_phi=t["train_phi"],
        col_mean=t["centering"][:-1],
        grand_mean=float(t["centering"][-1]),
        mean_phi=t["mean_phi"],
        train_codes=t["train_codes"],
        reduced=bool(manifest.get("reduced", False)),
    )
    return model, KdePrior(t["train_codes"].copy(), float(manifest["sigma"]))
