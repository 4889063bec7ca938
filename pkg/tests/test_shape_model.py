import itertools

import numpy as np
import pytest

from contourfusion.grid import signed_distance
from contourfusion.shape_model import (
    KernelError,
    ShapeKernelSpec,
    encode,
    encode_training_set,
    fit_kde,
    fit_kpca,
    kde_log_prior,
    load_bundle,
    save_bundle,
)
from contourfusion.synth import BlobParams, gen_shape_set

LINEAR = ShapeKernelSpec("linear-on-signed-distance", clamp=16.0)


@pytest.fixture(scope="module")
def blobs16():
    return gen_shape_set(20, BlobParams(base_radius=4.5, n_harmonics=3, harmonic_amp=0.35), 16, seed=7)


def svd_oracle(masks, clamp, c):
    """Classic eigenshape PCA via a dense SVD of the de-meaned signed-distance matrix."""
    phis = np.stack([signed_distance(m, clamp).ravel() for m in masks], axis=1)
    mean = phis.mean(axis=1, keepdims=True)
    s = phis - mean
    u, sv, vt = np.linalg.svd(s, full_matrices=False)
    basis = u[:, :c]
    return basis, mean[:, 0], (basis.T @ s).T


def align_signs(a, b):
    signs = np.sign(np.sum(a * b, axis=0))
    signs[signs == 0] = 1
    return b * signs


class TestFitKpca:
    def test_two_mirror_masks(self):
        m = np.zeros((9, 9), dtype=bool)
        m[3:6, 2:7] = True
        m[2, 4] = True
        mirror = m[::-1]
        model = fit_kpca([m, mirror], LINEAR, 1)
        codes = model.train_codes[:, 0]
        assert codes[0] == pytest.approx(-codes[1], abs=1e-9)
        assert abs(codes[0]) > 0

    def test_single_mask_rejected(self, blobs16):
        with pytest.raises(ValueError):
            fit_kpca(blobs16[:1], LINEAR, 1)

    def test_too_many_components_rejected(self, blobs16):
        with pytest.raises(ValueError):
            fit_kpca(blobs16[:5], LINEAR, 5)

    def test_matches_svd_oracle(self, blobs16):
        c = 10
        model = fit_kpca(blobs16, LINEAR, c)
        _, _, proj = svd_oracle(blobs16, 16.0, c)
        np.testing.assert_allclose(model.train_codes, align_signs(model.train_codes, proj), atol=1e-6)

    def test_normalization_and_order(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 12)
        assert np.all(np.diff(model.lam) <= 0) and np.all(model.lam >= 0)
        k = model.train_phi @ model.train_phi.T
        n = k.shape[0]
        one = np.full((n, n), 1 / n)
        kc = k - one @ k - k @ one + one @ k @ one
        for j in range(model.c):
            b = model.beta[:, j]
            assert b @ kc @ b == pytest.approx(1.0, abs=1e-8)

    def test_codes_zero_mean(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 8)
        np.testing.assert_allclose(model.train_codes.mean(axis=0), 0, atol=1e-8)

    def test_sign_convention(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 6)
        idx = np.argmax(np.abs(model.beta), axis=0)
        assert np.all(model.beta[idx, np.arange(6)] > 0)

    def test_gram_reconstruction_improves_with_c(self, blobs16):
        errs = []
        for c in (2, 6, 12, 19):
            model = fit_kpca(blobs16, LINEAR, c)
            k = model.train_phi @ model.train_phi.T
            n = k.shape[0]
            one = np.full((n, n), 1 / n)
            kc = k - one @ k - k @ one + one @ k @ one
            approx = (model.beta * (model.lam * n) ** 2) @ model.beta.T
            errs.append(np.linalg.norm(kc - approx))
        assert all(a >= b for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-6 * np.linalg.norm(kc)

    def test_reduced_when_rank_deficient(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:6, 2:6] = True
        bar = np.zeros((8, 8), dtype=bool)
        bar[3:5, 1:7] = True
        model = fit_kpca([m, m, m, bar], LINEAR, 3)
        assert model.reduced and model.c == 1

    def test_rbf_kernel(self, blobs16):
        spec = ShapeKernelSpec("rbf-on-signed-distance", rbf_scale=40.0, clamp=16.0)
        model = fit_kpca(blobs16, spec, 5)
        for j, m in enumerate(blobs16[:4]):
            np.testing.assert_allclose(encode(model, m), model.train_codes[j], atol=1e-8)

    def test_non_psd_kernel_rejected(self, blobs16, monkeypatch):
        import contourfusion.shape_model as sm

        monkeypatch.setattr(sm, "kernel_matrix", lambda spec, a, b: -(a @ b.T))
        with pytest.raises(KernelError):
            fit_kpca(blobs16[:6], LINEAR, 2)


class TestEncode:
    def test_in_sample(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 10)
        for j, m in enumerate(blobs16):
            np.testing.assert_allclose(encode(model, m), model.train_codes[j], atol=1e-8)

    def test_out_of_sample_matches_svd(self, blobs16):
        c = 10
        model = fit_kpca(blobs16[:-1], LINEAR, c)
        basis, mean, proj = svd_oracle(blobs16[:-1], 16.0, c)
        new = blobs16[-1]
        phi = signed_distance(new, 16.0).ravel()
        oracle = basis.T @ (phi - mean)
        signs = np.sign(np.sum(model.train_codes * proj, axis=0))
        np.testing.assert_allclose(encode(model, new), oracle * signs, atol=1e-6)

    def test_mean_like_mask_has_small_code(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 10)
        mean_mask = model.mean_phi > 0
        code = encode(model, mean_mask)
        norms = np.linalg.norm(model.train_codes, axis=1)
        assert np.linalg.norm(code) < np.median(norms)

    def test_dimension_mismatch(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 3)
        with pytest.raises(ValueError):
            encode(model, np.zeros((8, 8)))

    def test_training_pairs(self, blobs16):
        model = fit_kpca(blobs16, LINEAR, 19)
        pairs = encode_training_set(model, blobs16)
        assert len(pairs) == 20
        for m, code in pairs[:5]:
            np.testing.assert_allclose(code, encode(model, m), atol=1e-8)
        # full rank: code Gram equals the centred feature Gram
        codes = np.stack([c for _, c in pairs])
        s = model.train_phi - model.train_phi.mean(axis=0)
        np.testing.assert_allclose(codes @ codes.T, s @ s.T, atol=1e-6 * np.abs(s @ s.T).max())


class TestKde:
    def test_auto_sigma_two(self):
        assert fit_kde([[0.0, 0.0], [2.0, 0.0]]).sigma == pytest.approx(2.0)

    def test_auto_sigma_collinear(self):
        assert fit_kde([[0.0], [1.0], [3.0]]).sigma == pytest.approx(4 / 3)

    def test_explicit_sigma(self):
        assert fit_kde([[0.0], [1.0]], sigma=0.5).sigma == 0.5

    def test_identical_codes_fallback(self):
        prior = fit_kde([[1.0, 1.0], [1.0, 1.0]])
        assert prior.sigma == 1.0 and prior.fallback

    def test_too_few(self):
        with pytest.raises(ValueError):
            fit_kde([[1.0]])

    def test_value_at_isolated_code(self):
        prior = fit_kde([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]], sigma=1.0)
        v, _ = kde_log_prior(prior, np.zeros(2))
        assert v == pytest.approx(0.0, abs=1e-12)

    def test_ordering(self):
        rng = np.random.default_rng(0)
        codes = rng.normal(size=(6, 3))
        prior = fit_kde(codes)
        far = codes.mean(axis=0) + 10 * prior.sigma * np.linalg.norm(codes, axis=1).max() * np.ones(3)
        v_far, _ = kde_log_prior(prior, far)
        for c in codes:
            assert kde_log_prior(prior, c)[0] >= v_far

    def test_grad_fd(self):
        rng = np.random.default_rng(1)
        prior = fit_kde(rng.normal(size=(8, 4)))
        a = rng.normal(size=4)
        _, g = kde_log_prior(prior, a)
        eps = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = eps
            fd = (kde_log_prior(prior, a + e)[0] - kde_log_prior(prior, a - e)[0]) / (2 * eps)
            assert g[i] == pytest.approx(fd, rel=1e-5)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        codes = rng.normal(size=(7, 3))
        a = rng.normal(size=3)
        p1 = fit_kde(codes, sigma=0.8)
        p2 = fit_kde(codes[::-1], sigma=0.8)
        assert kde_log_prior(p1, a)[0] == pytest.approx(kde_log_prior(p2, a)[0], abs=1e-12)


def test_bundle_roundtrip(tmp_path, blobs16):
    model = fit_kpca(blobs16, LINEAR, 5)
    prior = fit_kde(model.train_codes)
    save_bundle(model, prior, tmp_path / "b")
    m2, p2 = load_bundle(tmp_path / "b")
    assert m2.c == 5 and m2.dims == (16, 16)
    np.testing.assert_allclose(m2.beta, model.beta, rtol=1e-6)
    assert p2.sigma == pytest.approx(prior.sigma, rel=1e-12)
    save_bundle(m2, p2, tmp_path / "c")
    for name in itertools.chain(["manifest.json"], (f"{t}.cft" for t in ("beta", "lambda", "train_phi"))):
        assert (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
