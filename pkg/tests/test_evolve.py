import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contourfusion.decoder import linear_from_kpca
from contourfusion.energy import EnergyModels, EnergyWeights, LocationModel, OrientationModel, composite_field
from contourfusion.evolve import (
    EvolveConfig,
    InitConfig,
    assign_pixels,
    extract_instance_masks,
    init_rotation,
    initialize_states,
    rotate_mask,
    rotation_energies,
    run_evolution,
    segment,
)
from contourfusion.grid import SmoothParams
from contourfusion.metrics import iou
from contourfusion.scene import Detection, SceneInputs, ShapeState
from contourfusion.shape_model import ShapeKernelSpec, fit_kde, fit_kpca
from contourfusion.synth import BlobParams, gen_scene, gen_shape_set, gen_tapered_bar

WIN = 48
BLOB = BlobParams(base_radius=11)
SMOOTH = SmoothParams(delta=1.0)


@pytest.fixture(scope="module")
def blob_model():
    masks = gen_shape_set(40, BLOB, WIN, seed=5)
    km = fit_kpca(masks, ShapeKernelSpec("linear-on-signed-distance", clamp=3.0), 16)
    dec = linear_from_kpca(km)
    return masks, km, dec, EnergyModels(dec, fit_kde(km.train_codes), LocationModel(4.0))


@pytest.fixture(scope="module")
def bar_model():
    rng = np.random.default_rng(0)
    bars = [gen_tapered_bar(64, rng.uniform(36, 48), rng.uniform(3, 6), rng.uniform(12, 18)) for _ in range(30)]
    km = fit_kpca(bars, ShapeKernelSpec("linear-on-signed-distance", clamp=3.0), 12)
    return km, linear_from_kpca(km)


def paste_scene(window_mask, offset, dims, p_in=1.0):
    """Ideal probabilities for one window pasted at ``offset`` (row, col)."""
    fg = np.zeros(dims)
    oy, ox = offset
    h, w = window_mask.shape
    fg[oy:oy + h, ox:ox + w] = window_mask * p_in
    fg = np.clip(fg, 1 - p_in, p_in) if p_in < 1 else fg
    return np.stack([1 - fg, fg])


def grid_invariant_disk():
    """Disk of radius 4 whose raster survives every 15-degree rotation unchanged."""
    yy, xx = np.mgrid[0:64, 0:64]
    disk = (xx - 31.5) ** 2 + (yy - 31.5) ** 2 <= 4**2
    assert all(np.array_equal(rotate_mask(disk, k * math.pi / 12), disk) for k in range(24))
    return disk


def angle_diff(a, b):
    return (a - b + math.pi) % (2 * math.pi) - math.pi


# ---- initialisation -------------------------------------------------------------------


class TestInitialize:
    def test_background_bbox_falls_back_to_mean(self, blob_model):
        _, km, dec, _ = blob_model
        p = paste_scene(gen_shape_set(1, BLOB, WIN, seed=9)[0], (0, 0), (64, 64))
        d = Detection((55.0, 55.0), (50, 50, 60, 60), 1)
        states = initialize_states(SceneInputs(p, [d], {1: WIN}), km, dec)
        np.testing.assert_array_equal(states[0].alpha, np.zeros(km.c))
        assert states[0].kappa == 0.0
        np.testing.assert_array_equal(states[0].center, [55.0, 55.0])

    def test_in_sample_code(self, blob_model):
        masks, km, dec, _ = blob_model
        i = 3
        off = (7, 10)
        p = paste_scene(masks[i], off, (64, 64))
        c = (off[1] + (WIN - 1) / 2, off[0] + (WIN - 1) / 2)
        d = Detection(c, (off[1], off[0], off[1] + WIN - 1, off[0] + WIN - 1), 1)
        states = initialize_states(SceneInputs(p, [d], {1: WIN}), km, dec)
        np.testing.assert_allclose(states[0].alpha, km.train_codes[i], atol=1e-6)

    def test_detection_count_preserved(self, blob_model):
        _, km, dec, _ = blob_model
        t = gen_scene(3, BLOB, seed=1, image_dims=(112, 112), window=WIN)
        states = initialize_states(t.to_inputs(WIN), km, dec)
        assert len(states) == 3
        for s, d in zip(states, t.detections):
            np.testing.assert_array_equal(s.center, d.center)


class TestRotationInit:
    def test_disk_ties_to_zero(self, bar_model):
        km, dec = bar_model
        disk = grid_invariant_disk()
        cfg = InitConfig(use_rotation_init=True)
        assert init_rotation(disk, km, dec, OrientationModel(), cfg) == 0.0

    def test_bar_at_thirty_degrees(self, bar_model):
        km, dec = bar_model
        cfg = InitConfig(use_rotation_init=True, delta_kappa=math.radians(15))
        m = gen_tapered_bar(64, 42, 5, 15, math.radians(30))
        found = init_rotation(m, km, dec, OrientationModel(), cfg)
        assert abs(angle_diff(found, -math.radians(30))) <= math.radians(7.5)

    def test_initial_state_carries_the_turn(self, bar_model):
        km, dec = bar_model
        m = gen_tapered_bar(64, 42, 5, 15, math.radians(60))
        p = np.stack([1.0 - m, m.astype(float)])
        ys, xs = np.nonzero(m)
        d = Detection((31.5, 31.5), (xs.min(), ys.min(), xs.max(), ys.max()), 1)
        cfg = InitConfig(use_rotation_init=True)
        s = initialize_states(SceneInputs(p, [d], {1: 64}), km, dec, cfg)[0]
        assert abs(angle_diff(s.kappa, math.radians(60))) <= math.radians(7.5)

    def test_strong_prior_wins_on_flat_fit(self, bar_model):
        km, dec = bar_model
        disk = grid_invariant_disk()
        mu = 1.0
        ori = OrientationModel("von-mises", mu, 200.0)
        cfg = InitConfig(use_rotation_init=True)
        kappas, e = rotation_energies(disk, km, dec, ori, cfg)
        nearest = kappas[np.argmin(np.abs(angle_diff(kappas, mu)))]
        assert init_rotation(disk, km, dec, ori, cfg) == pytest.approx(nearest)
        assert np.argmin(e) == np.argmin(np.abs(angle_diff(kappas, mu)))

    def test_rotate_mask_identity(self):
        m = gen_tapered_bar(32, 20, 3, 8)
        np.testing.assert_array_equal(rotate_mask(m, 0.0), m)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            InitConfig(delta_kappa=0.0)
        with pytest.raises(ValueError):
            InitConfig(delta_kappa=2.0)


# ---- mask extraction ------------------------------------------------------------------------


class TestAssign:
    def test_argmax_rule(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[1, 1] = 0.9
        b[1, 1] = 0.7
        masks, kept, pruned = assign_pixels([a, b], 0)
        assert masks[0][1, 1] and not masks[1][1, 1]

    def test_tie_goes_to_lower_index(self):
        a = np.full((2, 2), 0.8)
        masks, kept, _ = assign_pixels([a, a.copy()], 1)
        assert kept == [0]
        assert masks[0].all()

    def test_non_overlapping_hard_fields(self):
        a = np.zeros((6, 6))
        b = np.zeros((6, 6))
        a[:3] = 1.0
        b[3:] = 1.0
        masks, kept, pruned = assign_pixels([a, b], 1)
        np.testing.assert_array_equal(masks[0], a >= 0.5)
        np.testing.assert_array_equal(masks[1], b >= 0.5)
        assert pruned == [False, False]

    def test_small_shape_pruned(self):
        a = np.zeros((8, 8))
        b = np.zeros((8, 8))
        a[:4] = 1.0
        b[6, :3] = 1.0  # area 3
        masks, kept, pruned = assign_pixels([a, b], 10)
        assert pruned == [False, True]
        assert kept == [0] and len(masks) == 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.integers(0, 20))
    def test_disjoint(self, n, seed, thr):
        rng = np.random.default_rng(seed)
        fields = rng.random((n, 9, 9))
        masks, kept, pruned = assign_pixels(fields, thr)
        assert len(pruned) == n and len(masks) == len(kept) == n - sum(pruned)
        if masks:
            assert int(np.sum(masks, axis=0).max()) <= 1
        for m, i in zip(masks, kept):
            assert np.all(fields[i][m] >= 0.5)


# ---- evolution --------------------------------------------------------------------------------


def small_scene(seed, n=1, jitter=3.0, shift=(0, 0)):
    t = gen_scene(n, BLOB, overlap_target=0.1, noise_level=0.0, jitter=jitter, seed=seed,
                  image_dims=(80, 80), window=WIN, p_range=(0.05, 0.95))
    if shift != (0, 0):
        dy, dx = shift
        p = np.roll(t.p_sem, (dy, dx), axis=(1, 2))
        dets = [Detection((d.center[0] + dx, d.center[1] + dy),
                          (d.bbox[0] + dx, d.bbox[1] + dy, d.bbox[2] + dx, d.bbox[3] + dy), 1) for d in t.detections]
        t.gt_masks = [np.roll(g, (dy, dx), axis=(0, 1)) for g in t.gt_masks]
        t.p_sem, t.detections = p, dets
    return t


class TestEvolution:
    def test_converged_at_entry(self, blob_model):
        _, km, dec, models = blob_model
        inp = small_scene(0).to_inputs(WIN)
        states = initialize_states(inp, km, dec)
        res = run_evolution(states, models, inp, EnergyWeights(), SMOOTH, EvolveConfig(grad_tolerance=1e12))
        assert res.n_iter == 0 and res.status == "converged"
        assert len(res.trace) == 1
        for a, b in zip(res.states, states):
            np.testing.assert_array_equal(a.center, b.center)
            np.testing.assert_array_equal(a.alpha, b.alpha)

    def test_zero_budget(self, blob_model):
        _, km, dec, models = blob_model
        inp = small_scene(0).to_inputs(WIN)
        states = initialize_states(inp, km, dec)
        res = run_evolution(states, models, inp, EnergyWeights(), SMOOTH, EvolveConfig(max_iterations=0))
        assert res.n_iter == 0 and res.status == "max_iterations"

    def test_recovery_and_monotone_trace(self, blob_model):
        _, km, dec, models = blob_model
        t = small_scene(2)
        res = segment(t.to_inputs(WIN), km, models, EnergyWeights(), SMOOTH)
        assert res.status in ("converged", "max_iterations", "line_search_failed")
        assert np.all(np.diff(res.trace) <= 1e-10 * np.maximum(1.0, np.abs(res.trace[:-1])))
        assert res.trace[-1] < res.trace[0]
        assert iou(res.masks[0], t.gt_masks[0]) >= 0.9

    def test_masks_disjoint_and_in_image(self, blob_model):
        _, km, dec, models = blob_model
        t = small_scene(4, n=2, jitter=2.0)
        res = segment(t.to_inputs(WIN), km, models, EnergyWeights(), SMOOTH, evolve_cfg=EvolveConfig(max_iterations=60))
        assert len(res.pruned) == 2
        assert int(np.sum(res.masks, axis=0).max()) <= 1
        assert all(m.shape == (80, 80) for m in res.masks)

    def test_deterministic(self, blob_model):
        _, km, dec, models = blob_model
        inp = small_scene(6).to_inputs(WIN)
        cfg = EvolveConfig(max_iterations=40)
        a = segment(inp, km, models, EnergyWeights(), SMOOTH, evolve_cfg=cfg)
        b = segment(inp, km, models, EnergyWeights(), SMOOTH, evolve_cfg=cfg)
        assert a.trace == b.trace
        for x, y in zip(a.states, b.states):
            assert x.center.tobytes() == y.center.tobytes() and x.alpha.tobytes() == y.alpha.tobytes()
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)

    def test_translation_equivariant(self, blob_model):
        _, km, dec, models = blob_model
        cfg = EvolveConfig(max_iterations=40)
        base = segment(small_scene(3).to_inputs(WIN), km, models, EnergyWeights(), SMOOTH, evolve_cfg=cfg)
        moved = segment(small_scene(3, shift=(2, -3)).to_inputs(WIN), km, models, EnergyWeights(), SMOOTH,
                        evolve_cfg=cfg)
        assert len(base.masks) == len(moved.masks) == 1
        np.testing.assert_array_equal(np.roll(base.masks[0], (2, -3), axis=(0, 1)), moved.masks[0])

    def test_extract_matches_fields(self, blob_model):
        _, km, dec, models = blob_model
        inp = small_scene(1).to_inputs(WIN)
        states = initialize_states(inp, km, dec)
        res = extract_instance_masks(states, models, inp, SMOOTH)
        f = composite_field(states, dec, SMOOTH, inp.image_dims)[0]
        np.testing.assert_array_equal(res.masks[0], f >= 0.5)

    def test_no_shapes(self, blob_model):
        _, _, _, models = blob_model
        inp = SceneInputs(np.stack([np.full((50, 50), 0.9), np.full((50, 50), 0.1)]), [], {1: WIN})
        res = run_evolution([], models, inp)
        assert res.masks == [] and res.pruned == []

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            EvolveConfig(lbfgs_memory=0)
        with pytest.raises(ValueError):
            EvolveConfig(grad_tolerance=0.0)
