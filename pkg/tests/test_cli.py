import json
from pathlib import Path

import numpy as np
import pytest

from contourfusion import tensorio
from contourfusion.cli import MANIFEST, auto_d0, main, overlay_ppm
from contourfusion.config import DEFAULTS, Config, ConfigError, describe, load_config, parse_text
from contourfusion.shape_model import load_bundle
from contourfusion.synth import BlobParams, gen_shape_set

SMALL = """
synth.n_train_shapes = 20
synth.n_shapes = 2
synth.image = 96
synth.window = 48
synth.base_radius = 10
shape-model.components = 6
optimizer.max_iterations = 30
"""


def write_masks(d: Path, masks):
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(masks):
        tensorio.write_tensor(d / f"m{k:02d}.cft", m.astype(np.float32))


def tree_bytes(root: Path) -> dict[str, bytes]:
    """All output files; the manifest is compared without its wall-clock field."""
    out = {}
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        data = f.read_bytes()
        if f.name == MANIFEST:
            doc = json.loads(data)
            doc.pop("wall_clock_seconds")
            data = json.dumps(doc, sort_keys=True).encode()
        out[f.relative_to(root).as_posix()] = data
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> fit -> linear decoder -> segment, once for the module."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    c = ["--config", str(cfg)]
    assert main(["synth", "--n-scenes", "2", "--out", str(root / "corpus"), *c]) == 0
    assert main(["fit-shape-model", "--masks", str(root / "corpus/shapes"), "--out", str(root / "model"), *c]) == 0
    assert main(["train-decoder", "--model", str(root / "model"), "--variant", "linear",
                 "--out", str(root / "lin"), *c]) == 0
    assert main(["segment", "--scene", str(root / "corpus/scenes"), "--model", str(root / "model"),
                 "--weights", str(root / "lin"), "--out", str(root / "pred"), *c]) == 0
    return root, c


# ---- config ------------------------------------------------------------------------------------


class TestConfig:
    def test_defaults_documented(self):
        cfg = Config.defaults()
        assert set(cfg) == set(DEFAULTS)
        assert all(DEFAULTS[k].doc for k in DEFAULTS)
        assert cfg["optimizer.memory"] == 10 and cfg["train.batch_size"] == 64

    def test_parse_and_types(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nsmooth.gamma = 20  # sharper\noptimizer.optimize_rotation = yes\nkde.sigma = auto\n")
        cfg = load_config(p)
        assert cfg["smooth.gamma"] == 20.0
        assert cfg["optimizer.optimize_rotation"] is True
        assert cfg["kde.sigma"] is None

    def test_describe_round_trips(self):
        cfg = Config.defaults().update_from(parse_text(describe()))
        assert cfg == Config.defaults()

    @pytest.mark.parametrize("text", ["nope.key = 1", "smooth.gamma", "optimizer.memory = 2.5",
                                      "smooth.gamma = 1\nsmooth.gamma = 2", "smooth.delta = nan"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            Config.defaults().update_from(parse_text(text))

    def test_unknown_key_exit_code(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("smooth.wobble = 3\n")
        assert main(["gradcheck", "--config", str(p)]) == 2


# ---- usage --------------------------------------------------------------------------------------


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["segment", "--scene", "x"]) == 2
    assert main(["train-decoder", "--model", "m", "--variant", "cubic", "--out", "o"]) == 2


def test_auto_d0():
    assert auto_d0(96) == 6
    assert auto_d0(64) == 8
    assert auto_d0(16) == 8
    with pytest.raises(ValueError):
        auto_d0(18)


def test_overlay_header():
    m = np.zeros((5, 7), bool)
    m[1:4, 2:5] = True
    data = overlay_ppm(np.full((5, 7), 0.5), [m], 0)
    assert data.startswith(b"P6\n7 5\n255\n")
    assert len(data) == len(b"P6\n7 5\n255\n") + 5 * 7 * 3


# ---- fit-shape-model ----------------------------------------------------------------------------


class TestFitShapeModel:
    def test_two_masks_one_component(self, tmp_path):
        write_masks(tmp_path / "m", gen_shape_set(2, BlobParams(5), 16, seed=1))
        assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / "b")]) == 0
        model, _ = load_bundle(tmp_path / "b")
        assert model.c == 1
        assert (tmp_path / "b" / MANIFEST).is_file()

    def test_one_mask(self, tmp_path, capsys):
        write_masks(tmp_path / "m", gen_shape_set(1, BlobParams(5), 16))
        assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / "b")]) == 3
        assert "need at least 2 shapes" in capsys.readouterr().err

    def test_malformed_mask_named(self, tmp_path, capsys):
        write_masks(tmp_path / "m", gen_shape_set(3, BlobParams(5), 16))
        (tmp_path / "m" / "m01.cft").write_bytes(b"CFT1junk")
        assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / "b")]) == 3
        assert "m01.cft" in capsys.readouterr().err

    def test_rerun_identical(self, tmp_path):
        write_masks(tmp_path / "m", gen_shape_set(6, BlobParams(5), 16, seed=3))
        for name in ("a", "b"):
            assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


# ---- train-decoder ----------------------------------------------------------------------------


class TestTrainDecoder:
    @pytest.fixture
    def toy_model(self, tmp_path):
        write_masks(tmp_path / "m", gen_shape_set(20, BlobParams(5), 16, seed=2))
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("shape-model.components = 4\ndecoder-spec.d0 = 2\ndecoder-spec.n_conv0 = 16\n"
                       "train.epochs = 50\ntrain.learning_rate = 1e-3\n")
        assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / "b"),
                     "--config", str(cfg)]) == 0
        return tmp_path, str(cfg)

    def test_linear_needs_no_training(self, toy_model):
        root, cfg = toy_model
        assert main(["train-decoder", "--model", str(root / "b"), "--variant", "linear", "--out", str(root / "w"),
                     "--config", cfg]) == 0
        assert (root / "w" / "loss.csv").read_text() == "epoch,loss\n"
        assert json.loads((root / "w" / "manifest.json").read_text())["variant"] == "linear"

    def test_deep_fifty_epochs(self, toy_model):
        root, cfg = toy_model
        assert main(["train-decoder", "--model", str(root / "b"), "--variant", "deep", "--out", str(root / "w"),
                     "--config", cfg]) == 0
        rows = (root / "w" / "loss.csv").read_text().splitlines()[1:]
        assert len(rows) == 50
        losses = [float(r.split(",")[1]) for r in rows]
        assert losses[-1] < losses[0]

    def test_missing_bundle(self, tmp_path):
        assert main(["train-decoder", "--model", str(tmp_path / "none"), "--variant", "linear",
                     "--out", str(tmp_path / "w")]) == 3


# ---- synth / segment / eval ----------------------------------------------------------------------


class TestPipeline:
    def test_outputs(self, pipeline):
        root, _ = pipeline
        assert sorted(p.name for p in (root / "pred").iterdir()) == [MANIFEST, "scene_0000", "scene_0001"]
        res = json.loads((root / "pred/scene_0000/result.json").read_text())
        assert res["status"] in ("converged", "max_iterations", "line_search_failed")
        assert len(res["states"]) == 2
        masks = [tensorio.read_tensor(root / "pred/scene_0000" / i["file"]) > 0.5 for i in res["instances"]]
        assert int(np.sum(masks, axis=0).max()) <= 1
        assert (root / "pred/scene_0000/overlay.ppm").read_bytes().startswith(b"P6\n96 96\n255\n")
        man = json.loads((root / "pred" / MANIFEST).read_text())
        assert man["command"] == "segment" and man["seed"] == 0
        assert any(k.startswith("scene/scene_0000/") for k in man["inputs"])

    def test_eval_round_trip(self, pipeline, capsys):
        root, c = pipeline
        assert main(["eval", "--pred", str(root / "pred"), "--gt", str(root / "corpus/gt"),
                     "--out", str(root / "ev"), *c]) == 0
        rep = json.loads((root / "ev/eval_report.json").read_text())
        assert rep["n_scenes"] == 2 and rep["mean_iou"] > 0.7
        pr = (root / "ev/pr_curve.csv").read_text().splitlines()
        assert pr[0] == "iou_min,precision,recall" and len(pr) == 11

    def test_eval_identical(self, pipeline, capsys):
        root, _ = pipeline
        assert main(["eval", "--pred", str(root / "corpus/gt"), "--gt", str(root / "corpus/gt")]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["mean_iou"] == 1.0 and summary["precision"] == 1.0 and summary["recall"] == 1.0

    def test_single_scene_and_workers(self, pipeline, tmp_path):
        root, c = pipeline
        args = ["--model", str(root / "model"), "--weights", str(root / "lin"), *c]
        assert main(["segment", "--scene", str(root / "corpus/scenes/scene_0001/scene.json"),
                     "--out", str(tmp_path / "one"), *args]) == 0
        assert (tmp_path / "one/result.json").is_file()
        assert main(["segment", "--scene", str(root / "corpus/scenes"), "--out", str(tmp_path / "par"),
                     "--workers", "2", *args]) == 0
        a, b = tree_bytes(root / "pred"), tree_bytes(tmp_path / "par")
        a.pop(MANIFEST), b.pop(MANIFEST)
        assert a == b

    def test_scene_override(self, pipeline, tmp_path):
        root, c = pipeline
        import shutil
        shutil.copytree(root / "corpus/scenes/scene_0000", tmp_path / "s")
        doc = json.loads((tmp_path / "s/scene.json").read_text())
        doc["weights"] = {"bogus": 1}
        (tmp_path / "s/scene.json").write_text(json.dumps(doc))
        assert main(["segment", "--scene", str(tmp_path / "s"), "--model", str(root / "model"),
                     "--weights", str(root / "lin"), "--out", str(tmp_path / "o"), *c]) == 3

    def test_window_mismatch(self, pipeline, tmp_path):
        root, c = pipeline
        write_masks(tmp_path / "m", gen_shape_set(4, BlobParams(5), 16, seed=3))
        assert main(["fit-shape-model", "--masks", str(tmp_path / "m"), "--out", str(tmp_path / "b")]) == 0
        assert main(["train-decoder", "--model", str(tmp_path / "b"), "--variant", "linear",
                     "--out", str(tmp_path / "w")]) == 0
        assert main(["segment", "--scene", str(root / "corpus/scenes"), "--model", str(tmp_path / "b"),
                     "--weights", str(tmp_path / "w"), "--out", str(tmp_path / "o"), *c]) == 3


def test_gradcheck_exit_zero(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    rep = json.loads((tmp_path / "g/gradcheck_report.json").read_text())
    assert rep["passed"] and len(rep["energy"]) == 5
