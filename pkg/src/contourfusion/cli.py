"""Command-line entry point: ``contourfusion <command> [options]``.

Every command accepts ``--config FILE`` and ``--seed N`` and writes a
``run_manifest.json`` next to its outputs. Exit codes: 0 success, 2 usage or
configuration error, 3 bad input data, 4 failed numerical check.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__, gradcheck, tensorio
from .config import Config, ConfigError, load_config
from .decoder import DeepDecoderSpec, TrainConfig, linear_from_kpca, load_weights, save_weights, train_decoder
from .energy import EnergyModels, EnergyWeights, LocationModel, OrientationModel
from .evolve import EvolveConfig, InitConfig, segment
from .grid import DimensionError, SmoothParams
from .metrics import iou, match_instances, weighted_iou
from .scene import load_scene, save_scene
from .shape_model import KernelError, ShapeKernelSpec, fit_kde, fit_kpca, load_bundle, save_bundle
from .synth import BlobParams, GenerationError, gen_scene, gen_shape_set
from .tensorio import FormatError

log = logging.getLogger("contourfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
PR_THRESHOLDS = [round(0.5 + 0.05 * k, 2) for k in range(10)]


class NumericalError(RuntimeError):
    pass


# ---- shared helpers --------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digests(inputs: dict[str, Path]) -> dict[str, str]:
    """SHA-256 of every input file; earlier run manifests are skipped (they hold timings)."""
    out = {}
    for label, p in sorted(inputs.items()):
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST):
                out[f"{label}/{f.relative_to(p).as_posix()}"] = _sha256(f)
        elif p.is_file():
            out[label] = _sha256(p)
    return out


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, cfg: Config, inputs: dict[str, Path], seed: int, t0: float) -> None:
    _dump_json(out / MANIFEST, {
        "command": command,
        "config": cfg.snapshot(),
        "inputs": _digests(inputs),
        "seed": seed,
        "version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    })


def _read_masks(directory: Path, pattern: str) -> list[np.ndarray]:
    files = sorted(directory.glob(pattern))
    masks = []
    for f in files:
        a = tensorio.read_tensor(f)
        if a.ndim != 2:
            raise FormatError(f"{f}: expected a 2-D mask, got shape {a.shape}")
        masks.append(a > 0.5)
    return masks


def _write_masks(directory: Path, masks, prefix: str) -> list[str]:
    names = []
    for k, m in enumerate(masks):
        name = f"{prefix}_{k:03d}.cft"
        tensorio.write_tensor(directory / name, np.asarray(m, dtype=np.float32))
        names.append(name)
    return names


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# ---- fit-shape-model ----------------------------------------------------------------------


def cmd_fit_shape_model(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    masks_dir, out = Path(args.masks), Path(args.out)
    if not masks_dir.is_dir():
        raise FormatError(f"mask directory {masks_dir} does not exist")
    masks = _read_masks(masks_dir, "*.cft")
    if len(masks) < 2:
        raise ValueError("need at least 2 shapes")
    clamp = cfg["shape-model.clamp"] or float(max(masks[0].shape))
    spec = ShapeKernelSpec(cfg["shape-model.kernel"], cfg["shape-model.rbf_scale"], clamp)
    c = min(cfg["shape-model.components"], len(masks) - 1)
    model = fit_kpca(masks, spec, c)
    prior = fit_kde(model.train_codes, cfg["kde.sigma"])
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(model, prior, out)
    write_manifest(out, "fit-shape-model", cfg, {"masks": masks_dir}, args.seed, t0)
    log.info("fitted %d components to %d masks -> %s", c, len(masks), out)
    return EXIT_OK


# ---- train-decoder ---------------------------------------------------------------------------


def auto_d0(d_out: int, limit: int = 8) -> int:
    """Largest extent ``d_out / 2**u`` (u >= 1) that is an integer not above ``limit``."""
    u = 1
    while d_out % 2**u == 0:
        if d_out // 2**u <= limit:
            return d_out // 2**u
        u += 1
    raise ValueError(f"window size {d_out} has no initial extent d_out / 2**u <= {limit}")


def cmd_train_decoder(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    model_dir, out = Path(args.model), Path(args.out)
    model, _ = load_bundle(model_dir)
    history: list[float] = []
    if args.variant == "linear":
        weights = linear_from_kpca(model)
    else:
        h, w = model.dims
        if h != w:
            raise DimensionError("the deep decoder needs square shape windows")
        d0 = cfg["decoder-spec.d0"] or auto_d0(h)
        spec = DeepDecoderSpec(model.c, cfg["decoder-spec.d_f"], cfg["decoder-spec.n_conv0"], d0, h)
        masks = model.train_phi.reshape(-1, h, w) > 0
        tc = TrainConfig(learning_rate=cfg["train.learning_rate"], epochs=cfg["train.epochs"],
                         batch_size=cfg["train.batch_size"], rng_seed=args.seed)
        weights, history = train_decoder(spec, list(zip(model.train_codes, masks)), tc,
                                         log=lambda e, l: log.debug("epoch %d loss %.6f", e, l))
        if not all(math.isfinite(v) for v in history):
            raise NumericalError("training loss became non-finite")
    out.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "loss"])
    for e, v in enumerate(history):
        wr.writerow([e, repr(float(v))])
    (out / "loss.csv").write_text(buf.getvalue())
    write_manifest(out, "train-decoder", cfg, {"model": model_dir}, args.seed, t0)
    log.info("%s decoder -> %s", args.variant, out)
    return EXIT_OK


# ---- synth --------------------------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    if args.n_scenes < 1:
        raise ValueError("--n-scenes must be >= 1")
    out = Path(args.out)
    blob = BlobParams(cfg["synth.base_radius"], cfg["synth.n_harmonics"], cfg["synth.harmonic_amp"])
    win, side = cfg["synth.window"], cfg["synth.image"]
    shapes_dir = out / "shapes"
    shapes_dir.mkdir(parents=True, exist_ok=True)
    shapes = gen_shape_set(cfg["synth.n_train_shapes"], blob, win, seed=_sub_seed(args.seed, 0))
    _write_masks(shapes_dir, shapes, "mask")
    for k in range(args.n_scenes):
        truth = gen_scene(cfg["synth.n_shapes"], blob, cfg["synth.overlap"], cfg["synth.noise"], cfg["synth.jitter"],
                          seed=_sub_seed(args.seed, 1, k), image_dims=(side, side), window=win,
                          p_range=(cfg["synth.p_low"], cfg["synth.p_high"]))
        name = f"scene_{k:04d}"
        save_scene(truth.to_inputs(win), out / "scenes" / name)
        gt_dir = out / "gt" / name
        gt_dir.mkdir(parents=True, exist_ok=True)
        _write_masks(gt_dir, truth.gt_masks, "instance")
    write_manifest(out, "synth", cfg, {}, args.seed, t0)
    log.info("wrote %d scenes and %d training shapes -> %s", args.n_scenes, len(shapes), out)
    return EXIT_OK


# ---- segment ------------------------------------------------------------------------------------


_OVERRIDE_SECTIONS = {"weights": "energy-weights", "smooth": "smooth", "location": "location",
                      "orientation": "orientation"}


def scene_config(cfg: Config, overrides: dict) -> Config:
    """Apply the optional per-scene parameter blocks of a scene file on top of ``cfg``."""
    out = Config(cfg)
    for block, section in _OVERRIDE_SECTIONS.items():
        for k, v in overrides.get(block, {}).items():
            key = f"{section}.{k}"
            if key not in out:
                raise FormatError(f"unknown scene override {block}.{k}")
            out.update_from({key: str(v)})
    return out


def overlay_ppm(p_fg: np.ndarray, masks, seed: int) -> bytes:
    """Foreground probability in grey with each instance outlined in its own random colour."""
    grey = np.clip(np.rint(255 * p_fg), 0, 255).astype(np.uint8)
    img = np.repeat(grey[:, :, None], 3, axis=2)
    rng = np.random.default_rng(seed)
    for m in masks:
        colour = rng.integers(64, 256, size=3).astype(np.uint8)
        edge = m & ~ndimage.binary_erosion(m)
        img[edge] = colour
    h, w = grey.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def _segment_one(job) -> dict:
    scene_path, model_dir, weights_dir, out, cfg, seed = job
    scene = load_scene(scene_path)
    cfg = scene_config(cfg, scene.overrides)
    kpca, prior = load_bundle(model_dir)
    dec = load_weights(weights_dir)
    for cls in {d.class_id for d in scene.detections}:
        d = scene.window_for(cls)
        if dec.out_dims != (d, d):
            raise DimensionError(f"decoder output {dec.out_dims} does not match window size {d} of class {cls}")
    delta = cfg["smooth.delta"] if dec.variant == "linear" else cfg["smooth.delta_deep"]
    smooth = SmoothParams(delta, cfg["smooth.gamma"], cfg["smooth.variant"])
    models = EnergyModels(dec, prior, LocationModel(cfg["location.sigma"]),
                          OrientationModel(cfg["orientation.kind"], cfg["orientation.mu"],
                                           cfg["orientation.concentration"]))
    weights = EnergyWeights(cfg["energy-weights.shape"], cfg["energy-weights.location"],
                            cfg["energy-weights.orientation"], cfg["energy-weights.overlap"])
    init = InitConfig(cfg["init.use_rotation_init"], math.radians(cfg["init.delta_kappa_deg"]),
                      cfg["init.min_init_pixels"], cfg["init.rot_prior_weight"], cfg["init.rot_fit_weight"])
    evo = EvolveConfig(cfg["optimizer.max_iterations"], cfg["optimizer.grad_tolerance"], cfg["optimizer.memory"],
                       cfg["optimizer.empty_shape_area"], cfg["optimizer.optimize_rotation"])
    res = segment(scene, kpca, models, weights, smooth, init, evo)
    if not all(math.isfinite(v) for v in res.trace):
        raise NumericalError(f"non-finite energy while segmenting {scene_path}")
    if len(res.masks) > 1 and int(np.sum(res.masks, axis=0).max()) > 1:
        raise NumericalError("instance masks overlap")
    out.mkdir(parents=True, exist_ok=True)
    names = _write_masks(out, res.masks, "instance")
    p_fg = 1.0 - scene.p_sem[0]
    (out / "overlay.ppm").write_bytes(overlay_ppm(p_fg, res.masks, seed))
    _dump_json(out / "result.json", {
        "status": res.status,
        "n_iter": res.n_iter,
        "trace": res.trace,
        "final_energy": res.trace[-1] if res.trace else None,
        "states": [s.to_json() for s in res.states],
        "pruned": res.pruned,
        "instances": [{"file": n, "state": i, "area": int(m.sum())} for n, i, m in zip(names, res.kept, res.masks)],
    })
    return {"status": res.status, "n_instances": len(res.masks)}


def _scene_jobs(scene_arg: Path) -> list[tuple[str, Path]]:
    """``(name, scene.json)`` pairs: a single scene file/directory or a corpus of scene directories."""
    if scene_arg.is_file():
        return [("", scene_arg)]
    if (scene_arg / "scene.json").is_file():
        return [("", scene_arg / "scene.json")]
    if scene_arg.is_dir():
        subs = sorted(p for p in scene_arg.iterdir() if (p / "scene.json").is_file())
        if subs:
            return [(p.name, p / "scene.json") for p in subs]
    raise FormatError(f"no scene found at {scene_arg}")


def cmd_segment(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    scene_arg, out = Path(args.scene), Path(args.out)
    model_dir, weights_dir = Path(args.model), Path(args.weights)
    scenes = _scene_jobs(scene_arg)
    jobs = [(p, model_dir, weights_dir, out / name if name else out, cfg, _sub_seed(args.seed, k))
            for k, (name, p) in enumerate(scenes)]
    workers = args.workers if args.workers is not None else cfg["run.workers"]
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_segment_one, jobs))
    else:
        summaries = [_segment_one(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"scene": scene_arg, "model": model_dir, "weights": weights_dir}
    write_manifest(out, "segment", cfg, inputs, args.seed, t0)
    for (name, _), s in zip(scenes, summaries):
        log.info("%s: %d instances (%s)", name or scene_arg, s["n_instances"], s["status"])
    return EXIT_OK


# ---- eval -----------------------------------------------------------------------------------------


def _scene_dirs(root: Path) -> list[str]:
    if any(root.glob("instance_*.cft")):
        return [""]
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def evaluate(pred_root: Path, gt_root: Path, eps_d: float, iou_min: float) -> tuple[dict, list[list]]:
    """Per-scene and pooled scores plus a precision/recall table over IoU thresholds."""
    if not gt_root.is_dir() or not pred_root.is_dir():
        raise FormatError("--pred and --gt must be directories")
    names = _scene_dirs(gt_root)
    if not names:
        raise FormatError(f"no ground-truth scenes under {gt_root}")
    scenes, pairs = [], []
    for name in names:
        gts = _read_masks(gt_root / name, "instance_*.cft")
        pd = pred_root / name
        preds = _read_masks(pd, "instance_*.cft") if pd.is_dir() else []
        for m in preds:
            if gts and m.shape != gts[0].shape:
                raise DimensionError(f"prediction in {pd} has shape {m.shape}, ground truth {gts[0].shape}")
        rep = match_instances(preds, gts, iou_min)
        matched = {j: i for i, j, _ in rep.matches}
        ious = [iou(preds[matched[j]], g) if j in matched else 0.0 for j, g in enumerate(gts)]
        wious = [weighted_iou(preds[matched[j]], g, eps_d) if j in matched else 0.0 for j, g in enumerate(gts)]
        scenes.append({"scene": name or ".", "n_pred": len(preds), "n_gt": len(gts), "n_matched": len(rep.matches),
                       "precision": rep.precision, "recall": rep.recall, "ious": ious, "weighted_ious": wious})
        pairs.append((preds, gts))
    n_pred = sum(s["n_pred"] for s in scenes)
    n_gt = sum(s["n_gt"] for s in scenes)
    n_match = sum(s["n_matched"] for s in scenes)
    all_iou = [v for s in scenes for v in s["ious"]]
    all_wiou = [v for s in scenes for v in s["weighted_ious"]]
    report = {
        "eps_d": eps_d,
        "iou_min": iou_min,
        "n_scenes": len(scenes),
        "precision": n_match / n_pred if n_pred else float(n_gt == 0),
        "recall": n_match / n_gt if n_gt else float(n_pred == 0),
        "mean_iou": float(np.mean(all_iou)) if all_iou else 1.0,
        "mean_weighted_iou": float(np.mean(all_wiou)) if all_wiou else 1.0,
        "scenes": scenes,
    }
    rows = []
    for t in PR_THRESHOLDS:
        m = sum(len(match_instances(p, g, t).matches) for p, g in pairs)
        rows.append([t, m / n_pred if n_pred else float(n_gt == 0), m / n_gt if n_gt else float(n_pred == 0)])
    return report, rows


def cmd_eval(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    eps_d = args.eps_d if args.eps_d is not None else cfg["eval.eps_d"]
    iou_min = args.iou_min if args.iou_min is not None else cfg["eval.iou_min"]
    if not eps_d > 0 or not 0 < iou_min <= 1:
        raise ValueError("--eps-d must be > 0 and --iou-min in (0, 1]")
    pred, gt = Path(args.pred), Path(args.gt)
    report, rows = evaluate(pred, gt, eps_d, iou_min)
    summary = {k: report[k] for k in ("n_scenes", "precision", "recall", "mean_iou", "mean_weighted_iou")}
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "eval_report.json", report)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iou_min", "precision", "recall"])
        for t, p, r in rows:
            wr.writerow([t, repr(float(p)), repr(float(r))])
        (out / "pr_curve.csv").write_text(buf.getvalue())
        write_manifest(out, "eval", cfg, {"pred": pred, "gt": gt}, args.seed, t0)
    return EXIT_OK


# ---- gradcheck ------------------------------------------------------------------------------------


def cmd_gradcheck(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    ok, report = gradcheck.run_all(args.seed, log=lambda m: log.info("%s", m))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "gradcheck_report.json", report)
        write_manifest(out, "gradcheck", cfg, {}, args.seed, t0)
    if not ok:
        raise NumericalError("gradient check failed")
    return EXIT_OK


# ---- entry point ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contourfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-shape-model", parents=[common], help="fit kernel PCA and the code prior to masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_shape_model)

    p = sub.add_parser("train-decoder", parents=[common], help="build a linear or train a deep decoder")
    p.add_argument("--model", required=True)
    p.add_argument("--variant", choices=("linear", "deep"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus with ground truth")
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", parents=[common], help="segment one scene or a corpus of scenes")
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="score predicted instances against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--eps-d", type=float, default=None)
    p.add_argument("--iou-min", type=float, default=None)
    p.add_argument("--out", default=None, help="also write eval_report.json and pr_curve.csv here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all gradients")
    p.add_argument("--out", default=None, help="also write gradcheck_report.json here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        log.error("error: %s", exc)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("error: %s", exc)
        return EXIT_USAGE
    except NumericalError as exc:
        log.error("numerical check failed: %s", exc)
        return EXIT_NUMERICAL
    except (FormatError, KernelError, GenerationError, DimensionError, ValueError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
