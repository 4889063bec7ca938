"""Scene inputs and the on-disk scene format.

A scene directory holds ``scene.json`` (detections, class table, window
sizes and optional energy/smoothing overrides) next to one CFT1 grid per
class with the semantic probabilities ``P_sem(c | pixel)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .tensorio import FormatError


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float]  # (x, y) pixels
    bbox: tuple[float, float, float, float]  # (x0, y0, x1, y1), inclusive pixel-centre bounds
    class_id: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.class_id < 1:
            raise ValueError("detections must name a foreground class (id >= 1)")


@dataclass
class SceneInputs:
    """Semantic probabilities (class 0 is background) plus detections."""

    p_sem: np.ndarray  # (n_classes, H, W)
    detections: list[Detection]
    window_sizes: dict[int, int]
    classes: list[str] = field(default_factory=lambda: ["background", "object"])
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p_sem = np.asarray(self.p_sem, dtype=np.float64)
        if self.p_sem.ndim != 3 or self.p_sem.shape[0] < 2:
            raise ValueError("p_sem must have shape (n_classes >= 2, H, W)")
        if not np.all(np.isfinite(self.p_sem)):
            raise ValueError("p_sem contains non-finite values")
        total = self.p_sem.sum(axis=0)
        if np.max(np.abs(total - 1.0)) > 1e-4:
            raise ValueError("per-pixel class probabilities must sum to 1")
        h, w = self.image_dims
        for cls, d in self.window_sizes.items():
            if d > min(h, w):
                raise ValueError(f"window size {d} for class {cls} exceeds the image")
        for det in self.detections:
            x, y = det.center
            if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                raise ValueError(f"detection centre {det.center} lies outside the image")
            if det.class_id >= self.n_classes:
                raise ValueError(f"detection class {det.class_id} not in class table")

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.p_sem.shape[1], self.p_sem.shape[2]

    @property
    def n_classes(self) -> int:
        return self.p_sem.shape[0]

    def window_for(self, class_id: int) -> int:
        return self.window_sizes[class_id]


@dataclass
class ShapeState:
    center: np.ndarray  # (x, y)
    kappa: float
    alpha: np.ndarray
    class_id: int = 1

    def copy(self) -> "ShapeState":
        return ShapeState(np.array(self.center, dtype=np.float64), float(self.kappa),
                          np.array(self.alpha, dtype=np.float64), self.class_id)

    def to_json(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "kappa": float(self.kappa) % (2 * math.pi),
            "alpha": [float(v) for v in self.alpha],
            "class_id": int(self.class_id),
        }


def save_scene(scene: SceneInputs, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grids = []
    for k in range(scene.n_classes):
        name = f"p_sem_{k}.cft"
        tensorio.write_tensor(directory / name, scene.p_sem[k])
        grids.append(name)
    h, w = scene.image_dims
    doc = {
        "image": {"height": h, "width": w},
        "classes": scene.classes,
        "p_sem": grids,
        "window_sizes": {str(k): int(v) for k, v in sorted(scene.window_sizes.items())},
        "detections": [
            {"center": list(map(float, d.center)), "bbox": list(map(float, d.bbox)), "class_id": d.class_id}
            for d in scene.detections
        ],
    }
    doc.update(scene.overrides)
    path = directory / "scene.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_scene(path: str | Path) -> SceneInputs:
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene file {path}: {exc}") from exc
    try:
        grids = [tensorio.read_tensor(path.parent / name).astype(np.float64) for name in doc["p_sem"]]
        p_sem = np.stack(grids)
        # stored as float32: renormalise so rows sum to one in float64
        p_sem = p_sem / p_sem.sum(axis=0, keepdims=True)
        dets = [Detection(tuple(d["center"]), tuple(d["bbox"]), int(d["class_id"])) for d in doc["detections"]]
        windows = {int(k): int(v) for k, v in doc["window_sizes"].items()}
        overrides = {k: doc[k] for k in ("weights", "smooth", "location", "orientation") if k in doc}
        return SceneInputs(p_sem, dets, windows, list(doc.get("classes", [])), overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed scene file {path}: {exc}") from exc
