"""Compositional pixel checker over the shapes world.

Images are snapped to the palette (plus black background), split into
4-connected single-color components, and each component above a minimum
area becomes a detected object: its color, a shape from the bounding-box fill
ratio, and a grid cell from its centroid.  Six category checks mirror the
column layout of GenEval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from jmini.data.scenes import (BACKGROUND, CATEGORIES, GRID, PALETTE, SceneObject, ShapesSceneSpec, grid_geometry,
                               holds, random_spec, render)
from jmini.inference import SamplerConfig
from jmini.text import COLOR_NAMES, SHAPES

COLUMNS = {
    "single_object": "Single Obj.", "two_objects": "Two Obj.", "counting": "Counting",
    "colors": "Colors", "position": "Position", "color_attribution": "Color Attri.",
}
_COLORS = np.array([BACKGROUND] + [PALETTE[c] for c in COLOR_NAMES], np.float32)
MIN_AREA = 12
# greedy ids with light guidance: scores the model's most likely image per prompt
EVAL_SAMPLER = SamplerConfig(top_k=1, cfg_scale=2.0)


@dataclass(frozen=True)
class ShapeThresholds:
    triangle_circle: float
    circle_square: float

    def classify(self, fill: float) -> str:
        if fill < self.triangle_circle:
            return "triangle"
        if fill < self.circle_square:
            return "circle"
        return "square"


def load_thresholds() -> ShapeThresholds:
    data = json.loads(resources.files("jmini").joinpath("shape_thresholds.json").read_text())
    return ShapeThresholds(data["triangle_circle"], data["circle_square"])


@dataclass(frozen=True)
class Detection:
    color: str
    shape: str
    area: int
    fill: float
    centroid: tuple[float, float]  # (y, x)
    cell: tuple[int, int]


def palette_labels(img: np.ndarray) -> np.ndarray:
    """Per-pixel index into [background, *palette]."""
    d = ((np.asarray(img, np.float32)[:, :, None, :] - _COLORS[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def components(img: np.ndarray, min_area: int = MIN_AREA):
    """Yield ``(color, mask)`` for every single-color component of at least ``min_area`` pixels."""
    labels = palette_labels(img)
    for k, color in enumerate(COLOR_NAMES, start=1):
        lab, n = ndimage.label(labels == k)
        for j in range(1, n + 1):
            m = lab == j
            if m.sum() >= min_area:
                yield color, m


def detect_objects(img: np.ndarray, thresholds: ShapeThresholds | None = None,
                   min_area: int = MIN_AREA) -> list[Detection]:
    thresholds = thresholds or load_thresholds()
    side = img.shape[0]
    cell, off = grid_geometry(side)
    out = []
    for color, m in components(img, min_area):
        ys, xs = np.nonzero(m)
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        fill = len(ys) / box
        cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
        r = int(np.clip((cy - off) // cell, 0, GRID - 1))
        c = int(np.clip((cx - off) // cell, 0, GRID - 1))
        out.append(Detection(color, thresholds.classify(fill), len(ys), float(fill), (float(cy), float(cx)), (r, c)))
    return out


def _match_pair(dets, a: SceneObject, b: SceneObject, with_color: bool):
    def ok(d, o):
        return d.shape == o.shape and (not with_color or d.color == o.color)
    if ok(dets[0], a) and ok(dets[1], b):
        return dets[0], dets[1]
    if ok(dets[1], a) and ok(dets[0], b):
        return dets[1], dets[0]
    return None


def check(spec: ShapesSceneSpec, dets: list[Detection]) -> bool:
    """Does the detected content satisfy the prompt that ``spec`` was captioned with?"""
    objs, cat = spec.objects, spec.category
    if cat == "single_object":
        return len(dets) == 1 and dets[0].shape == objs[0].shape
    if cat == "colors":
        return len(dets) == 1 and dets[0].shape == objs[0].shape and dets[0].color == objs[0].color
    if cat == "counting":
        return len(dets) == len(objs) and all(d.shape == objs[0].shape for d in dets)
    if cat in ("two_objects", "position", "color_attribution"):
        if len(dets) != 2:
            return False
        pair = _match_pair(dets, objs[0], objs[1], with_color=cat == "color_attribution")
        if pair is None:
            return False
        if cat == "position":
            a, rel, b = spec.relation
            da, db = pair if a == 0 else pair[::-1]
            return holds(da.cell, rel, db.cell)
        return True
    raise ValueError(f"unknown category {cat!r}")


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    n: dict[str, int]
    overall: float = field(init=False)

    def __post_init__(self):
        self.overall = float(np.mean([self.accuracy[c] for c in CATEGORIES]))

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n, "overall": self.overall}

    def table(self) -> str:
        heads = [COLUMNS[c] for c in CATEGORIES] + ["Overall"]
        vals = [f"{self.accuracy[c]:.2f}" for c in CATEGORIES] + [f"{self.overall:.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        row = lambda cells: "| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([row(heads), sep, row(vals)])

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "eval_report.txt").write_text(self.table() + "\n")


def eval_prompts(n_per_category: int, seed: int, side: int = 32):
    """Held-out scene specs per category; the seed stream is disjoint from corpus seeds."""
    out = {}
    for k, cat in enumerate(CATEGORIES):
        out[cat] = [random_spec(np.random.default_rng([seed, 7_777_777, k, i]), cat) for i in range(n_per_category)]
    return out


def score_images(specs, images, thresholds=None) -> list[bool]:
    thresholds = thresholds or load_thresholds()
    return [check(s, detect_objects(im, thresholds)) for s, im in zip(specs, images)]


def evaluate_renderer(n_per_category: int, seed: int = 0, side: int = 32) -> EvalReport:
    """Checker applied to ground-truth renders of the held-out prompts."""
    acc, n = {}, {}
    for cat, specs in eval_prompts(n_per_category, seed, side).items():
        ok = score_images(specs, [render(s, side) for s in specs])
        acc[cat], n[cat] = float(np.mean(ok)), len(ok)
    return EvalReport(acc, n)


def compositional_eval(model, n_per_category: int = 50, seed: int = 0, sampler=None, out_dir=None,
                       batch_size: int = 50) -> EvalReport:
    """Generate one image per held-out prompt and score it with the pixel checker."""
    from jmini.data.scenes import caption
    from jmini.imageio import save_png
    from jmini.inference import decode_images, generate_ids

    sampler = sampler or EVAL_SAMPLER
    thresholds = load_thresholds()
    acc, n = {}, {}
    records = []
    for k, (cat, specs) in enumerate(eval_prompts(n_per_category, seed, model.codec.image_side).items()):
        caps = [caption(s) for s in specs]
        ok = []
        for start in range(0, len(specs), batch_size):
            cfg = replace(sampler, seed=int(np.random.default_rng([sampler.seed, k, start]).integers(2**31)))
            ids = generate_ids(model, caps[start:start + batch_size], cfg)
            imgs = decode_images(model, ids)
            res = score_images(specs[start:start + batch_size], imgs, thresholds)
            ok += res
            if out_dir is not None:
                d = Path(out_dir) / "images"
                d.mkdir(parents=True, exist_ok=True)
                for j, (im, r) in enumerate(zip(imgs, res)):
                    name = f"{cat}_{start + j:03d}.png"
                    save_png(d / name, im)
                    records.append({"category": cat, "prompt": caps[start + j], "image": f"images/{name}",
                                    "correct": bool(r)})
        acc[cat], n[cat] = float(np.mean(ok)), len(ok)
    report = EvalReport(acc, n)
    if out_dir is not None:
        report.save(out_dir)
        with open(Path(out_dir) / "prompts.jsonl", "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return report


def calibrate_shape_thresholds(n: int = 10_000, seed: int = 0, side: int = 32, sizes=(5, 6, 7, 8)) -> dict:
    """Fit fill-ratio cutoffs on ground-truth renders: midpoints between adjacent shape ranges."""
    rng = np.random.default_rng([seed, 424242])
    cell, off = grid_geometry(side)
    fills = {s: [] for s in SHAPES}
    for _ in range(n):
        spec = random_spec(rng, "dense")
        objs = {o.cell: SceneObject(o.shape, o.color, o.cell, int(rng.choice(sizes))) for o in spec.objects}
        img = render(ShapesSceneSpec(tuple(objs.values()), "dense"), side)
        for color, m in components(img, min_area=1):
            ys, xs = np.nonzero(m)
            at = (int((ys.mean() + 0.5 - off) // cell), int((xs.mean() + 0.5 - off) // cell))
            o = objs.get(at)
            if o is not None and o.color == color:
                fills[o.shape].append(len(ys) / ((np.ptp(ys) + 1) * (np.ptp(xs) + 1)))
    span = {s: (float(min(v)), float(max(v))) for s, v in fills.items()}
    if not (span["triangle"][1] < span["circle"][0] and span["circle"][1] < span["square"][0]):
        raise RuntimeError(f"shape fill ranges overlap: {span}")
    return {
        "triangle_circle": (span["triangle"][1] + span["circle"][0]) / 2,
        "circle_square": (span["circle"][1] + span["square"][0]) / 2,
        "ranges": span, "n_scenes": n, "seed": seed, "sizes": list(sizes),
    }


if __name__ == "__main__":
    out = resources.files("jmini").joinpath("shape_thresholds.json")
    Path(str(out)).write_text(json.dumps(calibrate_shape_thresholds(), indent=2, sort_keys=True) + "\n")
