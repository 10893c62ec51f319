"""Procedural shapes-and-captions scenes.

A scene places 1-4 flat-colored shapes into distinct cells of a 3x3 grid on a
black canvas.  Rendering is antialiasing-free so a pixel checker can recover
the scene exactly from a ground-truth render.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from jmini.text import COLOR_NAMES, NUMBER_WORDS, PLURALS, SHAPES

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
assert tuple(PALETTE) == COLOR_NAMES
BACKGROUND = (0.0, 0.0, 0.0)

GRID = 3
CATEGORIES = ("single_object", "two_objects", "counting", "colors", "position", "color_attribution")
RELATIONS = ("left of", "right of", "above", "below")
CELL_NAMES = (
    ("top left", "top", "top right"),
    ("left", "center", "right"),
    ("bottom left", "bottom", "bottom right"),
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) in the 3x3 grid
    size: int = 8

    def noun(self, with_color: bool = True) -> str:
        return f"{self.color} {self.shape}" if with_color else self.shape


@dataclass(frozen=True)
class ShapesSceneSpec:
    objects: tuple[SceneObject, ...]
    category: str = "dense"
    # (index_a, relation, index_b): "objects[a] <relation> objects[b]"
    relation: tuple[int, str, int] | None = None
    relations: tuple[tuple[int, str, int], ...] = field(default=())

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 4:
            raise ValueError("a scene holds 1-4 objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        if not self.relations:
            object.__setattr__(self, "relations", pairwise_relations(self.objects))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [dict(asdict(o), cell=list(o.cell)) for o in self.objects]
        d["relations"] = [list(r) for r in self.relations]
        d["relation"] = list(self.relation) if self.relation else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapesSceneSpec":
        objs = tuple(SceneObject(o["shape"], o["color"], tuple(o["cell"]), o.get("size", 8))
                     for o in d["objects"])
        rel = tuple(d["relation"]) if d.get("relation") else None
        return cls(objs, d.get("category", "dense"), rel)


def holds(a: tuple[int, int], relation: str, b: tuple[int, int]) -> bool:
    (ra, ca), (rb, cb) = a, b
    return {"left of": ca < cb, "right of": ca > cb, "above": ra < rb, "below": ra > rb}[relation]


def pairwise_relations(objects) -> tuple[tuple[int, str, int], ...]:
    out = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i != j:
                out.extend((i, r, j) for r in RELATIONS if holds(a.cell, r, b.cell))
    return tuple(out)


# -- rendering ----------------------------------------------------------------

def grid_geometry(side: int) -> tuple[int, int]:
    """Cell size and canvas offset of the 3x3 grid for a ``side``-pixel image."""
    cell = (side - 2) // GRID
    return cell, (side - GRID * cell) // 2


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    half = size / 2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "circle":
        return (xx - half) ** 2 + (yy - half) ** 2 <= half ** 2
    if shape == "triangle":
        # apex up, base on the bottom row
        return np.abs(xx - half) <= (np.floor(yy) + 1) / size * half
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: ShapesSceneSpec, side: int = 32) -> np.ndarray:
    cell, off = grid_geometry(side)
    img = np.empty((side, side, 3), np.float32)
    img[:] = BACKGROUND
    for o in spec.objects:
        if o.size > cell:
            raise ValueError(f"object size {o.size} exceeds cell size {cell}")
        r, c = o.cell
        y0 = off + r * cell + (cell - o.size) // 2
        x0 = off + c * cell + (cell - o.size) // 2
        m = shape_mask(o.shape, o.size)
        img[y0:y0 + o.size, x0:x0 + o.size][m] = PALETTE[o.color]
    return img


# pixel-noise level of the augmented sub-corpus
AUGMENT_SIGMA = 0.03


def augment(img: np.ndarray, rng: np.random.Generator, sigma: float = AUGMENT_SIGMA) -> np.ndarray:
    """Photographic-noise variant of a clean render (the "real" sub-corpus)."""
    noisy = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


# -- captions -----------------------------------------------------------------

def cell_name(cell) -> str:
    return CELL_NAMES[cell[0]][cell[1]]


def _raster(spec):
    return sorted(spec.objects, key=lambda o: o.cell)


def describe(spec: ShapesSceneSpec) -> str:
    """Dense caption: every object with color and location, in raster order."""
    return " and ".join(f"a {o.noun()} at {cell_name(o.cell)}" for o in _raster(spec))


def category_prompt(obj: SceneObject) -> str:
    """Class-name style prompt for a single object, e.g. ``red circle``."""
    return obj.noun()


def caption(spec: ShapesSceneSpec) -> str:
    """Caption in the template of the scene's evaluation category."""
    objs, cat = spec.objects, spec.category
    if cat in ("single_object", "colors"):
        return f"a {objs[0].noun()}"
    if cat == "two_objects":
        return f"a {objs[0].shape} and a {objs[1].shape}"
    if cat == "counting":
        return f"{NUMBER_WORDS[len(objs)]} {PLURALS[objs[0].shape]}"
    if cat == "position":
        a, rel, b = spec.relation
        return f"a {objs[a].shape} {rel} a {objs[b].shape}"
    if cat == "color_attribution":
        return f"a {objs[0].noun()} and a {objs[1].noun()}"
    if cat == "dense":
        return describe(spec)
    raise ValueError(f"unknown category {cat!r}")


# -- generation ---------------------------------------------------------------

ALL_CELLS = [(r, c) for r in range(GRID) for c in range(GRID)]


def _cells(rng, n):
    idx = rng.choice(len(ALL_CELLS), size=n, replace=False)
    return [ALL_CELLS[i] for i in idx]


def _color(rng):
    return COLOR_NAMES[rng.integers(len(COLOR_NAMES))]


def _shape(rng):
    return SHAPES[rng.integers(len(SHAPES))]


def random_spec(rng: np.random.Generator, category: str | None = None) -> ShapesSceneSpec:
    if category is None:
        category = CATEGORIES[rng.integers(len(CATEGORIES))]
    if category in ("single_object", "colors"):
        (cell,) = _cells(rng, 1)
        return ShapesSceneSpec((SceneObject(_shape(rng), _color(rng), cell),), category)
    if category in ("two_objects", "position", "color_attribution"):
        shapes = rng.choice(len(SHAPES), size=2, replace=False)
        if category == "color_attribution":
            colors = [COLOR_NAMES[i] for i in rng.choice(len(COLOR_NAMES), size=2, replace=False)]
        else:
            colors = [_color(rng), _color(rng)]
        cells = _cells(rng, 2)
        objs = tuple(SceneObject(SHAPES[s], col, cell) for s, col, cell in zip(shapes, colors, cells))
        relation = None
        if category == "position":
            valid = [r for r in RELATIONS if holds(objs[0].cell, r, objs[1].cell)]
            relation = (0, valid[rng.integers(len(valid))], 1)
        return ShapesSceneSpec(objs, category, relation)
    if category == "counting":
        n = int(rng.integers(2, 5))
        shape = _shape(rng)
        return ShapesSceneSpec(tuple(SceneObject(shape, _color(rng), c) for c in _cells(rng, n)), category)
    if category == "dense":
        n = int(rng.integers(1, 5))
        return ShapesSceneSpec(tuple(SceneObject(_shape(rng), _color(rng), c) for c in _cells(rng, n)), category)
    raise ValueError(f"unknown category {category!r}")


def gen_scene(seed, category: str | None = None, side: int = 32):
    """Seed-addressed scene: ``(spec, image, caption)``."""
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, category)
    return spec, render(spec, side), caption(spec)
