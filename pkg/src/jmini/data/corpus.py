"""On-disk shapes corpus: one directory per sample kind plus a manifest.

Layout::

    corpus/
      manifest.json
      understanding/records.jsonl   images/u000000.png ...
      pure_text/records.jsonl
      generation/records.jsonl      images/g000000.png ...

Records are UTF-8 JSON lines.  Every record is a pure function of
``(seed, kind, index)``, so the same seed always writes identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from jmini.data.preprocess import preprocess_generation, preprocess_understanding
from jmini.data.scenes import (CATEGORIES, ShapesSceneSpec, augment, caption, category_prompt, describe,
                               random_spec, render)
from jmini.data.samples import DESCRIBE_QUESTION, scene_questions, text_facts
from jmini.imageio import load_png, save_png, to_uint8

DEFAULT_COUNTS = {"understanding": 2000, "pure_text": 1000, "generation": 4000}
# fraction of generation scenes that are single objects with a class-name prompt
CLASS_FRACTION = 0.3
KIND_INDEX = {"understanding": 0, "pure_text": 1, "generation": 2}


def _rng(seed: int, kind: str, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, KIND_INDEX[kind], i])


def understanding_record(seed: int, i: int, side: int = 32):
    rng = _rng(seed, "understanding", i)
    spec = random_spec(rng, "dense")
    img = preprocess_understanding(render(spec, side), side)
    qa = [{"question": DESCRIBE_QUESTION, "answer": describe(spec), "task": "describe"}]
    qa += [{"question": q, "answer": a, "task": "qa"} for q, a in scene_questions(spec)]
    return {"id": f"u{i:06d}", "qa": qa, "scene": spec.to_dict()}, img


def pure_text_record(seed: int, i: int):
    rng = _rng(seed, "pure_text", i)
    facts = text_facts()
    if i % 2:
        q, a = facts[int(rng.integers(len(facts)))]
        return {"id": f"t{i:06d}", "task": "fact", "question": q, "answer": a}
    spec = random_spec(rng, "dense")
    return {"id": f"t{i:06d}", "task": "caption", "text": describe(spec), "scene": spec.to_dict()}


def generation_record(seed: int, i: int, n_total: int, augmented_ratio: tuple[int, int] = (1, 1), side: int = 32):
    rng = _rng(seed, "generation", i)
    if rng.random() < CLASS_FRACTION:
        spec = random_spec(rng, "single_object")
    else:
        cats = CATEGORIES + ("dense",)
        spec = random_spec(rng, cats[int(rng.integers(len(cats)))])
    clean, aug = augmented_ratio
    # contiguous split at the configured clean:augmented sub-ratio
    subset = "clean" if i < round(n_total * clean / (clean + aug)) else "augmented"
    img = render(spec, side)
    if subset == "augmented":
        img = augment(img, rng)
    img = preprocess_generation(img, side)
    rec = {
        "id": f"g{i:06d}", "subset": subset, "caption": caption(spec), "dense_caption": describe(spec),
        "category_prompt": category_prompt(spec.objects[0]) if len(spec.objects) == 1 else None,
        "scene": spec.to_dict(),
    }
    return rec, img


def write_corpus(root, counts: dict | None = None, seed: int = 0, side: int = 32,
                 augmented_ratio: tuple[int, int] = (1, 1)) -> dict:
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    root = Path(root)
    for kind in KIND_INDEX:
        (root / kind).mkdir(parents=True, exist_ok=True)
    (root / "understanding" / "images").mkdir(exist_ok=True)
    (root / "generation" / "images").mkdir(exist_ok=True)

    with open(root / "understanding" / "records.jsonl", "w", encoding="utf-8") as f:
        for i in range(counts["understanding"]):
            rec, img = understanding_record(seed, i, side)
            rec["image"] = f"images/{rec['id']}.png"
            save_png(root / "understanding" / rec["image"], img)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(root / "pure_text" / "records.jsonl", "w", encoding="utf-8") as f:
        for i in range(counts["pure_text"]):
            f.write(json.dumps(pure_text_record(seed, i), sort_keys=True) + "\n")
    subsets = {"clean": 0, "augmented": 0}
    with open(root / "generation" / "records.jsonl", "w", encoding="utf-8") as f:
        for i in range(counts["generation"]):
            rec, img = generation_record(seed, i, counts["generation"], augmented_ratio, side)
            rec["image"] = f"images/{rec['id']}.png"
            save_png(root / "generation" / rec["image"], img)
            subsets[rec["subset"]] += 1
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {"seed": seed, "image_side": side, "counts": counts,
                "generation_subsets": subsets, "augmented_ratio": list(augmented_ratio)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Corpus:
    manifest: dict
    understanding: list[dict] = field(default_factory=list)
    pure_text: list[dict] = field(default_factory=list)
    generation: list[dict] = field(default_factory=list)
    und_images: np.ndarray | None = None   # (N, S, S, 3)
    gen_images: np.ndarray | None = None   # (N, S, S, 3)
    gen_ids: np.ndarray | None = None      # (N, g*g) once tokenized

    def scene(self, rec) -> ShapesSceneSpec:
        return ShapesSceneSpec.from_dict(rec["scene"])


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    c = Corpus(json.loads(manifest_path.read_text()))
    c.understanding = _read_jsonl(root / "understanding" / "records.jsonl")
    c.pure_text = _read_jsonl(root / "pure_text" / "records.jsonl")
    c.generation = _read_jsonl(root / "generation" / "records.jsonl")
    c.und_images = np.stack([load_png(root / "understanding" / r["image"]) for r in c.understanding])
    c.gen_images = np.stack([load_png(root / "generation" / r["image"]) for r in c.generation])
    return c


def _png_exact(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float32) / 255.0


def build_corpus(counts: dict | None = None, seed: int = 0, side: int = 32,
                 augmented_ratio: tuple[int, int] = (1, 1)) -> Corpus:
    """In-memory twin of :func:`write_corpus`; pixels are rounded to 8 bits so
    both paths feed training identical arrays."""
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    und = [understanding_record(seed, i, side) for i in range(counts["understanding"])]
    gen = [generation_record(seed, i, counts["generation"], augmented_ratio, side)
           for i in range(counts["generation"])]
    subsets = {"clean": 0, "augmented": 0}
    for r, _ in gen:
        subsets[r["subset"]] += 1
    c = Corpus({"seed": seed, "image_side": side, "counts": counts,
                "generation_subsets": subsets, "augmented_ratio": list(augmented_ratio)})
    c.understanding = [r for r, _ in und]
    c.pure_text = [pure_text_record(seed, i) for i in range(counts["pure_text"])]
    c.generation = [r for r, _ in gen]
    c.und_images = np.stack([_png_exact(im) for _, im in und]) if und else None
    c.gen_images = np.stack([_png_exact(im) for _, im in gen]) if gen else None
    return c
