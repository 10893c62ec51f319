"""
The shapes world
================

Every training image is a 32x32 render of up to three colored shapes on a
3x3 grid.  A scene spec is the ground truth; captions, dense captions and
question/answer pairs are all derived from it, which is what later lets a
pixel checker score generated images without a learned detector.
"""
from pathlib import Path

import numpy as np

from jmini.data.corpus import build_corpus
from jmini.data.scenes import CATEGORIES, augment, caption, describe, gen_scene
from jmini.data.samples import scene_questions
from jmini.imageio import save_png

out = Path("gallery_out")
out.mkdir(exist_ok=True)

###############################################################################
# One scene per category
# ----------------------
# ``gen_scene`` is a pure function of its seed.

tiles = []
for k, cat in enumerate(CATEGORIES):
    spec, img, cap = gen_scene([0, k], cat)
    print(f"{cat:<18} caption: {cap!r}")
    print(f"{'':<18} dense:   {describe(spec)!r}")
    tiles.append(img)

###############################################################################
# Questions with unique answers
# -----------------------------

spec, _, _ = gen_scene([0, 2], "counting")
for q, a in scene_questions(spec):
    print(f"Q: {q:<40} A: {a}")

###############################################################################
# Clean and augmented renders
# ---------------------------
# Half of the generation corpus gets mild pixel noise.  The top row is clean,
# the bottom row is the same scenes with noise.

rng = np.random.default_rng(0)
noisy = [augment(t, rng) for t in tiles]
sheet = np.concatenate([np.concatenate(tiles, 1), np.concatenate(noisy, 1)], 0)
save_png(out / "shapes_sheet.png", sheet)
print("wrote", out / "shapes_sheet.png", sheet.shape)

###############################################################################
# A small in-memory corpus
# ------------------------

corpus = build_corpus({"understanding": 8, "pure_text": 8, "generation": 8}, seed=0)
print(corpus.manifest)
print(corpus.generation[0]["caption"], "|", corpus.generation[0]["dense_caption"])
print(corpus.pure_text[0])
