"""
Generation, guidance and the pixel checker
==========================================

A trained checkpoint samples 16 image ids per caption and the frozen
tokenizer decodes them.  The checker snaps pixels to the palette, finds
connected components, and decides color, shape and grid cell for each one.
On ground-truth renders it scores 1.0 in every category, so any loss on
generated images is the model's.

Point ``CKPT`` at a ``stage3.ckpt`` (for example from
``plot_04_staged_training.py``); the default path is the one that script
writes.  That script's default run is a tenth of the budget and scores near
zero here; ``FULL=1`` or ``jmini train`` gives a checkpoint worth scoring.
"""
import os
from pathlib import Path

import numpy as np

from jmini.checkpoint import load_checkpoint
from jmini.data.scenes import render
from jmini.evaluation import compositional_eval, detect_objects, eval_prompts, evaluate_renderer
from jmini.imageio import save_png
from jmini.inference import GREEDY, SamplerConfig, generate_ids, decode_images, understand

out = Path("gallery_out")
ckpt = Path(os.environ.get("CKPT", out / "run" / "stage3.ckpt"))
model = load_checkpoint(ckpt)[0]

###############################################################################
# The checker on ground truth
# ---------------------------

print(evaluate_renderer(50).table())
spec = eval_prompts(1, seed=0)["position"][0]
for d in detect_objects(render(spec)):
    print(d.color, d.shape, d.cell, f"fill={d.fill:.2f}")

###############################################################################
# Sampling with and without guidance
# ----------------------------------
# Rows: temperature 1, greedy, greedy with guidance scale 3.

caps = ["a red circle", "a blue square", "a green triangle", "a yellow circle left of a magenta square"]
rows = []
for cfg in (SamplerConfig(seed=0), GREEDY, SamplerConfig(top_k=1, cfg_scale=3.0)):
    rows.append(np.concatenate(list(decode_images(model, generate_ids(model, caps, cfg))), 1))
save_png(out / "samples.png", np.concatenate(rows, 0))
print("wrote", out / "samples.png")

###############################################################################
# Understanding
# -------------

img = render(spec)
for q in ("how many objects are there", "describe the image"):
    print(q, "->", understand(model, img, q))

###############################################################################
# The compositional report
# ------------------------

print(compositional_eval(model, n_per_category=20, out_dir=out / "eval").table())
