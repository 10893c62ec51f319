"""
Stage 0: the image tokenizer
============================

Generation images are turned into a 4x4 grid of codebook ids by a small
VQ autoencoder.  It trains once with a straight-through estimator, is
checked on held-out renders, and is then frozen for good.

Set ``STEPS`` to 1500 for the full toy budget.
"""
import os
from pathlib import Path

import numpy as np
import torch

from jmini.config import codec_config, model_config
from jmini.data.corpus import build_corpus
from jmini.imageio import save_png
from jmini.inference import decode_images
from jmini.model import JanusMini
from jmini.training.stage import heldout_images, pretrain_tokenizer

STEPS = int(os.environ.get("STEPS", 300))
out = Path("gallery_out")
out.mkdir(exist_ok=True)
torch.manual_seed(0)

corpus = build_corpus({"understanding": 500, "pure_text": 10, "generation": 1000}, seed=0)
model = JanusMini(model_config("toy"), codec_config("toy"), seed=0)
images = np.concatenate([corpus.gen_images, corpus.und_images])

###############################################################################
# Train, freeze, report
# ---------------------

rep = pretrain_tokenizer(model, images, steps=STEPS, noise_sigma=0.06,
                         log_fn=lambda r: print(r) if "restarted_codes" in r or r["step"] % 100 == 0 else None)
print(f"held-out mse {rep.heldout_mse:.4f}, utilization {rep.utilization:.0%}, {rep.seconds:.0f}s")
print("frozen:", model.gen_tokenizer.frozen)

###############################################################################
# Round trip
# ----------
# Top row: held-out renders.  Bottom row: decode(tokenize(x)).

held = heldout_images(8, seed=0, side=32)
with torch.no_grad():
    ids = model.gen_tokenizer.tokenize(torch.from_numpy(held).permute(0, 3, 1, 2))
recon = decode_images(model, ids.numpy())
print(ids[0].reshape(4, 4))
save_png(out / "tokenizer_roundtrip.png",
         np.concatenate([np.concatenate(list(held), 1), np.concatenate(list(recon), 1)], 0))
