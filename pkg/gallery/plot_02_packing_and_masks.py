"""
Packing sequences into rows
===========================

Understanding, pure-text and generation samples become modality-tagged
sequences.  Several short sequences share one row of the context window;
a block-diagonal causal mask keeps them from seeing each other, and
positions restart at zero in every segment.
"""
import numpy as np
import torch

from jmini.config import codec_config, model_config
from jmini.data.packing import pack
from jmini.data.samples import GENERATION, PURE_TEXT, Sample, to_sequence
from jmini.model import JanusMini

torch.manual_seed(0)
model = JanusMini(model_config("gradcheck", context_window=48), codec_config("gradcheck"), seed=0)

###############################################################################
# Two templates
# -------------

txt = to_sequence(Sample(PURE_TEXT, "a red circle at top left"), model.codec.und_tokens)
gen = to_sequence(Sample(GENERATION, "a blue square", image_ids=np.arange(16) % 16), model.codec.und_tokens)
for name, s in (("text", txt), ("generation", gen)):
    print(f"{name:<11} len={len(s):>2} modality={s.modality.tolist()}")
    print(f"{'':<11} flagged={s.loss_flag.astype(int).tolist()}")

###############################################################################
# The mask of one packed row
# --------------------------
# ``#`` marks an allowed attention edge.  Padding attends to itself only.

batch = pack([txt, gen], 48)
m = batch.mask[0]
print("segments start at", batch.boundaries[0], "fill", round(batch.fill_ratio, 2))
for i in range(0, m.shape[0], 2):
    print("".join("#" if m[i, j] else "." for j in range(0, m.shape[1], 2)))

###############################################################################
# Packed and unpacked losses agree
# --------------------------------

packed = model.packed_loss(batch).item()
n = int(txt.loss_flag.sum() + gen.loss_flag.sum())
single = ((model.sequence_loss(txt, "sum") + model.sequence_loss(gen, "sum")) / n).item()
print(f"packed {packed:.8f}  unpacked {single:.8f}  rel diff {abs(packed - single) / single:.1e}")
