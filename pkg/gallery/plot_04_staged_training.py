"""
Three training stages
=====================

Stage 0 trains and freezes the image tokenizer.  Stage I then trains only
the two adaptors and the image head on top of a frozen transformer; Stage II
unfreezes everything except the two visual encoders; Stage III also tunes
the understanding encoder.  Each stage changes exactly the groups it owns,
which we confirm by hashing parameters.

``FULL=1`` runs the toy budget (a few minutes on one core); the default is a
quick version with shortened stages.
"""
import os
from pathlib import Path

from jmini.checkpoint import group_hashes, load_checkpoint
from jmini.data.corpus import build_corpus
from jmini.model import GROUPS
from jmini.runconfig import build_run_config
from jmini.training.pipeline import Stage0Plan, run_pipeline, stage0_path
from jmini.training.stage import stage_checkpoint_path

FULL = os.environ.get("FULL") == "1"
run_dir = Path("gallery_out") / "run"
rc = build_run_config({}, scale="toy", seed=0)
plans, stage0 = rc.plans, rc.stage0
counts = rc.counts
if not FULL:
    plans = [p.with_overrides(steps=max(1, p.steps // 10), early_stop_step=None) for p in plans]
    stage0 = Stage0Plan(steps=300)
    counts = {"understanding": 400, "pure_text": 200, "generation": 800}

###############################################################################
# The plans
# ---------

for p in plans:
    print(f"stage {p.stage_id}: {p.executed_steps} steps, lr {p.learning_rate:g}, warmup {p.warmup_steps}, "
          f"batch {p.batch_size}, ratio {p.ratio}, trains {sorted(p.trainable_groups)}")

###############################################################################
# Run stage 0 through Stage III
# -----------------------------

corpus = build_corpus(counts, seed=0)


def show(rec):
    if rec.get("event") in ("start", "end", "complete"):
        print({k: v for k, v in rec.items() if k != "summary"})


res = run_pipeline(corpus, plans, rc.model, rc.codec, run_dir, seed=0, stage0=stage0, log_fn=show)
for k, summ in res.summaries.items():
    loss = summ["loss"]
    print(f"stage {k}: loss {loss['initial']:.3f} -> {loss['final']:.3f} in {res.seconds[k]:.0f}s")

###############################################################################
# What changed in each stage
# --------------------------
# ``*`` marks a group whose parameter hash differs from the previous stage.

paths = [stage0_path(run_dir)] + [stage_checkpoint_path(run_dir, k) for k in (1, 2, 3)]
hashes = [group_hashes(load_checkpoint(p)[0]) for p in paths]
print(f"{'group':<20}" + "".join(f"  S{k}" for k in (1, 2, 3)))
for g in GROUPS:
    print(f"{g:<20}" + "".join(f"  {'*' if hashes[k][g] != hashes[k - 1][g] else '.':>2}" for k in (1, 2, 3)))
