"""Stage 0 tokenizer pretraining and the Stage I-III training loop."""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from jmini.checkpoint import group_hashes, load_checkpoint, save_checkpoint
from jmini.codecs import quantize, restart_dead_codes, vq_losses
from jmini.data.mixing import mix
from jmini.data.packing import pack
from jmini.data.samples import to_sequence
from jmini.data.scenes import random_spec, render
from jmini.model import JanusMini
from jmini.training.data import CAPTION_DROPOUT, StageSources
from jmini.training.optim import AdamW
from jmini.training.plans import StagePlan, lr_at

log = logging.getLogger(__name__)


class MissingPrerequisite(RuntimeError):
    """A stage was started without the checkpoint it builds on."""


# -- stage 0 ------------------------------------------------------------------

@dataclass
class TokenizerReport:
    steps: int
    seconds: float
    heldout_mse: float
    utilization: float
    final_losses: dict


def heldout_images(n: int, seed: int, side: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 99])
    return np.stack([render(random_spec(rng, "dense"), side) for _ in range(n)])


@torch.no_grad()
def reconstruction_mse(model: JanusMini, images: np.ndarray) -> float:
    tok = model.gen_tokenizer
    x = torch.from_numpy(images).permute(0, 3, 1, 2).to(model.dtype)
    rec = tok.decode_ids(tok.tokenize(x))
    return float((rec - x).pow(2).mean())


@torch.no_grad()
def measure_utilization(model: JanusMini, images: np.ndarray) -> float:
    cb = model.gen_tokenizer.codebook
    cb.reset_usage()
    x = torch.from_numpy(images).permute(0, 3, 1, 2).to(model.dtype)
    for i in range(0, len(x), 256):
        quantize(model.gen_tokenizer.encode(x[i:i + 256]), cb)
    return cb.utilization()


def pretrain_tokenizer(model: JanusMini, images: np.ndarray, steps: int = 3000, batch_size: int = 64,
                       lr: float = 2e-3, seed: int = 0, restart_every: int = 200, heldout: int = 256,
                       noise_sigma: float = 0.0, log_fn=None) -> TokenizerReport:
    """Train the VQ tokenizer from scratch, then freeze it permanently.

    With ``noise_sigma > 0`` half of each batch is corrupted with clipped
    Gaussian pixel noise while the reconstruction target stays clean.
    """
    tok = model.gen_tokenizer
    if tok.frozen:
        from jmini.codecs import FreezingViolation
        raise FreezingViolation("the generation tokenizer is already frozen")
    tok.requires_grad_(True)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 0])
    data = torch.from_numpy(images).permute(0, 3, 1, 2).to(model.dtype)
    opt = torch.optim.Adam(tok.parameters(), lr=lr)
    start = time.perf_counter()
    with torch.no_grad():
        # data-dependent codebook init
        z = tok.encode(data[torch.from_numpy(rng.choice(len(data), size=min(len(data), 256), replace=False))])
        flat = z.reshape(-1, tok.codebook.dim)
        tok.codebook.codes.copy_(flat[torch.randperm(len(flat), generator=gen)[: tok.codebook.size]])
    tok.codebook.reset_usage()
    losses = {}
    for step in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(data), batch_size))
        x = data[idx]
        inp = x
        if noise_sigma > 0:
            noisy = torch.from_numpy(rng.random(batch_size) < 0.5)[:, None, None, None]
            eps = torch.from_numpy(rng.normal(0.0, noise_sigma, x.shape)).to(x.dtype)
            inp = torch.where(noisy, (x + eps).clamp(0, 1), x)
        opt.zero_grad(set_to_none=True)
        parts = vq_losses(tok, inp, x)
        parts["total"].backward()
        opt.step()
        losses = {k: float(v.detach()) for k, v in parts.items()}
        if restart_every and (step + 1) % restart_every == 0 and step + 1 < steps * 0.8:
            with torch.no_grad():
                moved = restart_dead_codes(tok.codebook, tok.encode(x), gen)
            tok.codebook.reset_usage()
            if log_fn and moved:
                log_fn({"stage": 0, "step": step + 1, "restarted_codes": moved})
        if log_fn and (step % 100 == 0 or step == steps - 1):
            log_fn({"stage": 0, "step": step, **losses})
    tok.frozen = True
    tok.requires_grad_(False)
    held = heldout_images(heldout, seed, model.codec.image_side)
    mse = reconstruction_mse(model, held)
    util = measure_utilization(model, images)
    return TokenizerReport(steps, time.perf_counter() - start, mse, util, losses)


# -- stages I-III ---------------------------------------------------------------

@dataclass
class TrainState:
    stage_id: int
    step: int = 0
    seed: int = 0
    optimizer: AdamW | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=100_000))

    def rng(self, step: int | None = None) -> np.random.Generator:
        """Data rng for a step: a pure function of (seed, stage, step)."""
        return np.random.default_rng([self.seed, self.stage_id, self.step if step is None else step])


def make_optimizer(model: JanusMini, plan: StagePlan) -> AdamW:
    model.set_trainable(plan.trainable_groups)
    params, groups = {}, {}
    for g, ps in model.parameter_groups().items():
        if g in plan.trainable_groups:
            for n, p in ps.items():
                params[f"{g}/{n}"] = p
                groups[f"{g}/{n}"] = g
    return AdamW(params, plan.optimizer, groups)


def build_batch(plan: StagePlan, sources: StageSources, model: JanusMini, rng: np.random.Generator):
    samples = mix(sources.as_list(), plan.ratio, plan.batch_size, rng)
    seqs = []
    for s in samples:
        drop = s.kind == "generation" and rng.random() < CAPTION_DROPOUT
        seqs.append(to_sequence(s, model.codec.und_tokens, drop_caption=drop))
    return pack(seqs, model.cfg.context_window), samples


def train_step(model: JanusMini, plan: StagePlan, state: TrainState, sources: StageSources) -> dict:
    rng = state.rng()
    batch, samples = build_batch(plan, sources, model, rng)
    for p in state.optimizer.params.values():
        p.grad = None
    total, parts = model.packed_loss(batch, split=True)
    total.backward()
    lr = lr_at(state.step, plan)
    grad_norm = state.optimizer.step(state.optimizer.collect_grads(), lr)
    rec = {
        "stage": plan.stage_id, "step": state.step, "loss": float(total.detach()), "lr": lr,
        "text_loss": float(parts["text_sum"].detach()) / parts["n_text"] if parts["n_text"] else None,
        "image_loss": float(parts["image_sum"].detach()) / parts["n_image"] if parts["n_image"] else None,
        "fill_ratio": batch.fill_ratio, "grad_norm": grad_norm, "rows": batch.shape[0],
        "kinds": [sum(s.kind == k for s in samples) for k in ("understanding", "pure_text", "generation")],
    }
    state.step += 1
    state.history.append(rec)
    return rec


def stage_checkpoint_path(run_dir, stage_id: int, latest: bool = False) -> Path:
    return Path(run_dir) / (f"stage{stage_id}_latest.ckpt" if latest else f"stage{stage_id}.ckpt")


def save_stage(path, model, state: TrainState, plan: StagePlan, complete: bool, extra=None):
    progress = {"stage": state.stage_id, "step": state.step, "seed": state.seed, "complete": complete,
                "optimizer_t": state.optimizer.t if state.optimizer else 0,
                "trainable_groups": sorted(plan.trainable_groups)}
    return save_checkpoint(path, model, progress, state.optimizer, extra)


def resume_state(path, plan: StagePlan) -> tuple[JanusMini, TrainState]:
    model, meta, opt_arrays = load_checkpoint(path)
    prog = meta["progress"]
    if prog.get("stage") != plan.stage_id:
        raise MissingPrerequisite(f"{path} holds stage {prog.get('stage')}, not stage {plan.stage_id}")
    state = TrainState(plan.stage_id, prog["step"], prog["seed"])
    state.optimizer = make_optimizer(model, plan)
    state.optimizer.load_state_arrays(prog["optimizer_t"], opt_arrays)
    return model, state


def run_stage(plan: StagePlan, model: JanusMini, sources: StageSources, state: TrainState | None = None,
              run_dir=None, seed: int = 0, log_every: int = 10, checkpoint_every: int | None = None,
              stop_after: int | None = None, log_fn=None) -> TrainState:
    """Run ``min(steps, early_stop_step)`` steps of mix -> pack -> forward -> loss -> AdamW.

    ``state`` resumes a partially completed stage.  ``stop_after`` halts early
    (without marking the stage complete), which is how mid-stage checkpoints
    for resume tests are produced.
    """
    if not model.gen_tokenizer.frozen:
        raise MissingPrerequisite("stage 0 tokenizer pretraining must complete before Stage I")
    if state is None:
        state = TrainState(plan.stage_id, 0, seed)
        state.optimizer = make_optimizer(model, plan)
    else:
        model.set_trainable(plan.trainable_groups)
    model.train()
    total = plan.executed_steps
    entry_hashes = group_hashes(model)
    while state.step < total:
        rec = train_step(model, plan, state, sources)
        if log_fn and (rec["step"] % log_every == 0 or state.step == total):
            log_fn(rec)
        if run_dir and checkpoint_every and state.step % checkpoint_every == 0 and state.step < total:
            save_stage(stage_checkpoint_path(run_dir, plan.stage_id, latest=True), model, state, plan, False)
        if stop_after is not None and state.step >= stop_after:
            break
    done = state.step >= total
    hashes = group_hashes(model)
    frozen = sorted(set(hashes) - set(plan.trainable_groups))
    changed = [g for g in frozen if hashes[g] != entry_hashes[g]]
    if changed:
        from jmini.codecs import FreezingViolation
        raise FreezingViolation(f"frozen groups changed during stage {plan.stage_id}: {changed}")
    if run_dir:
        path = stage_checkpoint_path(run_dir, plan.stage_id, latest=not done)
        save_stage(path, model, state, plan, done)
    return state


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, rec: dict):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("%s", rec)


def loss_summary(history, window: int = 20) -> dict:
    """First-window and last-window mean training loss (overall and by modality)."""
    recs = list(history)
    out = {}
    for key in ("loss", "text_loss", "image_loss"):
        vals = [r[key] for r in recs if r.get(key) is not None]
        if vals:
            w = min(window, max(1, len(vals) // 4))
            out[key] = {"first": vals[0], "initial": float(np.mean(vals[:w])), "final": float(np.mean(vals[-w:]))}
    return out
