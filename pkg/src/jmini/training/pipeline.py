"""Stage 0 -> Stage III orchestration shared by the CLI and the narrative scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from jmini.checkpoint import load_checkpoint, save_checkpoint
from jmini.config import CodecConfig, ModelConfig
from jmini.data.corpus import Corpus
from jmini.model import JanusMini
from jmini.training.data import StageSources, tokenize_corpus
from jmini.training.plans import StagePlan
from jmini.training.stage import (MissingPrerequisite, TokenizerReport, loss_summary, pretrain_tokenizer,
                                  resume_state, run_stage, stage_checkpoint_path)

STAGE0_STEPS = 1500


@dataclass
class Stage0Plan:
    steps: int = STAGE0_STEPS
    batch_size: int = 64
    learning_rate: float = 2e-3
    restart_every: int = 200
    # denoising input corruption; keeps codes of augmented images close to clean ones
    noise_sigma: float = 0.06


@dataclass
class PipelineResult:
    model: JanusMini
    tokenizer: TokenizerReport | None = None
    summaries: dict = field(default_factory=dict)   # stage id -> loss_summary
    histories: dict = field(default_factory=dict)   # stage id -> list of step records
    seconds: dict = field(default_factory=dict)


def stage0_path(run_dir) -> Path:
    return Path(run_dir) / "stage0.ckpt"


def _entry_model(run_dir, stage_id: int) -> JanusMini:
    prev = stage0_path(run_dir) if stage_id == 1 else stage_checkpoint_path(run_dir, stage_id - 1)
    if not prev.exists():
        raise MissingPrerequisite(f"stage {stage_id} needs the completed stage {stage_id - 1} checkpoint {prev}")
    model, meta, _ = load_checkpoint(prev)
    if stage_id > 1 and not meta["progress"].get("complete"):
        raise MissingPrerequisite(f"{prev} is not a completed stage {stage_id - 1} checkpoint")
    return model


def run_pipeline(corpus: Corpus, plans: list[StagePlan], cfg: ModelConfig, codec: CodecConfig, run_dir,
                 seed: int = 0, stage0: Stage0Plan | None = None, from_stage: int = 0, resume: bool = False,
                 checkpoint_every: int | None = None, stop_after: dict | None = None, log_fn=None,
                 log_every: int = 10) -> PipelineResult:
    """Run stage ``from_stage`` through Stage III, writing checkpoints into ``run_dir``.

    ``stop_after`` maps a stage id to a step count at which to halt (leaving a
    ``_latest`` checkpoint); used to create mid-stage interruptions.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stage0 = stage0 or Stage0Plan()
    stop_after = stop_after or {}
    emit = log_fn or (lambda rec: None)
    result = PipelineResult(model=None)
    if from_stage == 0:
        model = JanusMini(cfg, codec, seed=seed)
        images = np.concatenate([corpus.gen_images, corpus.und_images])
        t = time.perf_counter()
        result.tokenizer = pretrain_tokenizer(model, images, stage0.steps, stage0.batch_size,
                                              stage0.learning_rate, seed, stage0.restart_every,
                                              noise_sigma=stage0.noise_sigma, log_fn=log_fn)
        result.seconds[0] = time.perf_counter() - t
        rep = result.tokenizer
        emit({"stage": 0, "event": "complete", "heldout_mse": rep.heldout_mse, "utilization": rep.utilization,
              "seconds": rep.seconds})
        save_checkpoint(stage0_path(run_dir), model, {"stage": 0, "complete": True, "seed": seed},
                        extra={"heldout_mse": rep.heldout_mse, "utilization": rep.utilization})
        from_stage = 1
    else:
        model = None
    for plan in plans:
        if plan.stage_id < from_stage:
            continue
        latest = stage_checkpoint_path(run_dir, plan.stage_id, latest=True)
        state = None
        if resume and plan.stage_id == from_stage and latest.exists():
            model, state = resume_state(latest, plan)
        elif model is None or plan.stage_id == from_stage:
            model = _entry_model(run_dir, plan.stage_id)
        if corpus.gen_ids is None or plan.stage_id == from_stage:
            tokenize_corpus(corpus, model.gen_tokenizer)
        sources = StageSources(corpus, plan.stage_id, plan.generation_data_mode)
        emit({"stage": plan.stage_id, "event": "start", "step": state.step if state else 0,
              "trainable_groups": sorted(plan.trainable_groups), "executed_steps": plan.executed_steps})
        t = time.perf_counter()
        state = run_stage(plan, model, sources, state, run_dir, seed, log_every, checkpoint_every,
                          stop_after.get(plan.stage_id), log_fn)
        result.seconds[plan.stage_id] = time.perf_counter() - t
        result.histories[plan.stage_id] = list(state.history)
        result.summaries[plan.stage_id] = loss_summary(state.history)
        emit({"stage": plan.stage_id, "event": "end", "step": state.step, "summary": result.summaries[plan.stage_id]})
        if state.step < plan.executed_steps:
            break
    result.model = model
    return result
