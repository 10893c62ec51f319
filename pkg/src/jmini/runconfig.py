"""Run configuration: scale, seed, paths and type-checked overrides.

A run config is a JSON object such as::

    {
      "scale": "toy",
      "seed": 0,
      "paths": {"corpus": "corpus", "run_dir": "runs/toy"},
      "corpus": {"counts": {"generation": 4000}, "augmented_ratio": [1, 1]},
      "model": {"n_layers": 4},
      "codec": {},
      "stage0": {"steps": 1500},
      "stages": {"1": {"steps": 200}, "2": {"learning_rate": 1e-4}},
      "sampler": {"temperature": 1.0},
      "eval": {"n_per_category": 50, "sampler": {"cfg_scale": 2.0}}
    }

``sampler`` applies to ``generate``; evaluation samples greedily with guidance scale 2 unless
``eval.sampler`` says otherwise.  Every key is checked against the dataclass it overrides before any work
starts; unknown keys and wrongly typed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from jmini.config import CodecConfig, ConfigError, ModelConfig, codec_config, model_config, normalize_scale
from jmini.data.corpus import DEFAULT_COUNTS
from jmini.data.mixing import MixRatio
from jmini.evaluation import EVAL_SAMPLER
from jmini.inference import SamplerConfig
from jmini.training.pipeline import Stage0Plan
from jmini.training.plans import OptimizerConfig, StagePlan, default_plans

SECTIONS = ("scale", "seed", "paths", "corpus", "model", "codec", "stage0", "stages", "sampler", "eval")
PATH_KEYS = ("corpus", "run_dir", "checkpoint")
CORPUS_KEYS = ("counts", "augmented_ratio")
EVAL_KEYS = ("n_per_category", "sampler")


def _matches(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_matches(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if hint is frozenset or origin is frozenset:
        return isinstance(value, (list, tuple, set, frozenset)) and all(isinstance(v, str) for v in value)
    if hint is MixRatio:
        return isinstance(value, (str, MixRatio))
    if hint is OptimizerConfig:
        return isinstance(value, dict)
    return isinstance(value, hint)


def _typed_overrides(cls, overrides: dict, where: str, skip=()) -> dict:
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)} - set(skip)
    out = {}
    for k, v in overrides.items():
        if k not in names:
            raise ConfigError(f"unknown key {where}.{k}; expected one of {sorted(names)}")
        if not _matches(v, hints[k]):
            raise ConfigError(f"{where}.{k} = {v!r} does not match type {hints[k]}")
        if hints[k] is float and isinstance(v, int):
            v = float(v)
        if k == "optimizer":
            v = replace(OptimizerConfig(), **_typed_overrides(OptimizerConfig, v, f"{where}.optimizer"))
        out[k] = v
    return out


@dataclass
class RunConfig:
    scale: str = "toy"
    seed: int = 0
    paths: dict = field(default_factory=dict)
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    augmented_ratio: tuple[int, int] = (1, 1)
    model: ModelConfig = field(default_factory=model_config)
    codec: CodecConfig = field(default_factory=codec_config)
    stage0: Stage0Plan = field(default_factory=Stage0Plan)
    plans: list[StagePlan] = field(default_factory=default_plans)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_per_category: int = 50
    eval_sampler: SamplerConfig = field(default_factory=lambda: EVAL_SAMPLER)
    raw: dict = field(default_factory=dict)

    def path(self, key: str, default=None) -> Path | None:
        v = self.paths.get(key, default)
        return None if v is None else Path(v)


def build_run_config(raw: dict | None = None, scale: str | None = None, seed: int | None = None) -> RunConfig:
    """Validate ``raw`` (parsed JSON) and apply flag overrides, which take precedence."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {list(SECTIONS)}")
    scale = normalize_scale(scale if scale is not None else raw.get("scale", "toy"))
    seed = seed if seed is not None else raw.get("seed", 0)
    if not _matches(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")

    paths = raw.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - set(PATH_KEYS):
        raise ConfigError(f"paths accepts only {list(PATH_KEYS)}")
    if any(not isinstance(v, str) for v in paths.values()):
        raise ConfigError("paths values must be strings")

    corpus = raw.get("corpus", {})
    if not isinstance(corpus, dict) or set(corpus) - set(CORPUS_KEYS):
        raise ConfigError(f"corpus accepts only {list(CORPUS_KEYS)}")
    counts = dict(DEFAULT_COUNTS)
    for k, v in corpus.get("counts", {}).items():
        if k not in DEFAULT_COUNTS:
            raise ConfigError(f"unknown corpus kind {k!r}")
        if not _matches(v, int) or v < 0:
            raise ConfigError(f"corpus.counts.{k} must be a nonnegative integer")
        counts[k] = v
    ratio = corpus.get("augmented_ratio", [1, 1])
    if (not isinstance(ratio, (list, tuple)) or len(ratio) != 2 or not all(_matches(r, int) and r >= 0 for r in ratio)
            or sum(ratio) == 0):
        raise ConfigError("corpus.augmented_ratio must be two nonnegative integers, not both zero")

    try:
        model = model_config(scale, **_typed_overrides(ModelConfig, raw.get("model", {}), "model"))
        codec = codec_config(scale, **_typed_overrides(CodecConfig, raw.get("codec", {}), "codec"))
        stage0 = Stage0Plan(**_typed_overrides(Stage0Plan, raw.get("stage0", {}), "stage0"))
        stages = raw.get("stages", {})
        if not isinstance(stages, dict) or set(stages) - {"1", "2", "3"}:
            raise ConfigError('stages must be an object keyed by "1", "2", "3"')
        plans = []
        for p in default_plans(scale):
            kw = _typed_overrides(StagePlan, stages.get(str(p.stage_id), {}), f"stages.{p.stage_id}",
                                  skip=("stage_id",))
            plans.append(p.with_overrides(**kw))
        sampler = SamplerConfig(**_typed_overrides(SamplerConfig, raw.get("sampler", {}), "sampler"))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None

    ev = raw.get("eval", {})
    if not isinstance(ev, dict) or set(ev) - set(EVAL_KEYS):
        raise ConfigError(f"eval accepts only {list(EVAL_KEYS)}")
    n_eval = ev.get("n_per_category", 50)
    if not _matches(n_eval, int) or n_eval <= 0:
        raise ConfigError("eval.n_per_category must be a positive integer")
    try:
        eval_sampler = replace(EVAL_SAMPLER, **_typed_overrides(SamplerConfig, ev.get("sampler", {}), "eval.sampler"))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    return RunConfig(scale, seed, dict(paths), counts, tuple(ratio), model, codec, stage0, plans, sampler,
                     n_eval, eval_sampler, raw)


def load_run_config(path=None, scale: str | None = None, seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_run_config(raw, scale, seed)
