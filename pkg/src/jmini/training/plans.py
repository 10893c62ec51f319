"""Per-stage training plans and the learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from jmini.config import ConfigError, normalize_scale
from jmini.data.mixing import MixRatio
from jmini.model import GROUPS

CATEGORY_PROMPTS, DENSE_CAPTIONS = "category_prompts", "dense_captions"

STAGE1_GROUPS = frozenset({"und_adaptor", "gen_adaptor", "image_head"})
STAGE2_GROUPS = frozenset(GROUPS) - {"und_encoder", "gen_tokenizer"}
STAGE3_GROUPS = STAGE2_GROUPS | {"und_encoder"}
STAGE_GROUPS = {1: STAGE1_GROUPS, 2: STAGE2_GROUPS, 3: STAGE3_GROUPS}


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    schedule: str = "constant"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    steps: int
    warmup_steps: int
    learning_rate: float
    batch_size: int
    ratio: MixRatio
    trainable_groups: frozenset = field(default=frozenset())
    early_stop_step: int | None = None
    generation_data_mode: str = DENSE_CAPTIONS
    optimizer: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.stage_id not in STAGE_GROUPS:
            raise ConfigError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if not self.trainable_groups:
            object.__setattr__(self, "trainable_groups", STAGE_GROUPS[self.stage_id])
        if "gen_tokenizer" in self.trainable_groups:
            raise ConfigError("gen_tokenizer is never trainable in Stages I-III")
        if self.steps < 0 or self.warmup_steps < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError(f"invalid budget in stage {self.stage_id} plan")

    @property
    def executed_steps(self) -> int:
        if self.early_stop_step is None:
            return self.steps
        return min(self.steps, self.early_stop_step)

    def with_overrides(self, **kw) -> "StagePlan":
        if "ratio" in kw and isinstance(kw["ratio"], str):
            kw["ratio"] = MixRatio.parse(kw["ratio"])
        if "trainable_groups" in kw:
            kw["trainable_groups"] = frozenset(kw["trainable_groups"])
        return replace(self, **kw)


_RATIOS = (MixRatio(1, 0, 3), MixRatio(2, 3, 5), MixRatio(5, 1, 4))
_LRS = (1.0e-3, 1.0e-4, 4.0e-5)
_MODES = (CATEGORY_PROMPTS, DENSE_CAPTIONS, DENSE_CAPTIONS)

_BUDGETS = {
    # (steps, warmups, batch sizes, stage-2 early stop)
    "paper-1b": ((20_000, 360_000, 80_000), (600, 5000, 0), (256, 512, 128), 270_000),
    "paper-7b": ((20_000, 360_000, 40_000), (600, 5000, 0), (256, 512, 128), 270_000),
    "toy": ((200, 1200, 400), (20, 50, 0), (16, 32, 8), 900),
}

# Stage-I budget of the "short Stage I" ablation preset
SHORT_STAGE1_STEPS = 50


def default_plans(scale: str = "toy") -> list[StagePlan]:
    key = normalize_scale(scale)
    if key not in _BUDGETS:
        raise ConfigError(f"no training plans for scale {scale!r}")
    steps, warmups, batches, early = _BUDGETS[key]
    return [
        StagePlan(stage_id=i + 1, steps=steps[i], warmup_steps=warmups[i], learning_rate=_LRS[i],
                  batch_size=batches[i], ratio=_RATIOS[i], early_stop_step=early if i == 1 else None,
                  generation_data_mode=_MODES[i])
        for i in range(3)
    ]


def lr_at(step: int, plan: StagePlan) -> float:
    """Linear warmup from 0 over ``warmup_steps``, then constant."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= plan.warmup_steps:
        return plan.learning_rate
    return plan.learning_rate * step / plan.warmup_steps
