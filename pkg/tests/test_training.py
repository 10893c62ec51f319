import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from jmini.checkpoint import (MAGIC, CheckpointError, describe_checkpoint, group_hashes, load_checkpoint,
                              read_checkpoint, save_checkpoint)
from jmini.codecs import FreezingViolation
from jmini.config import ConfigError
from jmini.data.corpus import build_corpus
from jmini.data.mixing import MixRatio
from jmini.model import GROUPS, JanusMini
from jmini.training.data import StageSources, tokenize_corpus
from jmini.training.optim import AdamW, NonFiniteGradient, clip_grad_norm
from jmini.training.pipeline import run_pipeline, Stage0Plan
from jmini.training.plans import (CATEGORY_PROMPTS, STAGE_GROUPS, OptimizerConfig, StagePlan, default_plans,
                                  lr_at)
from jmini.training.stage import MissingPrerequisite, TrainState, resume_state, run_stage, stage_checkpoint_path


# -- optimizer ----------------------------------------------------------------

def test_first_adam_step_moves_by_lr_times_sign():
    p = torch.tensor([1.0, -2.0, 3.0])
    opt = AdamW({"p": p})
    opt.step({"p": torch.tensor([0.5, -0.01, 0.0])}, lr=0.1)
    # m_hat / sqrt(v_hat) = sign(g) on the first step, 0 for a zero gradient
    assert torch.allclose(p, torch.tensor([0.9, -1.9, 3.0]), atol=1e-6)


def test_zero_gradients_leave_params_unchanged():
    p = torch.randn(4)
    before = p.clone()
    opt = AdamW({"p": p})
    for _ in range(3):
        opt.step({"p": torch.zeros(4)}, lr=1.0)
    assert torch.equal(p, before)


def test_clip_scales_by_max_over_norm():
    g = {"a": torch.tensor([3.0, 4.0])}
    norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert torch.allclose(g["a"], torch.tensor([0.6, 0.8]))
    g = {"a": torch.tensor([0.3, 0.4])}
    clip_grad_norm(g, 1.0)
    assert torch.equal(g["a"], torch.tensor([0.3, 0.4]))


def test_weight_decay_zero_by_default():
    assert OptimizerConfig().weight_decay == 0.0


def test_nonfinite_gradient_names_group():
    opt = AdamW({"image_head/fc1.weight": torch.zeros(2)}, groups={"image_head/fc1.weight": "image_head"})
    with pytest.raises(NonFiniteGradient, match="image_head"):
        opt.step({"image_head/fc1.weight": torch.tensor([float("nan"), 0.0])}, lr=1e-3)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = torch.zeros(3, dtype=torch.float64)
    opt = AdamW({"p": p}, OptimizerConfig(grad_clip_norm=1e9))
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        opt.step({"p": torch.from_numpy(g.copy())}, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(p.numpy(), ref, rtol=1e-12)


# -- plans --------------------------------------------------------------------

# Golden values, transcribed cell by cell.
GOLDEN = {
    "paper-1b": dict(lr=(1e-3, 1e-4, 4e-5), warm=(600, 5000, 0), steps=(20_000, 360_000, 80_000),
                     batch=(256, 512, 128)),
    "paper-7b": dict(lr=(1e-3, 1e-4, 4e-5), warm=(600, 5000, 0), steps=(20_000, 360_000, 40_000),
                     batch=(256, 512, 128)),
}
RATIOS = ("1:0:3", "2:3:5", "5:1:4")


@pytest.mark.parametrize("scale", sorted(GOLDEN))
def test_paper_plans_golden_values(scale):
    plans = default_plans(scale)
    g = GOLDEN[scale]
    for i, p in enumerate(plans):
        assert p.stage_id == i + 1
        assert p.learning_rate == g["lr"][i]
        assert p.warmup_steps == g["warm"][i]
        assert p.steps == g["steps"][i]
        assert p.batch_size == g["batch"][i]
        assert str(p.ratio) == RATIOS[i]
        o = p.optimizer
        assert (o.beta1, o.beta2, o.weight_decay, o.grad_clip_norm, o.schedule) == (0.9, 0.95, 0.0, 1.0, "constant")
    assert plans[1].early_stop_step == 270_000
    assert plans[1].executed_steps == 270_000
    assert plans[0].early_stop_step is None and plans[2].early_stop_step is None


def test_toy_plans():
    plans = default_plans("toy")
    assert [p.steps for p in plans] == [200, 1200, 400]
    assert [p.warmup_steps for p in plans] == [20, 50, 0]
    assert [p.batch_size for p in plans] == [16, 32, 8]
    assert [p.learning_rate for p in plans] == [1e-3, 1e-4, 4e-5]
    assert plans[1].executed_steps < plans[1].steps
    assert plans[0].generation_data_mode == CATEGORY_PROMPTS


def test_stage_groups():
    assert STAGE_GROUPS[1] == {"und_adaptor", "gen_adaptor", "image_head"}
    assert STAGE_GROUPS[2] == set(GROUPS) - {"und_encoder", "gen_tokenizer"}
    assert STAGE_GROUPS[3] == STAGE_GROUPS[2] | {"und_encoder"}
    with pytest.raises(ConfigError):
        default_plans("toy")[0].with_overrides(trainable_groups=["gen_tokenizer"])


def test_lr_schedule():
    p = default_plans("paper-1b")[0]
    assert lr_at(0, p) == 0.0
    assert lr_at(300, p) == pytest.approx(5e-4)
    assert lr_at(600, p) == 1e-3 and lr_at(19_999, p) == 1e-3
    assert lr_at(0, default_plans("paper-1b")[2]) == 4e-5
    with pytest.raises(ValueError):
        lr_at(-1, p)


def test_plan_validation():
    with pytest.raises(ConfigError):
        StagePlan(4, 1, 0, 1e-3, 1, MixRatio(1, 1, 1))
    with pytest.raises(ConfigError):
        StagePlan(1, 1, 0, 0.0, 1, MixRatio(1, 1, 1))
    with pytest.raises(ConfigError):
        default_plans("huge")


def test_batch_composition_matches_ratio_in_expectation():
    r = MixRatio(5, 1, 4)
    assert [Fraction(x).limit_denominator() for x in r.probabilities] == [Fraction(1, 2), Fraction(1, 10),
                                                                            Fraction(2, 5)]


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model, {"stage": 1, "step": 3})
    model, meta, opt = load_checkpoint(path)
    assert group_hashes(model) == group_hashes(small_model)
    assert meta["progress"] == {"stage": 1, "step": 3} and opt == {}
    assert path.read_bytes().startswith(MAGIC)


def test_checkpoint_rejects_bad_header(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTJMINI" + bytes(100))
    with pytest.raises(CheckpointError, match="header"):
        read_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model)
    data = path.read_bytes()
    for cut in (5, 12, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)


def test_checkpoint_failure_leaves_no_partial(tmp_path, small_model, monkeypatch):
    import jmini.checkpoint as ck

    def boom(*a, **k):
        raise OSError("disk full")
    monkeypatch.setattr(ck.struct, "pack", boom)
    with pytest.raises(OSError):
        save_checkpoint(tmp_path / "m.ckpt", small_model)
    assert list(tmp_path.iterdir()) == []


def test_describe_lists_every_group(tmp_path, small_model):
    text = describe_checkpoint(save_checkpoint(tmp_path / "m.ckpt", small_model))
    for g in GROUPS:
        assert g in text


# -- stages -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    return build_corpus({"understanding": 40, "pure_text": 40, "generation": 60}, seed=1)


def _ready_model(small_cfg, small_codec, corpus):
    m = JanusMini(small_cfg, small_codec, seed=0)
    m.gen_tokenizer.frozen = True
    tokenize_corpus(corpus, m.gen_tokenizer)
    return m


def _tiny_plan(stage_id, steps=4, **kw):
    p = default_plans("toy")[stage_id - 1]
    return p.with_overrides(**{"steps": steps, "warmup_steps": 0, "batch_size": 4, "early_stop_step": None, **kw})


@pytest.mark.parametrize("stage_id", [1, 2, 3])
def test_freezing_exactness(stage_id, small_cfg, small_codec, tiny_corpus):
    m = _ready_model(small_cfg, small_codec, tiny_corpus)
    plan = _tiny_plan(stage_id, learning_rate=1e-2)
    before = group_hashes(m)
    run_stage(plan, m, StageSources(tiny_corpus, stage_id, plan.generation_data_mode))
    after = group_hashes(m)
    for g in GROUPS:
        if g in plan.trainable_groups:
            assert after[g] != before[g], g
        else:
            assert after[g] == before[g], g


def test_frozen_group_change_is_detected(small_cfg, small_codec, tiny_corpus, monkeypatch):
    import jmini.training.stage as st
    m = _ready_model(small_cfg, small_codec, tiny_corpus)
    real = st.train_step

    def tamper(model, *a):
        with torch.no_grad():
            model.text_embedding.weight[0, 0] += 1.0
        return real(model, *a)
    monkeypatch.setattr(st, "train_step", tamper)
    with pytest.raises(FreezingViolation, match="text_embedding"):
        run_stage(_tiny_plan(1, steps=1), m, StageSources(tiny_corpus, 1, CATEGORY_PROMPTS))


def test_early_stop_truncates_stage(small_cfg, small_codec, tiny_corpus):
    m = _ready_model(small_cfg, small_codec, tiny_corpus)
    plan = _tiny_plan(2, steps=6).with_overrides(early_stop_step=3)
    state = run_stage(plan, m, StageSources(tiny_corpus, 2, plan.generation_data_mode))
    assert state.step == 3


def test_stage1_requires_frozen_tokenizer(small_model, tiny_corpus):
    tokenize_corpus(tiny_corpus, small_model.gen_tokenizer)
    with pytest.raises(MissingPrerequisite):
        run_stage(_tiny_plan(1), small_model, StageSources(tiny_corpus, 1, CATEGORY_PROMPTS))


def test_data_rng_is_a_function_of_step():
    s = TrainState(2, step=7, seed=3)
    assert s.rng().random() == np.random.default_rng([3, 2, 7]).random()


def test_overfit_fixed_batch(small_cfg, small_codec, tiny_corpus, monkeypatch):
    """Stage-2-style training on a fixed set of 8 samples drives the loss far down."""
    m = _ready_model(small_cfg, small_codec, tiny_corpus)
    sources = StageSources(tiny_corpus, 2, "dense_captions")
    fixed = [sources.understanding(np.random.default_rng(i)) for i in range(3)]
    fixed += [sources.pure_text(np.random.default_rng(i)) for i in range(2)]
    fixed += [sources.generation(np.random.default_rng(i)) for i in range(3)]

    class Fixed:
        def as_list(self):
            return [[s for s in fixed if s.kind == k] for k in ("understanding", "pure_text", "generation")]
    plan = _tiny_plan(2, steps=100, learning_rate=1e-2, batch_size=16)
    import jmini.training.stage as st
    monkeypatch.setattr(st, "mix", lambda srcs, ratio, n, rng: list(fixed))
    state = run_stage(plan, m, Fixed())
    losses = [r["loss"] for r in state.history]
    assert losses[-1] < 0.1 * losses[0]


def test_resume_is_bit_identical(tmp_path, small_cfg, small_codec):
    corpus = build_corpus({"understanding": 30, "pure_text": 30, "generation": 40}, seed=2)
    plans = [_tiny_plan(i, steps=4) for i in (1, 2, 3)]
    s0 = Stage0Plan(steps=20, batch_size=8, restart_every=0)
    full = run_pipeline(corpus, plans, small_cfg, small_codec, tmp_path / "a", seed=4, stage0=s0)
    run_pipeline(corpus, plans, small_cfg, small_codec, tmp_path / "b", seed=4, stage0=s0, stop_after={2: 2},
                 checkpoint_every=1)
    assert stage_checkpoint_path(tmp_path / "b", 2, latest=True).exists()
    resumed = run_pipeline(corpus, plans, small_cfg, small_codec, tmp_path / "b", seed=4, from_stage=2,
                           resume=True)
    assert group_hashes(full.model) == group_hashes(resumed.model)
    a = (tmp_path / "a" / "stage3.ckpt").read_bytes()
    b = (tmp_path / "b" / "stage3.ckpt").read_bytes()
    assert a == b


def test_missing_prerequisite_names_stage(tmp_path, small_cfg, small_codec, tiny_corpus):
    with pytest.raises(MissingPrerequisite, match="stage 1"):
        run_pipeline(tiny_corpus, default_plans("toy"), small_cfg, small_codec, tmp_path, from_stage=2)


def test_resume_rejects_wrong_stage(tmp_path, small_cfg, small_codec, tiny_corpus):
    m = _ready_model(small_cfg, small_codec, tiny_corpus)
    plan = _tiny_plan(1, steps=2)
    run_stage(plan, m, StageSources(tiny_corpus, 1, CATEGORY_PROMPTS), run_dir=tmp_path)
    with pytest.raises(MissingPrerequisite):
        resume_state(stage_checkpoint_path(tmp_path, 1), _tiny_plan(2))
