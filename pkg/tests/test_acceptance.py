"""Acceptance suite: one pass/fail line per criterion, printed at the end of the run.

Criteria 4, 5 and 8 to 11 share a single full toy run (corpus, stage 0,
Stages I-III) built once per session.  The summary lines are also written to
``acceptance_report.txt`` in the pytest root directory.
"""

import json
import time

import numpy as np
import pytest
import torch
from scipy import stats

from jmini.checkpoint import group_hashes, load_checkpoint
from jmini.codecs import VQCodebook, quantize
from jmini.config import codec_config, model_config
from jmini.data.corpus import load_corpus, write_corpus
from jmini.data.mixing import MixRatio, draw_kinds, mix
from jmini.data.packing import pack
from jmini.evaluation import compositional_eval, evaluate_renderer
from jmini.imageio import save_png
from jmini.inference import SamplerConfig, generate_ids, generate_image
from jmini.model import GROUPS, JanusMini
from jmini.runconfig import build_run_config
from jmini.training.gradcheck import grad_check
from jmini.training.pipeline import run_pipeline
from jmini.training.plans import STAGE_GROUPS, default_plans
from jmini.training.stage import stage_checkpoint_path

from conftest import random_sequence

pytestmark = pytest.mark.slow

LINES = {}


def record(n: int, ok: bool, detail: str):
    LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, LINES[n]


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), b.abs().max().item())
    return 0.0 if scale == 0 else (a - b).abs().max().item() / scale


# -- shared toy run -----------------------------------------------------------

@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    rc = build_run_config({}, scale="toy", seed=0)
    t0 = time.perf_counter()
    write_corpus(root / "corpus", rc.counts, rc.seed, rc.codec.image_side, rc.augmented_ratio)
    corpus = load_corpus(root / "corpus")
    res = run_pipeline(corpus, rc.plans, rc.model, rc.codec, root / "run", rc.seed, rc.stage0,
                       checkpoint_every=100)
    seconds = time.perf_counter() - t0
    return {"root": root, "rc": rc, "result": res, "seconds": seconds, "corpus": corpus}


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_gradient_fidelity():
    torch.manual_seed(0)
    model = JanusMini(model_config("gradcheck"), codec_config("gradcheck"), seed=0)
    rep = grad_check(model, coords_per_tensor=64)
    covered = all(rep.groups[g].checked > 0 and rep.groups[g].status != "skipped" for g in GROUPS)
    ok = rep.passed and rep.max_rel_error < 1e-4 and covered and rep.seconds < 120
    record(1, ok, f"max rel err {rep.max_rel_error:.2e} (< 1e-4) over {len(GROUPS)} groups, "
                  f"{rep.seconds:.1f}s (< 120s)")


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_packing_equivalence():
    torch.manual_seed(0)
    model = JanusMini(model_config("gradcheck", context_window=96), codec_config("gradcheck"), seed=0)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(2)
    worst_loss = worst_grad = 0.0
    for _ in range(100):
        seqs = [random_sequence(rng, model) for _ in range(int(rng.integers(2, 7)))]
        model.zero_grad(set_to_none=True)
        packed = model.packed_loss(pack(seqs, model.cfg.context_window))
        packed.backward()
        g_packed = {n: p.grad.clone() for n, p in params.items() if p.grad is not None}
        model.zero_grad(set_to_none=True)
        count = sum(int(s.loss_flag.sum()) for s in seqs)
        unpacked = sum(model.sequence_loss(s, reduction="sum") for s in seqs) / count
        unpacked.backward()
        g_single = {n: p.grad.clone() for n, p in params.items() if p.grad is not None}
        assert set(g_packed) == set(g_single)
        worst_loss = max(worst_loss, abs(packed.item() - unpacked.item()) / abs(unpacked.item()))
        worst_grad = max([worst_grad] + [_rel(g_packed[n], g_single[n]) for n in g_single])
    ok = worst_loss < 1e-5 and worst_grad < 1e-5
    record(2, ok, f"100 sets, max rel diff loss {worst_loss:.1e}, gradients {worst_grad:.1e} (< 1e-5)")


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_causality_and_isolation():
    torch.manual_seed(0)
    model = JanusMini(model_config("gradcheck", context_window=96), codec_config("gradcheck"), seed=0)
    model.eval()
    rng = np.random.default_rng(3)
    probes = violations = 0
    with torch.no_grad():
        for _ in range(100):
            seqs = [random_sequence(rng, model) for _ in range(int(rng.integers(2, 5)))]
            batch = pack(seqs, model.cfg.context_window)
            base = model.forward_packed(batch)
            row = 0
            starts = batch.boundaries[row] + [int((batch.segment[row] >= 0).sum())]
            # causality: change one text token, everything before it is untouched
            text_pos = [j for j in range(1, starts[-1]) if batch.modality[row, j] == 0]
            j = int(rng.choice(text_pos))
            old = batch.ids[row, j]
            batch.ids[row, j] = 4 + (old - 3) % (model.cfg.vocab_size - 4)
            out = model.forward_packed(batch)
            batch.ids[row, j] = old
            probes += 1
            violations += not (torch.equal(out.text_logits[row, :j], base.text_logits[row, :j])
                               and torch.equal(out.image_logits[row, :j], base.image_logits[row, :j]))
            # isolation: change the last segment, earlier segments are untouched
            if len(starts) > 2:
                s0 = starts[-2]
                seg_text = [k for k in range(s0, starts[-1]) if batch.modality[row, k] == 0]
                k = seg_text[0]
                old = batch.ids[row, k]
                batch.ids[row, k] = 4 + (old - 3) % (model.cfg.vocab_size - 4)
                out = model.forward_packed(batch)
                batch.ids[row, k] = old
                probes += 1
                violations += not (torch.equal(out.text_logits[row, :s0], base.text_logits[row, :s0])
                                   and torch.equal(out.image_logits[row, :s0], base.image_logits[row, :s0]))
    record(3, violations == 0, f"{probes} randomized probes, {violations} bitwise violations")


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_freezing_exactness(toy_run):
    run = toy_run["root"] / "run"
    paths = [run / "stage0.ckpt"] + [stage_checkpoint_path(run, k) for k in (1, 2, 3)]
    hashes = [group_hashes(load_checkpoint(p)[0]) for p in paths]
    bad = []
    for k in (1, 2, 3):
        for g in GROUPS:
            changed = hashes[k][g] != hashes[k - 1][g]
            if changed != (g in STAGE_GROUPS[k]):
                bad.append(f"stage {k} {g} {'changed' if changed else 'unchanged'}")
    record(4, not bad, "frozen groups bit-identical, trainable groups updated in stages 1-3"
           if not bad else "; ".join(bad))


# -- 5 ------------------------------------------------------------------------

def test_criterion_05_hyperparameters(toy_run):
    table = {  # scale: (steps, warmups, batch sizes)
        "paper-1b": ((20_000, 360_000, 80_000), (600, 5000, 0), (256, 512, 128)),
        "paper-7b": ((20_000, 360_000, 40_000), (600, 5000, 0), (256, 512, 128)),
    }
    lrs, ratios = (1e-3, 1e-4, 4e-5), ("1:0:3", "2:3:5", "5:1:4")
    bad = []
    for scale, (steps, warm, batch) in table.items():
        for i, p in enumerate(default_plans(scale)):
            o = p.optimizer
            got = (p.learning_rate, p.warmup_steps, p.steps, p.batch_size, str(p.ratio),
                   o.beta1, o.beta2, o.grad_clip_norm, o.weight_decay, o.schedule)
            want = (lrs[i], warm[i], steps[i], batch[i], ratios[i], 0.9, 0.95, 1.0, 0.0, "constant")
            if got != want:
                bad.append(f"{scale} stage {i + 1}: {got} != {want}")
        if default_plans(scale)[1].executed_steps != 270_000:
            bad.append(f"{scale} stage 2 early stop")
    toy2 = toy_run["result"].histories[2]
    if len(toy2) != default_plans("toy")[1].executed_steps:
        bad.append("toy stage 2 did not stop early")
    record(5, not bad, "every cell of both paper presets and the 270K stage-2 early stop"
           if not bad else "; ".join(bad))


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_mixing_statistics():
    kinds = draw_kinds(MixRatio(2, 3, 5), 10_000, np.random.default_rng(6))
    counts = np.bincount(kinds, minlength=3)
    p = stats.chisquare(counts, MixRatio(2, 3, 5).expected_counts(10_000)).pvalue
    drawn = mix([["u"], ["t"], ["g"]], MixRatio(1, 0, 3), 10_000, np.random.default_rng(7))
    n_text = drawn.count("t")
    record(6, p > 0.01 and n_text == 0,
           f"2:3:5 counts {counts.tolist()} chi-square p={p:.3f} (> 0.01); 1:0:3 pure-text draws {n_text}")


# -- 7 ------------------------------------------------------------------------

def _nearest(lat, codes):
    out = []
    for z in lat.astype(np.float64):
        d = [float(((z - c) ** 2).sum()) for c in codes.astype(np.float64)]
        out.append(min(range(len(d)), key=lambda k: (d[k], k)))
    return np.array(out)


def test_criterion_07_quantizer_oracle():
    rng = np.random.default_rng(7)
    mismatches = ties = 0
    for case in range(1000):
        k, d, n = int(rng.integers(1, 65)), int(rng.integers(1, 17)), int(rng.integers(1, 33))
        codes = rng.normal(size=(k, d)).astype(np.float32)
        if case % 5 == 0 and k > 1:
            codes[rng.integers(0, k, k // 2)] = codes[0]
        lat = rng.normal(size=(n, d)).astype(np.float32)
        if case % 3 == 0:
            lat[: (n + 1) // 2] = codes[rng.integers(0, k, (n + 1) // 2)]
        cb = VQCodebook(k, d)
        with torch.no_grad():
            cb.codes.copy_(torch.from_numpy(codes))
        ids, _ = quantize(torch.from_numpy(lat), cb)
        ref = _nearest(lat, codes)
        ties += int(len(np.unique(codes, axis=0)) < k)
        mismatches += int(not np.array_equal(ids.numpy(), ref))
    record(7, mismatches == 0, f"1000 cases ({ties} with duplicate codes), {mismatches} mismatches")


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_tokenizer(toy_run):
    rep = toy_run["result"].tokenizer
    ok = rep.heldout_mse < 0.02 and rep.utilization > 0.30 and rep.seconds <= 15 * 60
    record(8, ok, f"held-out MSE {rep.heldout_mse:.4f} (< 0.02), utilization {rep.utilization:.0%} (> 30%), "
                  f"{rep.seconds:.0f}s (<= 900s)")


# -- 9 ------------------------------------------------------------------------

def test_criterion_09_end_to_end_training(toy_run):
    res = toy_run["result"]
    s = res.summaries
    img1 = s[1]["image_loss"]
    drop = 1 - img1["final"] / img1["initial"]
    ratios = {k: s[k]["loss"]["final"] / s[k]["loss"]["initial"] for k in (1, 2, 3)}
    secs = toy_run["seconds"]
    (toy_run["root"] / "summaries.json").write_text(json.dumps(s, indent=2))
    ok = secs <= 30 * 60 and drop >= 0.30 and all(r < 0.5 for r in ratios.values())
    record(9, ok, f"{secs / 60:.1f} min (<= 30); stage-1 image loss drop {drop:.0%} (>= 30%); final/initial "
                  + ", ".join(f"S{k} {r:.2f}" for k, r in ratios.items()) + " (each < 0.50)")


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_compositional_eval(toy_run):
    gt = evaluate_renderer(50, seed=0)
    model = load_checkpoint(toy_run["root"] / "run" / "stage3.ckpt")[0]
    rep = compositional_eval(model, 50, seed=0, out_dir=toy_run["root"] / "eval")
    single, overall = rep.accuracy["single_object"], rep.overall
    ok = all(v == 1.0 for v in gt.accuracy.values()) and single >= 0.8 and overall >= 0.5
    cats = ", ".join(f"{k} {v:.2f}" for k, v in rep.accuracy.items())
    record(10, ok, f"ground truth {gt.overall:.2f} in all six; trained single-object {single:.2f} (>= 0.8), "
                   f"overall {overall:.2f} (>= 0.5) [{cats}]")


# -- 11 -----------------------------------------------------------------------

def test_criterion_11_determinism(toy_run, tmp_path):
    import shutil
    rc, src = toy_run["rc"], toy_run["root"] / "run"
    corpus = toy_run["corpus"]
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        shutil.copy(src / "stage2.ckpt", tmp_path / name / "stage2.ckpt")
    straight = run_pipeline(corpus, rc.plans, rc.model, rc.codec, tmp_path / "a", rc.seed, from_stage=3)
    half = rc.plans[2].executed_steps // 2
    run_pipeline(corpus, rc.plans, rc.model, rc.codec, tmp_path / "b", rc.seed, from_stage=3,
                 checkpoint_every=half, stop_after={3: half})
    run_pipeline(corpus, rc.plans, rc.model, rc.codec, tmp_path / "b", rc.seed, from_stage=3, resume=True)
    a = (tmp_path / "a" / "stage3.ckpt").read_bytes()
    b = (tmp_path / "b" / "stage3.ckpt").read_bytes()
    same_as_run = a == (src / "stage3.ckpt").read_bytes()

    model = straight.model
    cfg = SamplerConfig(seed=123)
    ids = [generate_ids(model, ["a red circle", "a blue square"], cfg) for _ in range(2)]
    for k in range(2):
        save_png(tmp_path / f"g{k}.png", generate_image(model, "a green triangle", cfg))
    png_same = (tmp_path / "g0.png").read_bytes() == (tmp_path / "g1.png").read_bytes()
    ok = a == b and same_as_run and np.array_equal(ids[0], ids[1]) and png_same
    record(11, ok, f"resumed stage 3 checkpoint identical: {a == b}; rerun identical to original: {same_as_run}; "
                   f"seeded ids identical: {np.array_equal(ids[0], ids[1])}; PNG bytes identical: {png_same}")
