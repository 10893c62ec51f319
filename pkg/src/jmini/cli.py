"""``jmini`` command line: corpus, train, generate, understand, eval, inspect, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 I/O error (including
unreadable checkpoints), 4 contract error (missing prerequisite stage,
grammar or freezing violations).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from jmini.config import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT = 0, 2, 3, 4

log = logging.getLogger("jmini")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p, *, checkpoint=False, out=False, sampler=False):
    p.add_argument("--config", metavar="PATH", help="JSON run config")
    p.add_argument("--scale", choices=["toy", "paper-1b", "paper-7b"], help="preset (overrides the config)")
    p.add_argument("--seed", type=int, help="seed (overrides the config)")
    if checkpoint:
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
    if out:
        p.add_argument("--out", metavar="DIR", help="output location")
    if sampler:
        p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale (1 disables)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="jmini", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("corpus", help="write the synthetic shapes corpus")
    _common(p, out=True)

    p = sub.add_parser("train", help="stage 0 tokenizer pretraining, then Stages I-III")
    _common(p, out=True)
    p.add_argument("--corpus", metavar="DIR", help="corpus directory (default: config paths.corpus)")
    p.add_argument("--from-stage", type=int, choices=[0, 1, 2, 3], default=0)
    p.add_argument("--resume", action="store_true", help="continue the first stage from its _latest checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=100)

    p = sub.add_parser("generate", help="caption -> PNG")
    _common(p, checkpoint=True, out=True, sampler=True)
    p.add_argument("prompt")

    p = sub.add_parser("understand", help="image + question -> answer")
    _common(p, checkpoint=True, sampler=True)
    p.add_argument("image")
    p.add_argument("question")

    p = sub.add_parser("eval", help="compositional evaluation over held-out prompts")
    _common(p, checkpoint=True, out=True, sampler=True)
    p.add_argument("--n-per-category", type=int)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("path", nargs="?")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--coords", type=int, default=16, help="coordinates per tensor (0 = all)")
    p.add_argument("--preset", choices=["gradcheck", "run"], default="gradcheck",
                   help="model to check: the small gradcheck preset or the run config's model")
    return ap


def _run_config(args):
    from jmini.runconfig import load_run_config
    return load_run_config(args.config, args.scale, args.seed)


def _sampler(rc, args, base=None):
    from dataclasses import replace
    kw = {"seed": rc.seed}
    if getattr(args, "cfg_scale", None) is not None:
        kw["cfg_scale"] = args.cfg_scale
    try:
        return replace(base or rc.sampler, **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _checkpoint_path(rc, args) -> Path:
    path = getattr(args, "checkpoint", None) or rc.paths.get("checkpoint")
    if path is None:
        run_dir = rc.path("run_dir")
        if run_dir is None:
            raise ConfigError("no checkpoint given (--checkpoint or paths.checkpoint)")
        path = run_dir / "stage3.ckpt"
    return Path(path)


def _load(path):
    from jmini.checkpoint import load_checkpoint
    model, _, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_corpus(args) -> int:
    from jmini.data.corpus import write_corpus
    rc = _run_config(args)
    out = Path(args.out) if args.out else rc.path("corpus")
    if out is None:
        raise ConfigError("no corpus directory (--out or paths.corpus)")
    manifest = write_corpus(out, rc.counts, rc.seed, rc.codec.image_side, rc.augmented_ratio)
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from jmini.data.corpus import load_corpus
    from jmini.training.pipeline import run_pipeline
    from jmini.training.stage import JsonlLogger

    rc = _run_config(args)
    corpus_dir = Path(args.corpus) if args.corpus else rc.path("corpus")
    run_dir = Path(args.out) if args.out else rc.path("run_dir")
    if corpus_dir is None or run_dir is None:
        raise ConfigError("train needs a corpus directory and a run directory")
    corpus = load_corpus(corpus_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps({**rc.raw, "scale": rc.scale, "seed": rc.seed}, indent=2,
                                                    sort_keys=True) + "\n")
    logger = JsonlLogger(run_dir / "log.jsonl")

    def emit(rec):
        logger(rec)
        if rec.get("event") == "start":
            print(f"stage {rec['stage']}: trainable groups {', '.join(rec['trainable_groups'])}"
                  f" ({rec['executed_steps']} steps, starting at {rec['step']})", flush=True)
        elif rec.get("event") == "complete":
            print(f"stage 0: tokenizer frozen, held-out mse {rec['heldout_mse']:.4f}, "
                  f"codebook utilization {rec['utilization']:.2f}", flush=True)

    res = run_pipeline(corpus, rc.plans, rc.model, rc.codec, run_dir, rc.seed, rc.stage0, args.from_stage,
                       args.resume, args.checkpoint_every, log_fn=emit)
    print("final loss summary (mean of first / last logged window):")
    for stage, summ in sorted(res.summaries.items()):
        parts = [f"{k} {v['initial']:.3f} -> {v['final']:.3f}" for k, v in summ.items()]
        print(f"  stage {stage}: " + "; ".join(parts))
    return EXIT_OK


def cmd_generate(args) -> int:
    from jmini.imageio import save_png
    from jmini.inference import generate_image

    rc = _run_config(args)
    ckpt = _checkpoint_path(rc, args)
    cfg = _sampler(rc, args)
    img = generate_image(_load(ckpt), args.prompt, cfg)
    out = Path(args.out or "generated.png")
    if out.suffix.lower() != ".png":
        out = out / "generated.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, img)
    meta = {"prompt": args.prompt, "checkpoint": str(ckpt), "sampler": cfg.__dict__}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def cmd_understand(args) -> int:
    from jmini.data.preprocess import preprocess_understanding
    from jmini.imageio import load_png
    from jmini.inference import GREEDY, understand

    rc = _run_config(args)
    model = _load(_checkpoint_path(rc, args))
    img = preprocess_understanding(load_png(args.image), model.codec.image_side)
    print(understand(model, img, args.question, GREEDY))
    return EXIT_OK


def cmd_eval(args) -> int:
    from jmini.evaluation import compositional_eval

    rc = _run_config(args)
    ckpt = _checkpoint_path(rc, args)
    n = args.n_per_category or rc.n_per_category
    if n <= 0:
        raise ConfigError("--n-per-category must be positive")
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    report = compositional_eval(_load(ckpt), n, rc.seed, _sampler(rc, args, rc.eval_sampler), out)
    print(report.table())
    return EXIT_OK


def cmd_inspect(args) -> int:
    from jmini.checkpoint import describe_checkpoint
    path = args.checkpoint or args.path
    if path is None:
        raise ConfigError("inspect needs a checkpoint path")
    print(describe_checkpoint(path))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from jmini.config import codec_config, model_config
    from jmini.model import JanusMini
    from jmini.training.gradcheck import grad_check

    rc = _run_config(args)
    torch.manual_seed(rc.seed)
    if args.preset == "gradcheck":
        cfg, codec = model_config("gradcheck"), codec_config("gradcheck")
    else:
        cfg, codec = rc.model, rc.codec
    report = grad_check(JanusMini(cfg, codec, seed=rc.seed), seed=rc.seed,
                        coords_per_tensor=args.coords or None)
    print(report.table())
    print(f"max relative error {report.max_rel_error:.2e} ({'pass' if report.passed else 'FAIL'}), "
          f"{report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_CONTRACT


COMMANDS = {"corpus": cmd_corpus, "train": cmd_train, "generate": cmd_generate, "understand": cmd_understand,
            "eval": cmd_eval, "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def _exit_code(exc: BaseException) -> int:
    from jmini.checkpoint import CheckpointError
    from jmini.codecs import FreezingViolation
    from jmini.inference import GrammarError
    from jmini.sequence import SequenceError
    from jmini.training.stage import MissingPrerequisite

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(exc, (MissingPrerequisite, GrammarError, FreezingViolation, SequenceError)):
        return EXIT_CONTRACT
    return -1


def main(argv=None) -> int:
    threads = os.environ.get("JMINI_THREADS")
    try:
        if threads:
            n = int(threads)
            if n <= 0:
                raise ValueError
            torch.set_num_threads(n)
    except ValueError:
        print(f"jmini: JMINI_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001  (mapped to documented exit codes below)
        code = _exit_code(e)
        if code < 0:
            raise
        print(f"jmini: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
