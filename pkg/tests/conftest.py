import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from jmini.config import codec_config, model_config
from jmini.model import JanusMini
from jmini.sequence import SequenceBuilder
from jmini.text import VOCAB


@pytest.fixture
def small_cfg():
    return model_config("gradcheck", embed_dim=16, n_heads=2, n_layers=2, context_window=64)


@pytest.fixture
def small_codec():
    return codec_config("gradcheck")


@pytest.fixture
def small_model(small_cfg, small_codec):
    return JanusMini(small_cfg, small_codec, seed=0)


def random_sequence(rng, model, kind=None):
    """A valid random sequence of one of the three templates."""
    c = model.codec
    kind = kind or ("und", "text", "gen")[rng.integers(3)]
    words = lambda n: [int(x) for x in rng.integers(4, VOCAB.size, n)]
    b = SequenceBuilder()
    if kind == "und":
        img = rng.random((c.image_side, c.image_side, 3)).astype(np.float32)
        b.text(words(int(rng.integers(1, 5)))).text([VOCAB.boi]).und(c.und_tokens, image=img).text([VOCAB.eoi])
        b.text(words(int(rng.integers(1, 4))) + [VOCAB.eos], flag=True)
    elif kind == "text":
        b.text(words(int(rng.integers(2, 10))) + [VOCAB.eos], flag=True)
    else:
        if rng.random() < 0.8:
            b.text(words(int(rng.integers(1, 6))))
        b.text([VOCAB.boi]).gen(rng.integers(0, model.cfg.codebook_size, c.gen_tokens), flag=True)
        b.text([VOCAB.eoi])
    return b.build()


@pytest.fixture
def seq_factory():
    return random_sequence


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    ran = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if name.startswith("test_criterion_"):
                ran[int(name.split("_")[2])] = outcome
    if not ran:
        return
    lines = [mod.LINES.get(n, f"criterion {n:>2}: FAIL  did not reach its measurement ({ran[n]})")
             for n in sorted(ran)]
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    Path(terminalreporter.config.rootpath, "acceptance_report.txt").write_text("\n".join(lines) + "\n")
