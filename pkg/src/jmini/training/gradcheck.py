"""Central finite-difference check of analytic gradients, per parameter group."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from jmini.data.packing import pack
from jmini.model import GROUPS, JanusMini
from jmini.sequence import SequenceBuilder
from jmini.text import VOCAB

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class GroupResult:
    group: str
    status: str               # "ok", "FAIL" or "skipped"
    max_rel_error: float | None
    checked: int              # coordinates compared

    def line(self) -> str:
        err = "-" if self.max_rel_error is None else f"{self.max_rel_error:.2e}"
        return f"{self.group:<20} {self.status:<8} max_rel_err={err} coords={self.checked}"


@dataclass
class GradCheckReport:
    groups: dict[str, GroupResult]
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.status != "FAIL" for r in self.groups.values())

    @property
    def max_rel_error(self) -> float:
        errs = [r.max_rel_error for r in self.groups.values() if r.max_rel_error is not None]
        return max(errs) if errs else 0.0

    def table(self) -> str:
        return "\n".join(r.line() for r in self.groups.values())


def probe_batch(model: JanusMini, seed: int = 0, vocab=VOCAB):
    """A packed batch touching every group: understanding, pure-text and generation rows."""
    rng = np.random.default_rng(seed)
    c = model.codec
    words = lambda n: [int(x) for x in rng.integers(4, vocab.size, n)]
    image = rng.random((c.image_side, c.image_side, 3)).astype(np.float32)
    und = (SequenceBuilder().text(words(3)).text([vocab.boi]).und(c.und_tokens, image=image).text([vocab.eoi])
           .text(words(3) + [vocab.eos], flag=True).build())
    txt = SequenceBuilder().text(words(6) + [vocab.eos], flag=True).build()
    ids = rng.integers(0, model.cfg.codebook_size, c.gen_tokens)
    gen = SequenceBuilder().text(words(4) + [vocab.boi]).gen(ids, flag=True).text([vocab.eoi]).build()
    return pack([und, txt, gen], model.cfg.context_window)


def _coords(shape, k: int, rng, grad: np.ndarray):
    """``k`` flat indices: the largest-|grad| entries plus random ones (all entries if the tensor is small)."""
    n = int(np.prod(shape))
    if k is None or n <= k:
        return np.arange(n)
    top = np.argsort(-np.abs(grad.reshape(-1)), kind="stable")[: k // 2]
    rest = rng.choice(n, size=k - len(top), replace=False)
    return np.unique(np.concatenate([top, rest]))


def grad_check(model: JanusMini, batch=None, groups=None, tolerance: float = TOLERANCE, h: float = STEP,
               coords_per_tensor: int | None = 16, seed: int = 0, corrupt=None) -> GradCheckReport:
    """Compare autograd against central differences in float64.

    ``groups`` selects the trainable groups (default: all); the rest are
    reported as skipped.  The error for a tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked coordinates; a group's error is the max over its tensors.
    ``corrupt(name, grad) -> grad`` perturbs analytic gradients (test hook).
    """
    start = time.perf_counter()
    groups = set(GROUPS if groups is None else groups)
    model = model.double()
    model.set_trainable(groups)
    batch = batch if batch is not None else probe_batch(model, seed)
    rng = np.random.default_rng([seed, 1])

    def f() -> float:
        with torch.no_grad():
            return float(model.packed_loss(batch, reduction="sum"))

    model.zero_grad(set_to_none=True)
    model.packed_loss(batch, reduction="sum").backward()
    results = {}
    for group, params in model.parameter_groups().items():
        if group not in groups:
            results[group] = GroupResult(group, "skipped", None, 0)
            continue
        worst, count = 0.0, 0
        for name, p in params.items():
            a = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            if corrupt is not None:
                a = corrupt(f"{group}/{name}", a)
            a = a.numpy().reshape(-1)
            idx = _coords(p.shape, coords_per_tensor, rng, a)
            flat = p.data.view(-1)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f()
                flat[i] = orig - h
                down = f()
                flat[i] = orig
                num[j] = (up - down) / (2 * h)
            scale = max(np.abs(a[idx]).max(), np.abs(num).max())
            if scale > 0:
                worst = max(worst, float(np.abs(a[idx] - num).max() / scale))
            count += len(idx)
        results[group] = GroupResult(group, "ok" if worst < tolerance else "FAIL", worst, count)
    model.zero_grad(set_to_none=True)
    return GradCheckReport(results, tolerance, time.perf_counter() - start)
