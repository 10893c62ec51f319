"""AdamW with global-norm clipping over named parameters."""

from __future__ import annotations

import math

import torch

from jmini.training.plans import OptimizerConfig


class NonFiniteGradient(FloatingPointError):
    def __init__(self, group: str, name: str):
        super().__init__(f"non-finite gradient in parameter group {group!r} ({name})")
        self.group, self.name = group, name


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


class AdamW:
    """Bias-corrected AdamW.  ``params`` maps qualified names to tensors updated in place.

    ``groups`` maps the same names to their parameter group (for diagnostics).
    """

    def __init__(self, params: dict[str, torch.Tensor], cfg: OptimizerConfig = OptimizerConfig(),
                 groups: dict[str, str] | None = None):
        self.params = params
        self.cfg = cfg
        self.groups = groups or {}
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    def collect_grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor], lr: float) -> float:
        """Clip, then apply one AdamW update.  Returns the pre-clip gradient norm."""
        if set(grads) != set(self.params):
            raise KeyError("gradients must cover exactly the trainable parameters")
        for n, g in grads.items():
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(self.groups.get(n, "?"), n)
        norm = clip_grad_norm(grads, self.cfg.grad_clip_norm)
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if self.cfg.weight_decay:
                p.mul_(1 - lr * self.cfg.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.cfg.eps), value=-lr)
        return norm

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for n in self.params:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, t: int, arrays: dict[str, torch.Tensor]):
        self.t = t
        for n in self.params:
            self.m[n].copy_(arrays[f"m/{n}"])
            self.v[n].copy_(arrays[f"v/{n}"])
