"""Per-slot multinomial mixing of the three data kinds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jmini.config import ConfigError

KINDS = ("understanding", "pure_text", "generation")


@dataclass(frozen=True)
class MixRatio:
    """Relative sampling weights ``understanding : pure_text : generation``."""

    u: int
    t: int
    g: int

    def __post_init__(self):
        w = (self.u, self.t, self.g)
        if any(x < 0 for x in w):
            raise ConfigError(f"ratio weights must be nonnegative, got {w}")
        if sum(w) == 0:
            raise ConfigError("ratio weights cannot all be zero")

    @classmethod
    def parse(cls, text: str) -> "MixRatio":
        parts = [int(p) for p in str(text).split(":")]
        if len(parts) != 3:
            raise ConfigError(f"ratio must look like 'u:t:g', got {text!r}")
        return cls(*parts)

    @property
    def weights(self) -> tuple[int, int, int]:
        return (self.u, self.t, self.g)

    @property
    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, float)
        return w / w.sum()

    def expected_counts(self, batch_size: int) -> np.ndarray:
        return self.probabilities * batch_size

    def __str__(self):
        return f"{self.u}:{self.t}:{self.g}"


def draw_kinds(ratio: MixRatio, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Kind index (0, 1, 2) for each batch slot, drawn independently."""
    return rng.choice(3, size=batch_size, p=ratio.probabilities)


def mix(sources, ratio: MixRatio, batch_size: int, rng: np.random.Generator) -> list:
    """Draw ``batch_size`` samples across three sources.

    Each source is a sequence (sampled uniformly with replacement) or a
    callable ``rng -> sample``.  A source with zero weight is never touched.
    """
    if len(sources) != 3:
        raise ConfigError("mix expects exactly three sources (understanding, pure_text, generation)")
    for name, src, w in zip(KINDS, sources, ratio.weights):
        if w > 0 and not callable(src) and (src is None or len(src) == 0):
            raise ConfigError(f"source {name!r} has weight {w} but is empty")
    out = []
    for k in draw_kinds(ratio, batch_size, rng):
        src = sources[k]
        out.append(src(rng) if callable(src) else src[int(rng.integers(len(src)))])
    return out
