"""Interleaved multimodal token streams.

A :class:`ModalitySequence` stores one training or inference sequence as
parallel arrays.  Position ``i`` carries a modality tag and a payload: a text
id, an image (codebook) id, or a row of ``features`` for understanding
positions.  ``loss_flag[i]`` marks that the prediction made *at* position ``i``
is scored, with the payload of position ``i + 1`` as its target.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Modality(IntEnum):
    TEXT = 0
    UND_FEATURE = 1
    GEN_ID = 2


class SequenceError(ValueError):
    """Sequence violates a length or domain contract."""


@dataclass
class ModalitySequence:
    modality: np.ndarray   # (n,) int8 Modality values
    ids: np.ndarray        # (n,) int64; text id or image id, -1 at UND_FEATURE positions
    loss_flag: np.ndarray  # (n,) bool
    features: object = None  # (n_und, feat_dim) array/tensor, one row per UND_FEATURE position
    image: object = None     # raw understanding image, when features are computed lazily

    def __post_init__(self):
        self.modality = np.asarray(self.modality, np.int8)
        self.ids = np.asarray(self.ids, np.int64)
        self.loss_flag = np.asarray(self.loss_flag, bool)
        if not (len(self.modality) == len(self.ids) == len(self.loss_flag)):
            raise SequenceError("modality, ids and loss_flag must have equal length")

    def __len__(self):
        return len(self.ids)

    @property
    def n_und(self) -> int:
        return int((self.modality == Modality.UND_FEATURE).sum())

    @property
    def targets(self) -> np.ndarray:
        """Next-position id for every position (-1 where there is none)."""
        t = np.full(len(self), -1, np.int64)
        t[:-1] = self.ids[1:]
        return t

    @property
    def target_modality(self) -> np.ndarray:
        t = np.full(len(self), -1, np.int8)
        t[:-1] = self.modality[1:]
        return t

    def validate(self, vocab_size: int, codebook_size: int, context_window: int | None = None):
        n = len(self)
        if context_window is not None and n > context_window:
            raise SequenceError(f"sequence length {n} exceeds context window {context_window}")
        text = self.modality == Modality.TEXT
        gen = self.modality == Modality.GEN_ID
        und = self.modality == Modality.UND_FEATURE
        if not np.all(text | gen | und):
            raise SequenceError("unknown modality tag")
        if np.any((self.ids[text] < 0) | (self.ids[text] >= vocab_size)):
            raise SequenceError("text id out of range")
        if np.any((self.ids[gen] < 0) | (self.ids[gen] >= codebook_size)):
            raise SequenceError("image id out of range")
        if n and self.loss_flag[-1]:
            raise SequenceError("last position has no target and cannot be loss-flagged")
        if np.any(self.loss_flag & (self.target_modality == Modality.UND_FEATURE)):
            raise SequenceError("understanding features are never prediction targets")
        if np.any(self.loss_flag & und):
            raise SequenceError("understanding feature positions cannot carry loss")
        if self.n_und and self.features is None and self.image is None:
            raise SequenceError("sequence has feature positions but no features or image")
        if self.features is not None and len(self.features) != self.n_und:
            raise SequenceError(f"{len(self.features)} feature rows for {self.n_und} feature positions")
        return self

    def with_features(self, features) -> "ModalitySequence":
        return ModalitySequence(self.modality, self.ids, self.loss_flag, features, self.image)


class SequenceBuilder:
    """Append-only helper for assembling a :class:`ModalitySequence`.

    ``flag`` on an append marks the appended payloads as prediction targets,
    which sets ``loss_flag`` on the position *preceding* each of them.
    """

    def __init__(self):
        self.modality, self.ids, self.targeted = [], [], []
        self.features = None
        self.image = None

    def _add(self, modality, ids, flag):
        for i in ids:
            self.modality.append(int(modality))
            self.ids.append(int(i))
            self.targeted.append(bool(flag))
        return self

    def text(self, ids, flag: bool = False):
        return self._add(Modality.TEXT, ids, flag)

    def gen(self, ids, flag: bool = False):
        return self._add(Modality.GEN_ID, ids, flag)

    def und(self, n: int, features=None, image=None):
        self.features, self.image = features, image
        return self._add(Modality.UND_FEATURE, [-1] * n, False)

    def build(self) -> ModalitySequence:
        n = len(self.ids)
        flag = np.zeros(n, bool)
        if n:
            flag[:-1] = np.asarray(self.targeted[1:], bool)
        if np.any(flag & (np.asarray(self.modality) == Modality.UND_FEATURE)):
            raise SequenceError("a loss-flagged payload cannot directly follow understanding features")
        return ModalitySequence(np.array(self.modality, np.int8), np.array(self.ids, np.int64),
                                flag, self.features, self.image)
