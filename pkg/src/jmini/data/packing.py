"""Sequence packing into fixed-length rows with a block-diagonal causal mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from jmini.sequence import Modality, ModalitySequence, SequenceError


@dataclass
class PackedBatch:
    modality: np.ndarray        # (B, T) int8
    ids: np.ndarray             # (B, T) int64
    loss_flag: np.ndarray       # (B, T) bool
    targets: np.ndarray         # (B, T) int64
    target_modality: np.ndarray  # (B, T) int8
    positions: np.ndarray       # (B, T) int64, restart at 0 in every segment
    segment: np.ndarray         # (B, T) int64, -1 on padding
    boundaries: list[list[int]]  # per row: segment start offsets
    members: list[list[int]]    # per row: indices into the input sequence list
    sequences: list[ModalitySequence]
    fill_ratio: float

    @property
    def shape(self):
        return self.ids.shape

    @property
    def mask(self) -> torch.Tensor:
        """``(B, T, T)`` boolean; True where query may attend to key.

        Causal inside a segment, blocked across segments.  Padding positions
        attend only to themselves so every softmax row is well defined.
        """
        seg = torch.as_tensor(self.segment)
        t = seg.shape[1]
        same = seg[:, :, None] == seg[:, None, :]
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        valid = (seg >= 0)[:, :, None]
        return (same & causal & valid) | torch.eye(t, dtype=torch.bool)

    def und_order(self) -> list[int]:
        """Sequence indices in the order their feature positions appear (row-major)."""
        return [i for row in self.members for i in row if self.sequences[i].n_und]


def first_fit(lengths, capacity: int) -> list[list[int]]:
    """Greedy first-fit in input order; returns per-row lists of item indices."""
    rows, free = [], []
    for i, n in enumerate(lengths):
        if n > capacity:
            raise SequenceError(f"sequence of length {n} exceeds context window {capacity}")
        for r, f in enumerate(free):
            if n <= f:
                rows[r].append(i)
                free[r] -= n
                break
        else:
            rows.append([i])
            free.append(capacity - n)
    return rows


def pack(sequences: list[ModalitySequence], context_window: int, pad_id: int = 0) -> PackedBatch:
    if not sequences:
        raise ValueError("nothing to pack")
    rows = first_fit([len(s) for s in sequences], context_window)
    b, t = len(rows), context_window
    modality = np.full((b, t), Modality.TEXT, np.int8)
    ids = np.full((b, t), pad_id, np.int64)
    flag = np.zeros((b, t), bool)
    targets = np.full((b, t), -1, np.int64)
    tmod = np.full((b, t), -1, np.int8)
    positions = np.zeros((b, t), np.int64)
    segment = np.full((b, t), -1, np.int64)
    boundaries = []
    used = 0
    for r, members in enumerate(rows):
        off, starts = 0, []
        for k, i in enumerate(members):
            s = sequences[i]
            n = len(s)
            sl = slice(off, off + n)
            modality[r, sl], ids[r, sl], flag[r, sl] = s.modality, s.ids, s.loss_flag
            targets[r, sl], tmod[r, sl] = s.targets, s.target_modality
            positions[r, sl] = np.arange(n)
            segment[r, sl] = k
            starts.append(off)
            off += n
        boundaries.append(starts)
        used += off
    return PackedBatch(modality, ids, flag, targets, tmod, positions, segment, boundaries,
                       rows, list(sequences), used / (b * t))
