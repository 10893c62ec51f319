"""The unified autoregressive transformer with decoupled visual encoders.

Mixed-modality sequences are embedded position by position (text table,
understanding adaptor, or codebook lookup + generation adaptor), run through a
causal pre-norm transformer, and scored by two heads: a text head tied to the
text embedding table and a separately initialized image head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from jmini.codecs import UndEncoder, VQTokenizer, to_batch
from jmini.config import CodecConfig, ModelConfig
from jmini.layers import Adaptor, Block, RMSNorm
from jmini.sequence import Modality, ModalitySequence, SequenceError

GROUPS = (
    "text_embedding", "transformer_blocks", "text_head", "image_head",
    "und_adaptor", "gen_adaptor", "und_encoder", "gen_tokenizer",
)


class EmptyLossError(ValueError):
    """No position in the batch carries a loss flag."""


@dataclass
class HeadOutputs:
    text_logits: torch.Tensor   # (..., T, vocab_size)
    image_logits: torch.Tensor  # (..., T, codebook_size)


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(cfg.context_window, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.n_heads, cfg.ffn_mult * cfg.embed_dim) for _ in range(cfg.n_layers)
        )
        self.norm = RMSNorm(cfg.embed_dim)

    def forward(self, x, mask):
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class TextHead(nn.Module):
    """Output bias; the projection itself is the (tied) text embedding table."""

    def __init__(self, vocab_size: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(vocab_size))


class ImageHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.image_head_hidden_dim)
        self.fc2 = nn.Linear(cfg.image_head_hidden_dim, cfg.codebook_size)
        for lin in (self.fc1, self.fc2):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, h):
        return self.fc2(F.gelu(self.fc1(h)))


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


class JanusMini(nn.Module):
    def __init__(self, cfg: ModelConfig, codec: CodecConfig, seed: int | None = 0):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg, self.codec = cfg, codec
        self.text_embedding = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        nn.init.normal_(self.text_embedding.weight, std=0.02)
        self.transformer_blocks = Transformer(cfg)
        self.text_head = TextHead(cfg.vocab_size)
        self.image_head = ImageHead(cfg)
        self.und_adaptor = Adaptor(codec.und_feat_dim, cfg.adaptor_hidden_dim, cfg.embed_dim)
        self.gen_adaptor = Adaptor(codec.code_dim, cfg.adaptor_hidden_dim, cfg.embed_dim)
        self.und_encoder = UndEncoder(codec)
        self.gen_tokenizer = VQTokenizer(codec, cfg.codebook_size)

    @property
    def dtype(self):
        return self.text_embedding.weight.dtype

    # -- parameter groups ---------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Disjoint, exhaustive partition of all parameters by component."""
        return {g: {n: p for n, p in getattr(self, g).named_parameters()} for g in GROUPS}

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for g in GROUPS:
            getattr(self, g).requires_grad_(g in groups)

    def trainable_groups(self) -> set[str]:
        return {g for g, ps in self.parameter_groups().items() if any(p.requires_grad for p in ps.values())}

    # -- embedding ------------------------------------------------------------

    def und_features(self, images) -> torch.Tensor:
        """Images -> flattened understanding features ``(B, g*g, F)``."""
        return self.und_encoder(to_batch(images, self.codec.image_side).to(self.dtype))

    def embed_tokens(self, modality, ids, features=None) -> torch.Tensor:
        """Embed a flat token stream (no positional term).

        ``features`` supplies one row per UND_FEATURE position, in order.
        """
        modality = torch.as_tensor(np.asarray(modality), dtype=torch.int64)
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.int64)
        out = torch.zeros(len(ids), self.cfg.embed_dim, dtype=self.dtype)
        text = modality == Modality.TEXT
        gen = modality == Modality.GEN_ID
        und = modality == Modality.UND_FEATURE
        if text.any():
            t = ids[text]
            if t.min() < 0 or t.max() >= self.cfg.vocab_size:
                raise SequenceError("text id out of range")
            out[text] = self.text_embedding(t)
        if gen.any():
            g = ids[gen]
            if g.min() < 0 or g.max() >= self.cfg.codebook_size:
                raise SequenceError("image id out of range")
            out[gen] = self.gen_adaptor(self.gen_tokenizer.codebook.codes[g])
        if und.any():
            if features is None or len(features) != int(und.sum()):
                raise SequenceError("feature rows do not match UND_FEATURE positions")
            out[und] = self.und_adaptor(torch.as_tensor(features).to(self.dtype))
        return out

    def sequence_features(self, seq: ModalitySequence):
        if seq.n_und == 0:
            return None
        if seq.features is not None:
            return seq.features
        return self.und_features(seq.image)[0]

    def assemble(self, seq: ModalitySequence) -> torch.Tensor:
        """Embedded ``(len(seq), embed_dim)`` sequence including learned positions."""
        seq.validate(self.cfg.vocab_size, self.cfg.codebook_size, self.cfg.context_window)
        x = self.embed_tokens(seq.modality, seq.ids, self.sequence_features(seq))
        return x + self.transformer_blocks.pos[: len(seq)]

    # -- forward / loss -------------------------------------------------------

    def heads(self, h) -> HeadOutputs:
        text = h @ self.text_embedding.weight.T + self.text_head.bias
        return HeadOutputs(text, self.image_head(h))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> HeadOutputs:
        """Embedded input ``(T, d)`` or ``(B, T, d)`` -> logits from both heads.

        ``mask`` is boolean ``(T, T)`` or ``(B, T, T)``, True where attention is
        allowed; defaults to plain causal.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"embedded width {x.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        b, t, _ = x.shape
        if mask is None:
            mask = causal_mask(t)
        if mask.ndim == 2:
            mask = mask.expand(b, t, t)
        out = self.heads(self.transformer_blocks(x, mask))
        if squeeze:
            out = HeadOutputs(out.text_logits[0], out.image_logits[0])
        return out

    def run(self, seq: ModalitySequence) -> HeadOutputs:
        """Assemble and forward a single sequence."""
        return self.forward(self.assemble(seq))

    def packed_features(self, batch):
        """Understanding features for every UND_FEATURE position of a packed batch, in row-major order."""
        order = batch.und_order()
        if not order:
            return None
        need = [i for i in order if batch.sequences[i].features is None]
        computed = {}
        if need:
            imgs = torch.cat([to_batch(batch.sequences[i].image, self.codec.image_side) for i in need])
            feats = self.und_features(imgs)
            computed = {i: f for i, f in zip(need, feats)}
        rows = [computed[i] if i in computed else torch.as_tensor(batch.sequences[i].features).to(self.dtype)
                for i in order]
        return torch.cat(rows)

    def forward_packed(self, batch) -> HeadOutputs:
        b, t = batch.shape
        if t > self.cfg.context_window:
            raise SequenceError(f"row length {t} exceeds context window {self.cfg.context_window}")
        x = self.embed_tokens(batch.modality.reshape(-1), batch.ids.reshape(-1), self.packed_features(batch))
        x = x.view(b, t, -1) + self.transformer_blocks.pos[torch.as_tensor(batch.positions)]
        return self.forward(x, batch.mask)

    def packed_loss(self, batch, reduction: str = "mean", split: bool = False):
        out = self.forward_packed(batch)
        return loss(out, batch.loss_flag, batch.targets, batch.target_modality, reduction, split)

    def sequence_loss(self, seq: ModalitySequence, reduction: str = "mean"):
        out = self.run(seq)
        return loss(out, seq.loss_flag, seq.targets, seq.target_modality, reduction=reduction)


def loss(outputs: HeadOutputs, loss_flag, targets, target_modality, reduction: str = "mean",
         split: bool = False):
    """Next-token cross-entropy over flagged positions.

    Text targets are scored with ``text_logits`` and image targets with
    ``image_logits``.  With ``split=True`` also returns the summed text and
    image parts and their position counts.
    """
    flag = torch.as_tensor(np.asarray(loss_flag), dtype=torch.bool).reshape(-1)
    tgt = torch.as_tensor(np.asarray(targets), dtype=torch.int64).reshape(-1)
    tmod = torch.as_tensor(np.asarray(target_modality), dtype=torch.int64).reshape(-1)
    if not flag.any():
        raise EmptyLossError("no loss-flagged positions")
    text_logits = outputs.text_logits.reshape(-1, outputs.text_logits.shape[-1])
    image_logits = outputs.image_logits.reshape(-1, outputs.image_logits.shape[-1])
    is_text = flag & (tmod == Modality.TEXT)
    is_gen = flag & (tmod == Modality.GEN_ID)
    if int(is_text.sum() + is_gen.sum()) != int(flag.sum()):
        raise SequenceError("flagged position without a text or image target")
    zero = text_logits.sum() * 0
    text_sum = F.cross_entropy(text_logits[is_text], tgt[is_text], reduction="sum") if is_text.any() else zero
    image_sum = F.cross_entropy(image_logits[is_gen], tgt[is_gen], reduction="sum") if is_gen.any() else zero
    total = text_sum + image_sum
    if reduction == "mean":
        total = total / flag.sum()
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if split:
        return total, {"text_sum": text_sum, "image_sum": image_sum,
                       "n_text": int(is_text.sum()), "n_image": int(is_gen.sum())}
    return total
