"""Autoregressive samplers for text answers and image-id grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from jmini.model import JanusMini
from jmini.sequence import Modality
from jmini.text import VOCAB, Vocab


class GrammarError(RuntimeError):
    """A generated stream does not parse as caption, BOI, image ids, EOI."""


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None      # None = no truncation
    cfg_scale: float = 1.0        # 1 disables classifier-free guidance
    max_text_tokens: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.cfg_scale < 1:
            raise ValueError("cfg_scale must be >= 1")


GREEDY = SamplerConfig(temperature=1.0, top_k=1)


def sample_logits(logits: torch.Tensor, cfg: SamplerConfig, gen: torch.Generator | None) -> torch.Tensor:
    """Sample one id per row of ``(B, V)`` logits."""
    if cfg.top_k == 1:
        return logits.argmax(-1)
    logits = logits.double() / cfg.temperature
    if cfg.top_k is not None and cfg.top_k < logits.shape[-1]:
        kth = logits.topk(cfg.top_k, dim=-1).values[:, -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits, -1)
    return torch.multinomial(probs, 1, generator=gen)[:, 0]


class PrefixBatch:
    """Left-padded batch of growing sequences with per-row positions."""

    def __init__(self, model: JanusMini, prefixes):
        self.model = model
        self.rows = [(list(m), list(i), f) for m, i, f in prefixes]

    def append(self, modality: int, ids):
        for row, i in zip(self.rows, ids):
            row[0].append(int(modality))
            row[1].append(int(i))

    def forward(self):
        model = self.model
        lens = [len(r[0]) for r in self.rows]
        t = max(lens)
        b = len(self.rows)
        if t > model.cfg.context_window:
            raise GrammarError(f"generation exceeds context window {model.cfg.context_window}")
        mods = np.full((b, t), Modality.TEXT, np.int64)
        ids = np.full((b, t), VOCAB.pad, np.int64)
        pos = np.zeros((b, t), np.int64)
        valid = np.zeros((b, t), bool)
        feats = []
        for r, (m, i, f) in enumerate(self.rows):
            pad = t - len(m)
            mods[r, pad:], ids[r, pad:] = m, i
            pos[r, pad:] = np.arange(len(m))
            valid[r, pad:] = True
            if f is not None:
                feats.append(f)
        x = model.embed_tokens(mods.reshape(-1), ids.reshape(-1), torch.cat(feats) if feats else None)
        x = x.view(b, t, -1) + model.transformer_blocks.pos[torch.from_numpy(pos)]
        v = torch.from_numpy(valid)
        mask = (v[:, None, :] & torch.ones(t, t, dtype=torch.bool).tril()) | torch.eye(t, dtype=torch.bool)
        out = model(x, mask)
        return out.text_logits[:, -1], out.image_logits[:, -1]


def _generator(cfg: SamplerConfig):
    return torch.Generator().manual_seed(int(cfg.seed))


@torch.no_grad()
def generate_ids(model: JanusMini, captions: list[str], cfg: SamplerConfig = SamplerConfig(),
                 vocab: Vocab = VOCAB) -> np.ndarray:
    """Sample ``(len(captions), g*g)`` image ids, one grid per caption."""
    model.eval()
    n = model.codec.gen_tokens
    cond = PrefixBatch(model, [([Modality.TEXT] * (len(vocab.encode(c)) + 1), vocab.encode(c) + [vocab.boi], None)
                               for c in captions])
    guided = cfg.cfg_scale != 1.0
    uncond = PrefixBatch(model, [([Modality.TEXT], [vocab.boi], None)] * len(captions)) if guided else None
    gen = _generator(cfg)
    out = []
    for _ in range(n):
        _, logits = cond.forward()
        if guided:
            _, u = uncond.forward()
            logits = u + cfg.cfg_scale * (logits - u)
        nxt = sample_logits(logits, cfg, gen)
        if nxt.min() < 0 or nxt.max() >= model.cfg.codebook_size:
            raise GrammarError("sampled id outside the codebook")
        cond.append(Modality.GEN_ID, nxt.tolist())
        if guided:
            uncond.append(Modality.GEN_ID, nxt.tolist())
        out.append(nxt.numpy())
    return np.stack(out, axis=1).astype(np.int64)


def token_stream(caption: str, ids, vocab: Vocab = VOCAB) -> list[tuple[int, int]]:
    """Full ``(modality, id)`` stream for a generated image: caption, BOI, ids, EOI."""
    return ([(Modality.TEXT, t) for t in vocab.encode(caption)] + [(Modality.TEXT, vocab.boi)]
            + [(Modality.GEN_ID, int(i)) for i in ids] + [(Modality.TEXT, vocab.eoi)])


def parse_stream(stream, n_ids: int, vocab: Vocab = VOCAB):
    """Split a stream into ``(caption ids, image ids)``; raises GrammarError if malformed."""
    mods = [m for m, _ in stream]
    try:
        b = next(k for k, (m, i) in enumerate(stream) if m == Modality.TEXT and i == vocab.boi)
    except StopIteration:
        raise GrammarError("no BOI token") from None
    body = stream[b + 1:b + 1 + n_ids]
    if any(m != Modality.TEXT for m in mods[:b]):
        raise GrammarError("non-text token in caption")
    if len(body) != n_ids or any(m != Modality.GEN_ID for m, _ in body):
        raise GrammarError(f"expected {n_ids} image ids after BOI")
    if stream[b + 1 + n_ids:] != [(Modality.TEXT, vocab.eoi)]:
        raise GrammarError("image ids not closed by a single EOI")
    return [i for _, i in stream[:b]], [i for _, i in body]


@torch.no_grad()
def decode_images(model: JanusMini, ids: np.ndarray) -> np.ndarray:
    imgs = model.gen_tokenizer.decode_ids(torch.as_tensor(ids))
    return imgs.permute(0, 2, 3, 1).to(torch.float32).numpy()


def generate_image(model: JanusMini, caption: str, cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Caption -> ``(S, S, 3)`` image via sampled ids and the tokenizer decoder."""
    ids = generate_ids(model, [caption], cfg)
    parse_stream(token_stream(caption, ids[0]), model.codec.gen_tokens)
    return decode_images(model, ids)[0]


def _und_prefix(model, image, question, vocab):
    q = vocab.encode(question)
    feats = model.und_features(image)[0]
    n = model.codec.und_tokens
    mods = [Modality.TEXT] * (len(q) + 1) + [Modality.UND_FEATURE] * n + [Modality.TEXT]
    ids = q + [vocab.boi] + [-1] * n + [vocab.eoi]
    return mods, ids, feats


@torch.no_grad()
def understand_batch(model: JanusMini, images, questions: list[str], cfg: SamplerConfig = GREEDY,
                     vocab: Vocab = VOCAB) -> list[str]:
    model.eval()
    batch = PrefixBatch(model, [_und_prefix(model, im, q, vocab) for im, q in zip(images, questions)])
    gen = _generator(cfg)
    answers = [[] for _ in questions]
    done = np.zeros(len(questions), bool)
    for _ in range(cfg.max_text_tokens):
        logits, _ = batch.forward()
        nxt = sample_logits(logits, cfg, gen).tolist()
        for r, t in enumerate(nxt):
            if not done[r]:
                if t == vocab.eos:
                    done[r] = True
                else:
                    answers[r].append(t)
        if done.all():
            break
        batch.append(Modality.TEXT, nxt)
    return [vocab.decode(a) for a in answers]


def understand(model: JanusMini, image, question: str, cfg: SamplerConfig = GREEDY,
               vocab: Vocab = VOCAB) -> str:
    """Answer ``question`` about ``image`` (already preprocessed to S x S)."""
    return understand_batch(model, [image], [question], cfg, vocab)[0]
