"""Stage-specific sample sources over a loaded corpus."""

from __future__ import annotations

import numpy as np
import torch

from jmini.data.corpus import Corpus
from jmini.data.samples import GENERATION, PURE_TEXT, UNDERSTANDING, Sample
from jmini.training.plans import CATEGORY_PROMPTS

# probability that a generation sample loses its caption (trains the unconditional branch)
CAPTION_DROPOUT = 0.1


@torch.no_grad()
def tokenize_corpus(corpus: Corpus, tokenizer, batch: int = 256) -> np.ndarray:
    """Encode every generation image to raster-order ids with the (frozen) tokenizer."""
    out = []
    for i in range(0, len(corpus.gen_images), batch):
        x = torch.from_numpy(corpus.gen_images[i:i + batch]).permute(0, 3, 1, 2).to(tokenizer.codebook.codes.dtype)
        out.append(tokenizer.tokenize(x).numpy())
    corpus.gen_ids = np.concatenate(out) if out else np.zeros((0, tokenizer.cfg.gen_tokens), np.int64)
    return corpus.gen_ids


class StageSources:
    """Three callables ``rng -> Sample`` (understanding, pure text, generation) for one stage."""

    def __init__(self, corpus: Corpus, stage_id: int, generation_mode: str):
        if corpus.gen_ids is None:
            raise ValueError("corpus generation images must be tokenized first")
        self.corpus = corpus
        self.stage_id = stage_id
        self.mode = generation_mode
        if generation_mode == CATEGORY_PROMPTS:
            self.gen_index = [i for i, r in enumerate(corpus.generation) if r.get("category_prompt")]
        else:
            self.gen_index = list(range(len(corpus.generation)))
        task = "fact" if stage_id == 3 else "caption"
        self.text_index = [i for i, r in enumerate(corpus.pure_text) if r["task"] == task]

    def _pick(self, rng, n):
        if n == 0:
            raise IndexError("empty source")
        return int(rng.integers(n))

    def understanding(self, rng) -> Sample:
        i = self._pick(rng, len(self.corpus.understanding))
        rec = self.corpus.understanding[i]
        if self.stage_id == 3:
            qa = rec["qa"][self._pick(rng, len(rec["qa"]))]
        else:
            qa = next(q for q in rec["qa"] if q["task"] == "describe")
        return Sample(UNDERSTANDING, qa["question"], qa["answer"], image=self.corpus.und_images[i], uid=rec["id"])

    def pure_text(self, rng) -> Sample:
        rec = self.corpus.pure_text[self.text_index[self._pick(rng, len(self.text_index))]]
        if rec["task"] == "fact":
            return Sample(PURE_TEXT, rec["question"], rec["answer"], uid=rec["id"])
        return Sample(PURE_TEXT, rec["text"], uid=rec["id"])

    def generation(self, rng) -> Sample:
        i = self.gen_index[self._pick(rng, len(self.gen_index))]
        rec = self.corpus.generation[i]
        if self.mode == CATEGORY_PROMPTS:
            text = rec["category_prompt"]
        else:
            text = rec["caption"] if rng.random() < 0.5 else rec["dense_caption"]
        return Sample(GENERATION, text, image_ids=self.corpus.gen_ids[i], uid=rec["id"])

    def as_list(self):
        return [self.understanding, self.pure_text if self.text_index else [], self.generation]
