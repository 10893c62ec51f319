"""Training samples and the interleaving templates that turn them into sequences.

Templates::

    understanding  [question] <boi> [features] <eoi> [answer <eos>]*
    pure text      [text <eos>]*
    generation     [caption] <boi> [image ids]* <eoi>

``*`` marks the spans scored by the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jmini.data.scenes import ShapesSceneSpec, cell_name, describe
from jmini.sequence import ModalitySequence, SequenceBuilder
from jmini.text import NUMBER_WORDS, VOCAB, Vocab

UNDERSTANDING, PURE_TEXT, GENERATION = "understanding", "pure_text", "generation"
DESCRIBE_QUESTION = "describe the image"


@dataclass
class Sample:
    kind: str
    text: str                 # question, caption, or pure text
    answer: str = ""
    image: np.ndarray | None = None
    image_ids: np.ndarray | None = None
    uid: str = ""


def scene_questions(spec: ShapesSceneSpec) -> list[tuple[str, str]]:
    """Short-answer questions that have a unique answer for ``spec``."""
    objs = spec.objects
    qa = [("how many objects are there", NUMBER_WORDS[len(objs)])]
    shapes = [o.shape for o in objs]
    colors = [o.color for o in objs]
    for o in objs:
        if shapes.count(o.shape) == 1:
            qa.append((f"what color is the {o.shape}", o.color))
        if colors.count(o.color) == 1:
            qa.append((f"what shape is the {o.color} object", o.shape))
        if sum(p.shape == o.shape and p.color == o.color for p in objs) == 1:
            qa.append((f"where is the {o.color} {o.shape}", cell_name(o.cell)))
    return qa


SIDES = {"triangle": "three", "square": "four", "circle": "zero"}
MIXES = {("red", "green"): "yellow", ("green", "blue"): "cyan", ("red", "blue"): "magenta",
         ("red", "cyan"): "white", ("green", "magenta"): "white", ("blue", "yellow"): "white"}


def text_facts() -> list[tuple[str, str]]:
    facts = [(f"how many sides does a {s} have", n) for s, n in SIDES.items()]
    for (a, b), c in MIXES.items():
        facts.append((f"what do {a} and {b} make", c))
        facts.append((f"what do {b} and {a} make", c))
    return facts


def to_sequence(sample: Sample, n_und: int, vocab: Vocab = VOCAB, drop_caption: bool = False) -> ModalitySequence:
    b = SequenceBuilder()
    if sample.kind == UNDERSTANDING:
        b.text(vocab.encode(sample.text)).text([vocab.boi]).und(n_und, image=sample.image).text([vocab.eoi])
        b.text(vocab.encode(sample.answer) + [vocab.eos], flag=True)
    elif sample.kind == PURE_TEXT:
        words = sample.text + (" " + sample.answer if sample.answer else "")
        b.text(vocab.encode(words) + [vocab.eos], flag=True)
    elif sample.kind == GENERATION:
        if sample.image_ids is None:
            raise ValueError("generation sample has not been tokenized")
        if not drop_caption:
            b.text(vocab.encode(sample.text))
        b.text([vocab.boi]).gen(sample.image_ids, flag=True).text([vocab.eoi])
    else:
        raise ValueError(f"unknown sample kind {sample.kind!r}")
    return b.build()


def describe_sample(spec: ShapesSceneSpec, image, uid="") -> Sample:
    return Sample(UNDERSTANDING, DESCRIBE_QUESTION, describe(spec), image=image, uid=uid)
