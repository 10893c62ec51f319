"""Word-level vocabulary for the shapes world.

The vocabulary is closed: every caption, question and answer the corpus can
emit is built from ``WORDS``.  Special tokens come first so their ids are
stable across vocabulary edits.
"""

from __future__ import annotations

PAD, EOS, BOI, EOI = "<pad>", "<eos>", "<boi>", "<eoi>"
SPECIALS = (PAD, EOS, BOI, EOI)

SHAPES = ("circle", "square", "triangle")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
NUMBER_WORDS = ("zero", "one", "two", "three", "four")

WORDS = (
    "a", "and", "of", "at", "left", "right", "above", "below", "top", "bottom", "center",
    *SHAPES, *PLURALS.values(), *COLOR_NAMES, *NUMBER_WORDS,
    "how", "many", "objects", "are", "there", "what", "color", "is", "the", "shape",
    "object", "where", "describe", "image", "sides", "does", "have", "do", "make",
)


class Vocab:
    def __init__(self, words=WORDS, size: int | None = None):
        tokens = list(SPECIALS) + list(dict.fromkeys(words))
        if size is not None and len(tokens) > size:
            raise ValueError(f"vocabulary needs {len(tokens)} ids but size is {size}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.size = size if size is not None else len(tokens)

    def __len__(self):
        return self.size

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def boi(self) -> int:
        return self.index[BOI]

    @property
    def eoi(self) -> int:
        return self.index[EOI]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"word {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i < len(self.tokens) and self.tokens[i] not in SPECIALS:
                out.append(self.tokens[i])
        return " ".join(out)


VOCAB = Vocab(size=64)
