"""Symbolic vocabulary shared by prompts, references and the toy decoder."""

from __future__ import annotations

from pathlib import Path

PAD, END = "<pad>", "<end>"
CHOICES = ("A", "B", "C", "D", "E")
RESERVED = (PAD, END, "yes", "no", *CHOICES)
WORDS = (
    "transcribe", "what", "after", "options", "answer", "the", "question", "in",
    "audio", "about", "image", "does", "match", "video", "color", "shape",
)
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "star")
NUM_SYMBOLS = 24


def symbol_token(i: int) -> str:
    return f"s{i}"


def default_tokens(num_symbols: int = NUM_SYMBOLS) -> list[str]:
    return [*RESERVED, *WORDS, *COLORS, *SHAPES, *(symbol_token(i) for i in range(num_symbols))]


class Vocabulary:
    """Token <-> id table; the id of a token is its line number in the vocab file."""

    def __init__(self, tokens=None):
        self.tokens = list(tokens) if tokens is not None else default_tokens()
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in (PAD, END):
            if t not in self.tokens:
                raise ValueError(f"vocabulary lacks reserved token {t}")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def end_id(self) -> int:
        return self.index[END]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def encode(self, tokens) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids, stop_at_end: bool = True) -> list[str]:
        out = []
        for i in ids:
            if stop_at_end and i == self.end_id:
                break
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])
