"""Word-level tokenizer with a fixed 76-slot context."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
CONTEXT_LENGTH = 76

_TOKEN_RE = re.compile(r"[a-z0-9]+|,")


def tokenize(text: str) -> list[str]:
    """Lowercase and split; punctuation other than commas is dropped."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # corpus tokens; id = position + 4

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i + len(RESERVED) for i, t in enumerate(self.tokens)})

    @property
    def token_to_id(self) -> dict[str, int]:
        return dict(self._index)

    def __len__(self) -> int:
        return len(RESERVED) + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self)}")
        if idx < len(RESERVED):
            return RESERVED[idx]
        return self.tokens[idx - len(RESERVED)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls(tuple(line for line in text.split("\n") if line))


def build_vocab(corpus: Iterable[str], max_size: int = 512) -> Vocabulary:
    """Rank tokens by (frequency desc, token asc) and keep the top ``max_size - 4``."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise ValueError(f"max_size must be at least {len(RESERVED)}")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tuple(tok for tok, _ in ranked[: max_size - len(RESERVED)]))


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # int64, length CONTEXT_LENGTH
    true_length: int


def pad_or_trim(content_ids: list[int], context: int = CONTEXT_LENGTH) -> TokenSequence:
    body = content_ids[: context - 2]
    ids = np.full(context, PAD, dtype=np.int64)
    seq = [BOS, *body, EOS]
    ids[: len(seq)] = seq
    return TokenSequence(ids, len(seq))


def encode(text: str, vocab: Vocabulary, context: int = CONTEXT_LENGTH) -> TokenSequence:
    return pad_or_trim([vocab.id_of(t) for t in tokenize(text)], context)


def encode_batch(texts: Iterable[str], vocab: Vocabulary, context: int = CONTEXT_LENGTH) -> np.ndarray:
    return np.stack([encode(t, vocab, context).ids for t in texts])


def decode(seq: TokenSequence | np.ndarray, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    words = []
    for i in ids.tolist():
        tok = vocab.token_of(i)
        if i in (PAD, BOS, EOS):
            continue
        words.append(tok)
    return " ".join(words)
