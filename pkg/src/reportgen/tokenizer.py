"""Word-level vocabulary with fixed special tokens."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptDataError, DataError, VocabularyError

UNK, CLS, SEP, PAD = "[UNK]", "[CLS]", "[SEP]", "[PAD]"
# UNK takes id 0 so an argmax tie on uniform logits lands on a token the
# decoder is allowed to emit.
SPECIALS = (UNK, CLS, SEP, PAD)
UNK_ID, CLS_ID, SEP_ID, PAD_ID = range(4)

# a decoded "[UNK]" must re-tokenize to a single unknown word
_TOKEN_RE = re.compile(r"\[unk\]|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    min_frequency: int = 1

    def __post_init__(self):
        if self.words[:4] != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {SPECIALS}")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})
        if len(self._index) != len(self.words):
            raise VocabularyError("duplicate words in vocabulary")

    cls_id = CLS_ID
    sep_id = SEP_ID
    pad_id = PAD_ID
    unk_id = UNK_ID

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._index

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.words):
            raise VocabularyError(f"token id {idx} outside vocabulary of size {len(self.words)}")
        return self.words[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        words = tuple(Path(path).read_text().split("\n")[:-1])
        if words[:4] != SPECIALS:
            raise CorruptDataError(f"{path}: missing special-token header {SPECIALS}")
        return cls(words)


def build_vocab(corpus: Iterable[str], min_frequency: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; rare words fall back to UNK."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((w for w, c in counts.items() if c >= min_frequency), key=lambda w: (-counts[w], w))
    return Vocabulary(SPECIALS + tuple(kept), min_frequency)


def encode(text: str, vocab: Vocabulary, max_len: int = 512) -> list[int]:
    """[CLS] w1 .. wk [SEP], content truncated so the total fits ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for CLS and SEP")
    ids = [CLS_ID] + [vocab.id_of(tok) for tok in tokenize(text)]
    return ids[: max_len - 1] + [SEP_ID]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    skip = {CLS_ID, SEP_ID, PAD_ID}
    return " ".join(vocab.word_of(int(i)) for i in ids if int(i) not in skip)


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID):
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for row, seq in enumerate(sequences):
        out[row, : len(seq)] = seq
    return out
