"""Autoregressive decoding: greedy argmax and length-normalised beam search.

Both searches work against a *scorer*: a callable that maps a batch of
equal-length prefixes to next-token logits ``[n, vocab]``.  This keeps them
independent of the network and lets tests plug in hand-built toy models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, Vocabulary, decode

Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]  # generated ids, without the start and end markers
    score: float  # summed log-probability (end marker included when finished)
    finished: bool

    @property
    def length(self) -> int:
        return len(self.tokens) + int(self.finished)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def next_log_probs(logits: np.ndarray, banned: Sequence[int] = ()) -> np.ndarray:
    z = np.array(logits, dtype=np.float64)
    if len(banned):
        z[list(banned)] = -np.inf
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def greedy_decode(scorer: Scorer, *, bos_id: int, eos_id: int, max_len: int,
                  banned: Sequence[int] = ()) -> Hypothesis:
    """Append the arg-max token until ``eos_id`` or ``max_len`` total tokens.

    Ties go to the lowest id.  ``max_len`` counts the start marker.
    """
    seq = [bos_id]
    score = 0.0
    while len(seq) < max_len:
        lp = next_log_probs(scorer([seq])[0], banned)
        token = int(np.argmax(lp))
        score += lp[token]
        if token == eos_id:
            return Hypothesis(seq[1:], float(score), True)
        seq.append(token)
    return Hypothesis(seq[1:], float(score), False)


def beam_search(scorer: Scorer, *, bos_id: int, eos_id: int, beam_width: int, max_len: int,
                alpha: float = 0.6, banned: Sequence[int] = ()) -> Hypothesis:
    """Keep the ``beam_width`` best hypotheses by score / ((5 + len) / 6) ** alpha.

    Finished hypotheses stay in the beam unchanged and compete with the
    extensions of the live ones.  Returns the best finished hypothesis, or
    the best unfinished one when none finished within ``max_len``.
    """
    if beam_width < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam_width}")

    def norm(h: Hypothesis) -> float:
        return h.score / length_penalty(h.length, alpha)

    beam = [Hypothesis([], 0.0, False)]
    while True:
        live = [h for h in beam if not h.finished]
        if not live or len(live[0].tokens) + 1 >= max_len:
            break
        logits = np.asarray(scorer([[bos_id] + h.tokens for h in live]))
        candidates = [h for h in beam if h.finished]
        for h, row in zip(live, logits):
            lp = next_log_probs(row, banned)
            for t in np.argsort(-lp, kind="stable")[:beam_width]:
                if not np.isfinite(lp[t]):
                    continue
                t = int(t)
                if t == eos_id:
                    candidates.append(Hypothesis(list(h.tokens), float(h.score + lp[t]), True))
                else:
                    candidates.append(Hypothesis(h.tokens + [t], float(h.score + lp[t]), False))
        candidates.sort(key=lambda h: -norm(h))  # stable: earlier candidates win ties
        beam = candidates[:beam_width]

    finished = [h for h in beam if h.finished]
    pool = finished or beam
    return max(pool, key=norm)  # max keeps the first of equal scores


def model_scorer(model, memory) -> Scorer:
    """Scorer over a trained :class:`~reportgen.model.ReportModel` for one encoded image."""

    def score(prefixes):
        with ad.no_grad():
            logits = model.logits(np.asarray(prefixes, dtype=np.int64), memory)
        return logits.data[:, -1, :]

    return score


MODEL_BANNED = (CLS_ID, PAD_ID)


def generate_ids(model, image, *, beam_width: int = 1, alpha: float = 0.6, max_len: int = 48) -> Hypothesis:
    with ad.no_grad():
        memory = model.encode(image)
    scorer = model_scorer(model, memory)
    max_len = min(max_len, model.dec_cfg.max_len)
    if beam_width == 1:
        return greedy_decode(scorer, bos_id=CLS_ID, eos_id=SEP_ID, max_len=max_len, banned=MODEL_BANNED)
    return beam_search(scorer, bos_id=CLS_ID, eos_id=SEP_ID, beam_width=beam_width, max_len=max_len,
                       alpha=alpha, banned=MODEL_BANNED)


def generate_report(model, image, vocab: Vocabulary, **kwargs) -> str:
    return decode(generate_ids(model, image, **kwargs).tokens, vocab)
