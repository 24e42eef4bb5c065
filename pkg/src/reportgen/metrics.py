"""Report evaluation: finding extraction, precision/recall/F1, BLEU, METEOR,
ROUGE-L and CIDEr.

Every metric follows the same zero-division convention: an empty
denominator scores 0, never NaN.
"""

from __future__ import annotations

import enum
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import DataError
from .tokenizer import tokenize


class FindingLabel(str, enum.Enum):
    EPIDURAL = "epidural"
    SUBDURAL = "subdural"
    SUBARACHNOID = "subarachnoid"
    INTRAPARENCHYMAL = "intraparenchymal"
    INTRAVENTRICULAR = "intraventricular"
    NORMAL = "normal"


HEMORRHAGE_LABELS = tuple(l for l in FindingLabel if l is not FindingLabel.NORMAL)
ALL_LABELS = tuple(FindingLabel)

_KEYWORDS = {label.value: label for label in HEMORRHAGE_LABELS}
_NEGATION_CUES = ("no", "without", "negative", "absent")
_NORMAL_PHRASES = (
    ("no", "evidence", "of", "intracranial", "hemorrhage"),
    ("no", "acute", "intracranial", "abnormality"),
)
_SENTENCE_SPLIT = re.compile(r"[.;]")


def _contains(tokens: list[str], phrase: tuple[str, ...]) -> bool:
    n = len(phrase)
    return any(tuple(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1))


def extract_findings(report: str) -> set[FindingLabel]:
    """Rule-based labeller over the synthetic report vocabulary.

    A hemorrhage keyword counts unless a negation cue precedes it in the same
    sentence.  With no positive hemorrhage and an explicit normal phrase the
    result is ``{normal}``; otherwise unknown text yields the empty set.
    """
    found: set[FindingLabel] = set()
    normal = False
    for sentence in _SENTENCE_SPLIT.split(report.lower()):
        tokens = tokenize(sentence)
        negated = False
        for tok in tokens:
            if tok in _NEGATION_CUES:
                negated = True
            elif tok in _KEYWORDS and not negated:
                found.add(_KEYWORDS[tok])
        if any(_contains(tokens, phrase) for phrase in _NORMAL_PHRASES):
            normal = True
    if not found and normal:
        return {FindingLabel.NORMAL}
    return found


# -- classification metrics ----------------------------------------------------


@dataclass
class LabelScores:
    precision: float
    recall: float
    f1: float
    support: int
    true_pos: int = 0
    false_pos: int = 0
    false_neg: int = 0


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf_from_counts(a: int, b: int, c: int) -> tuple[float, float, float]:
    """Precision A/(A+B), recall A/(A+C) and their harmonic mean."""
    p = _safe_div(a, a + b)
    r = _safe_div(a, a + c)
    return p, r, _safe_div(2 * p * r, p + r)


def precision_recall_f1(predicted: Sequence[Iterable], truth: Sequence[Iterable],
                        labels: Sequence = ALL_LABELS) -> dict[str, LabelScores]:
    """Per-label scores plus a ``micro`` entry pooling the counts."""
    if len(predicted) != len(truth):
        raise DataError(f"corpus length mismatch: {len(predicted)} predicted vs {len(truth)} truth")
    labels = [FindingLabel(l) for l in labels]
    out: dict[str, LabelScores] = {}
    tot = [0, 0, 0]
    for label in labels:
        a = b = c = 0
        for pred, gold in zip(predicted, truth):
            pred = {FindingLabel(x) for x in pred}
            gold = {FindingLabel(x) for x in gold}
            in_p, in_g = label in pred, label in gold
            a += in_p and in_g
            b += in_p and not in_g
            c += in_g and not in_p
        p, r, f = prf_from_counts(a, b, c)
        out[label.value] = LabelScores(p, r, f, a + c, a, b, c)
        tot[0] += a
        tot[1] += b
        tot[2] += c
    p, r, f = prf_from_counts(*tot)
    out["micro"] = LabelScores(p, r, f, tot[0] + tot[2], *tot)
    return out


# -- n-gram helpers ----------------------------------------------------------------


def _as_tokens(text) -> list[str]:
    return tokenize(text) if isinstance(text, str) else list(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------------


def corpus_bleu(candidates: Sequence, references: Sequence[Sequence], max_n: int = 4) -> list[float]:
    """BLEU-1..BLEU-max_n with clipped n-gram counts pooled over the corpus.

    Brevity penalty uses the total candidate length against the summed
    closest reference lengths.  A zero precision at any order up to N makes
    BLEU-N zero.
    """
    if len(candidates) != len(references):
        raise DataError("corpus length mismatch between candidates and references")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        cand = _as_tokens(cand)
        refs = [_as_tokens(r) for r in refs]
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1] if refs else 0
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(1, max_n + 1):
        d_n = _safe_div(matches[n - 1], totals[n - 1])
        if d_n == 0.0:
            dead = True
        if dead:
            scores.append(0.0)
            continue
        log_sum += math.log(d_n)
        scores.append(bp * math.exp(log_sum / n))
    return scores


def bleu(candidate, references: Sequence, max_n: int = 4) -> list[float]:
    """Sentence BLEU-1..BLEU-max_n (uniform weights, no smoothing)."""
    if isinstance(references, str):
        references = [references]
    return corpus_bleu([candidate], [references], max_n)


# -- METEOR ------------------------------------------------------------------------


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact-match alignment: each candidate word takes the first unused equal reference word."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(candidate, reference) -> float:
    """Hmean * (1 - Penalty) with exact unigram matching.

    Hmean = 10 P R / (R + 9 P); Penalty = 0.5 (chunks / matches)^3.
    """
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    hmean = 10.0 * p * r / (r + 9.0 * p)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return hmean * (1.0 - penalty)


# -- ROUGE-L -----------------------------------------------------------------------


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS length over reference length (recall form)."""
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not ref:
        raise DataError("ROUGE-L needs a non-empty reference")
    return lcs_length(cand, ref) / len(ref)


# -- CIDEr -------------------------------------------------------------------------


def cider(candidates: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Consensus score: mean over items and n of TF-IDF cosine similarities, x10.

    IDF is ln(N / df) with df the number of items whose reference set holds
    the n-gram (n-grams absent from every reference use df = 1).
    """
    if len(candidates) != len(references):
        raise DataError("corpus length mismatch between candidates and references")
    N = len(candidates)
    if N == 0:
        raise DataError("CIDEr needs a non-empty corpus")
    if N < 2:
        warnings.warn("CIDEr over fewer than 2 items: every IDF weight is zero", RuntimeWarning, stacklevel=2)
    cands = [_as_tokens(c) for c in candidates]
    refs = [[_as_tokens(r) for r in rs] for rs in references]
    total = 0.0
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, n).keys() for r in rs)) if rs else set())
        log_n = math.log(float(N))

        def vec(tokens):
            return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}

        score_n = 0.0
        for cand, rs in zip(cands, refs):
            vc = vec(cand)
            sims = [_cosine(vc, vec(r)) for r in rs]
            score_n += _safe_div(sum(sims), len(sims))
        total += score_n / N
    return 10.0 * total / max_n


def _cosine(a: dict, b: dict) -> float:
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = sum(v * v for v in a.values())
    nb = sum(v * v for v in b.values())
    if na == 0.0 or nb == 0.0:
        return 0.0
    # sqrt of the product keeps cos(v, v) exactly 1
    return dot / math.sqrt(na * nb)


# -- corpus report -----------------------------------------------------------------

TABLE_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    meteor: float
    rouge_l: float
    cider: float
    labels: dict[str, LabelScores] = field(default_factory=dict)
    n_items: int = 0

    def row(self) -> list[float]:
        return [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.meteor, self.rouge_l, self.cider]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cider_scale"] = "consensus score multiplied by 10 (identical corpus = 10.0)"
        return d


def evaluate_corpus(generated: Sequence[str], ground_truth: Sequence[str]) -> MetricReport:
    if not generated:
        raise DataError("generated corpus is empty")
    if len(generated) != len(ground_truth):
        raise DataError(f"corpus length mismatch: {len(generated)} generated vs {len(ground_truth)} truth")
    cand = [tokenize(g) for g in generated]
    refs = [[tokenize(t)] for t in ground_truth]
    b = corpus_bleu(cand, refs, 4)
    n = len(cand)
    met = sum(meteor(c, r[0]) for c, r in zip(cand, refs)) / n
    rl = sum(rouge_l(c, r[0]) for c, r in zip(cand, refs)) / n
    cid = cider(cand, refs)
    labels = precision_recall_f1([extract_findings(g) for g in generated],
                                 [extract_findings(t) for t in ground_truth])
    return MetricReport(*b, meteor=met, rouge_l=rl, cider=cid, labels=labels, n_items=n)


def format_table(rows: Sequence[tuple[str, MetricReport]], first_header: str = "Model") -> str:
    """Aligned text table; scores are shown x100."""
    headers = (first_header,) + TABLE_COLUMNS
    body = [[name] + [f"{100.0 * v:.2f}" for v in rep.row()] for name, rep in rows]
    widths = [max(len(headers[i]), *(len(r[i]) for r in body)) for i in range(len(headers))]
    fmt = lambda cells: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(headers), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"
