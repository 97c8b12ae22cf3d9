"""ROUGE-L (LCS F-measure) and corpus-level BLEU-4."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

ROUGE_BETA = 1.2


class EmptyReference(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable], beta: float = ROUGE_BETA) -> float:
    if not reference:
        raise EmptyReference("ROUGE-L needs a non-empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> float:
    """Corpus BLEU with clipped n-gram precisions for n = 1..4.

    A zero bigram-to-4-gram precision is add-one smoothed to 1/(count + 1),
    which also covers candidates too short to have such n-grams. A zero
    unigram precision is left unsmoothed: with no word in common the score is 0.
    """
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise LengthMismatch("at least one candidate is required")
    matches = [0] * 4
    totals = [0] * 4
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, 5):
            c_ng = _ngrams(cand, n)
            r_ng = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r_ng[g]) for g, c in c_ng.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return 0.0
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log((m + 1) / (t + 1)) if m == 0 else math.log(m / t)
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p / 4)


@dataclass
class ScoreReport:
    rouge_l: float
    bleu_4: float
    n: int
    per_example: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rouge_l": self.rouge_l, "bleu_4": self.bleu_4, "n": self.n}


def score(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> ScoreReport:
    """Mean sentence ROUGE-L and corpus BLEU-4 with a per-example breakdown."""
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    rows = []
    for i, (c, r) in enumerate(zip(candidates, references)):
        rows.append({"index": i, "rouge_l": rouge_l(c, r), "bleu_4": bleu4([c], [r])})
    rl = sum(row["rouge_l"] for row in rows) / len(rows) if rows else 0.0
    b4 = bleu4(candidates, references) if candidates else 0.0
    return ScoreReport(rl, b4, len(rows), rows)
