"""Rewrite-quality metrics: BLEU-n, ROUGE-n, ROUGE-L, exact match.

All metrics share :func:`tokenize`. Corpus scores are means of sentence
scores. BLEU uses add-one smoothing on zero-count precisions of order >= 2;
ROUGE scores are F1.
"""
from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from scipy import stats

METRIC_KEYS = ("bleu1", "bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "em")

_PUNCT = re.compile("([" + re.escape(string.punctuation) + "])")


def tokenize(text: str) -> list[str]:
    """Lowercase, isolate ASCII punctuation, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _overlap(cand, ref, n):
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    return sum((c & r).values()), sum(c.values()), sum(r.values())


def bleu_n(candidate: str, reference: str, n: int) -> float:
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        hits, total, _ = _overlap(cand, ref, k)
        if hits == 0:
            if k == 1:
                return 0.0
            hits, total = 1, total + 1
        log_p += math.log(hits / total)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return bp * math.exp(log_p / n)


def _f1(hits, n_cand, n_ref):
    if hits == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = hits / n_cand, hits / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate: str, reference: str, n: int) -> float:
    if n not in (1, 2):
        raise ValueError(f"ROUGE-n supports n in {{1, 2}}, got {n}")
    cand, ref = tokenize(candidate), tokenize(reference)
    hits, n_cand, n_ref = _overlap(cand, ref, n)
    if n_cand == 0 and n_ref == 0 and cand:
        # both sides too short to have any n-gram
        return float(cand == ref)
    return _f1(hits, n_cand, n_ref)


def _lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    return _f1(_lcs(cand, ref), len(cand), len(ref))


def exact_match(candidate: str, reference: str) -> int:
    return int(tokenize(candidate) == tokenize(reference))


def sentence_scores(candidate: str, reference: str) -> dict[str, float]:
    return {
        "bleu1": bleu_n(candidate, reference, 1),
        "bleu2": bleu_n(candidate, reference, 2),
        "bleu4": bleu_n(candidate, reference, 4),
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
        "em": float(exact_match(candidate, reference)),
    }


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    em: float
    n: int
    per_example: list[dict[str, float]] = field(default_factory=list, repr=False)

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self, per_example: bool = False) -> dict:
        d = asdict(self)
        if not per_example:
            d.pop("per_example")
        return d

    def to_json(self, per_example: bool = False) -> str:
        return json.dumps(self.to_dict(per_example), sort_keys=False)


def evaluate_corpus(pairs: Sequence[tuple[str, str]]) -> MetricReport:
    """Mean sentence-level scores over (candidate, reference) pairs."""
    if not pairs:
        raise ValueError("cannot evaluate an empty corpus")
    rows = [sentence_scores(c, r) for c, r in pairs]
    means = {k: math.fsum(row[k] for row in rows) / len(rows) for k in METRIC_KEYS}
    return MetricReport(**means, n=len(rows), per_example=rows)


class IncomparableError(ValueError):
    """Paired differences have zero variance; the t statistic is undefined."""


def paired_ttest(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-tailed p-value of the paired t-test."""
    if len(scores_a) != len(scores_b) or len(scores_a) < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    diffs = [a - b for a, b in zip(scores_a, scores_b)]
    if max(diffs) - min(diffs) == 0:
        raise IncomparableError("differences have zero variance")
    return float(stats.ttest_rel(scores_a, scores_b).pvalue)
