"""Text evaluation metrics: character error rate and corpus BLEU.

Both metrics lowercase inputs before scoring. CER works on unicode scalar
values with unit edit costs; BLEU is plain corpus-level BLEU-4 on
whitespace-tokenized text (no smoothing, no special tokenizers), which is a
deliberate simplification relative to full SacreBLEU.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, NamedTuple

from .errors import UndefinedMetricError


class EvalPair(NamedTuple):
    reference: str
    hypothesis: str


def levenshtein(a: str, b: str) -> int:
    """Minimum number of insertions, deletions and substitutions."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(b) > len(a):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ca != cb),
            )
        previous = current
    return previous[-1]


def cer(pairs: Iterable[tuple[str, str]]) -> float:
    """Corpus character error rate: total edit distance over total reference length."""
    total_distance = 0
    total_reference = 0
    for reference, hypothesis in pairs:
        reference = reference.lower()
        hypothesis = hypothesis.lower()
        total_distance += levenshtein(reference, hypothesis)
        total_reference += len(reference)
    if total_reference == 0:
        raise UndefinedMetricError("cer is undefined for an empty reference corpus")
    return total_distance / total_reference


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs: Iterable[tuple[str, str]], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precision geometric mean times
    the brevity penalty. A zero precision at any order gives 0."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_length = 0
    ref_length = 0
    empty = True
    for reference, hypothesis in pairs:
        empty = False
        ref_tokens = reference.lower().split()
        hyp_tokens = hypothesis.lower().split()
        ref_length += len(ref_tokens)
        hyp_length += len(hyp_tokens)
        for n in range(1, max_n + 1):
            hyp_grams = _ngram_counts(hyp_tokens, n)
            if not hyp_grams:
                continue
            ref_grams = _ngram_counts(ref_tokens, n)
            totals[n - 1] += sum(hyp_grams.values())
            matches[n - 1] += sum(
                min(count, ref_grams[gram]) for gram, count in hyp_grams.items()
            )
    if empty:
        raise UndefinedMetricError("bleu is undefined for an empty corpus")
    if any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    if hyp_length > ref_length:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_length / hyp_length)
    return 100.0 * brevity * math.exp(log_precision)
