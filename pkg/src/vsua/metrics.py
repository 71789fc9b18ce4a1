"""Corpus BLEU-1..4 and CIDEr-D over tokenized captions."""

from __future__ import annotations

import math
from collections import Counter
from typing import NamedTuple, Sequence


class EvalPair(NamedTuple):
    candidate: Sequence[str]
    references: Sequence[Sequence[str]]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(corpus: Sequence[EvalPair]) -> None:
    for pair in corpus:
        if not pair.references:
            raise ValueError("every candidate needs at least one reference")


def bleu(corpus: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus-level BLEU-n with uniform weights and the closest-length brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    _check(corpus)
    matched = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, refs in corpus:
        c_len += len(cand)
        # closest reference length, ties -> shorter
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cand_counts = ngrams(cand, k)
            max_ref = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = math.exp(min(0.0, 1.0 - r_len / c_len))
    return bp * math.exp(log_p)


def bleu_all(corpus: Sequence[EvalPair]) -> dict[str, float]:
    return {f"BLEU-{k}": bleu(corpus, k) for k in range(1, 5)}


def cider_d(corpus: Sequence[EvalPair], n: int = 4, sigma: float = 6.0) -> float:
    """Mean CIDEr-D over the corpus (document frequencies from its references)."""
    scores = cider_d_scores(corpus, n, sigma)
    return sum(scores) / len(scores) if scores else 0.0


def cider_d_scores(corpus: Sequence[EvalPair], n: int = 4, sigma: float = 6.0) -> list[float]:
    _check(corpus)
    if not corpus:
        return []
    df = Counter()
    for _, refs in corpus:
        df.update({g for r in refs for k in range(1, n + 1) for g in ngrams(r, k)})
    log_n_docs = math.log(float(len(corpus)))

    def vectorize(tokens):
        vec = [dict() for _ in range(n)]
        norm = [0.0] * n
        for k in range(1, n + 1):
            for g, tf in ngrams(tokens, k).items():
                w = tf * (log_n_docs - math.log(max(1.0, df[g])))
                vec[k - 1][g] = w
                norm[k - 1] += w * w
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    scores = []
    for cand, refs in corpus:
        vc, nc, lc = vectorize(cand)
        acc = [0.0] * n
        for r in refs:
            vr, nr, lr = vectorize(r)
            penalty = math.exp(-((lc - lr) ** 2) / (2 * sigma ** 2))
            for k in range(n):
                dot = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0)
                          for g, w in vc[k].items())
                if nc[k] != 0 and nr[k] != 0:
                    acc[k] += penalty * dot / (nc[k] * nr[k])
        scores.append(10.0 * sum(acc) / n / len(refs))
    return scores


def evaluate(corpus: Sequence[EvalPair]) -> dict[str, float]:
    out = bleu_all(corpus)
    out["CIDEr-D"] = cider_d(corpus)
    return out
