"""Caption metrics: BLEU@1-4, ROUGE-L and (basic, un-penalised) CIDEr."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


def _tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, references, n: int = 4) -> float:
    """Sentence BLEU@n with clipped precisions and the closest-length brevity penalty.

    Zero matches are floored at 1e-9 before the log. Orders longer than the
    candidate have no n-grams at all and are left out of the geometric mean
    (effective order), so a short exact match still scores 1.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not cand or not refs:
        return 0.0
    order = min(n, len(cand))
    log_sum = 0.0
    for k in range(1, order + 1):
        counts = ngrams(cand, k)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, k)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        log_sum += math.log(clipped / sum(counts.values()) if clipped else BLEU_EPS)
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = math.exp(1.0 - r / c) if c <= r else 1.0
    return bp * math.exp(log_sum / order)


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure; 0 when either side is empty."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    vocab: dict[str, int] = {}
    a = [vocab.setdefault(t, len(vocab)) for t in cand]
    b = [vocab.setdefault(t, len(vocab)) for t in ref]
    lcs = kernels.lcs_length(a, b)
    if lcs == 0:
        return 0.0
    rec, prec = lcs / len(ref), lcs / len(cand)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


def cider_scores(candidates, references, n: int = 4) -> np.ndarray:
    """Per-image CIDEr (x10 scale) with document frequencies from the references.

    An order at which neither the candidate nor any of its references has an
    n-gram is skipped for that image rather than scored 0.
    """
    if len(candidates) == 0:
        raise ValueError("CIDEr needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    cands = [_tokens(c) for c in candidates]
    refs = [[_tokens(r) for r in rs] for rs in references]
    n_img = len(cands)
    log_n = math.log(n_img)
    totals = np.zeros(n_img)
    orders = np.zeros(n_img)
    for order in range(1, n + 1):
        df: Counter = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, order).keys() for r in rs)) if rs else set())

        def vec(counts: Counter) -> dict:
            return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}

        for i in range(n_img):
            c_grams = ngrams(cands[i], order)
            r_grams = [ngrams(r, order) for r in refs[i]]
            if not c_grams and not any(r_grams):
                continue
            orders[i] += 1
            cv = vec(c_grams)
            cn = math.sqrt(sum(x * x for x in cv.values()))
            sims = []
            for rg in r_grams:
                rv = vec(rg)
                rn = math.sqrt(sum(x * x for x in rv.values()))
                dot = sum(x * rv.get(g, 0.0) for g, x in cv.items())
                sims.append(dot / (cn * rn) if cn > 0 and rn > 0 else 0.0)
            totals[i] += float(np.mean(sims)) if sims else 0.0
    return 10.0 * np.divide(totals, orders, out=np.zeros(n_img), where=orders > 0)


def cider(candidates, references, n: int = 4) -> float:
    return float(np.mean(cider_scores(candidates, references, n)))


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def corpus_report(candidates, references) -> MetricReport:
    """Corpus means of sentence BLEU@1-4 and ROUGE-L (best over references), plus CIDEr.

    ``references[i]`` is a list of reference captions for candidate ``i``.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    if not candidates:
        raise ValueError("empty corpus")
    b = [[bleu(c, refs, n) for c, refs in zip(candidates, references)] for n in (1, 2, 3, 4)]
    r = [max(rouge_l(c, ref) for ref in refs) for c, refs in zip(candidates, references)]
    return MetricReport(
        bleu1=float(np.mean(b[0])),
        bleu2=float(np.mean(b[1])),
        bleu3=float(np.mean(b[2])),
        bleu4=float(np.mean(b[3])),
        rouge_l=float(np.mean(r)),
        cider=cider(candidates, references),
        count=len(candidates),
    )
