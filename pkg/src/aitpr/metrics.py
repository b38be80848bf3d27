"""Corpus caption metrics: BLEU-1..4, ROUGE-L, CIDEr-D.

Inputs are plain strings; tokenization is lowercase whitespace split
(the synthetic grammar is pre-tokenized, so nothing fancier is needed).
A corpus is a list of candidate strings plus a parallel list of
reference lists, one list per image.

Conventions, spelled out because every toolkit differs somewhere:

* BLEU is corpus-level: clipped n-gram matches and totals are summed
  over images before the precisions are formed.  The brevity penalty
  uses, per image, the reference length closest to the candidate length
  (ties to the shorter).  Any zero precision zeroes the score.
* ROUGE-L takes, per image, the maximum LCS precision and maximum LCS
  recall over the references, then combines them with beta = 1.2.
* CIDEr-D weighs n-grams by tf * (log N - log df) over the reference
  corpus, scores clipped cosine similarity per n = 1..4 with a Gaussian
  penalty (sigma = 6) on the length difference, averages over n and
  references, and scales by 10.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass

from .errors import ConfigError

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
MAX_N = 4


def _tokens(text: str):
    return text.lower().split()


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references):
    if not candidates:
        raise ConfigError("no candidates to score")
    if len(candidates) != len(references):
        raise ConfigError(
            f"{len(candidates)} candidates but {len(references)} reference lists"
        )
    for i, refs in enumerate(references):
        if not refs:
            raise ConfigError(f"candidate {i} has no references")


def _closest_ref_len(cand_len: int, refs) -> int:
    # min over (distance, length) pairs: ties resolve to the shorter ref.
    return min((abs(len(_tokens(r)) - cand_len), len(_tokens(r))) for r in refs)[1]


def bleu(candidates, references, n: int) -> float:
    """Corpus BLEU-n: geometric mean of modified precisions, times brevity."""
    if not 1 <= n <= MAX_N:
        raise ConfigError(f"BLEU order must be 1..{MAX_N}, got {n}")
    _check_corpus(candidates, references)

    correct = [0] * n
    guess = [0] * n
    cand_total = 0
    ref_total = 0
    for cand, refs in zip(candidates, references):
        ct = _tokens(cand)
        cand_total += len(ct)
        ref_total += _closest_ref_len(len(ct), refs)
        for k in range(1, n + 1):
            counts = _ngram_counts(ct, k)
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngram_counts(_tokens(r), k).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            guess[k - 1] += max(0, len(ct) - k + 1)
            correct[k - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())

    log_sum = 0.0
    for k in range(n):
        if guess[k] == 0 or correct[k] == 0:
            return 0.0
        log_sum += math.log(correct[k] / guess[k])
    if cand_total == 0:
        return 0.0
    brevity = 1.0 if cand_total >= ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_sum / n)


def _lcs_len(a, b) -> int:
    # Standard quadratic DP over token lists.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, references) -> float:
    """LCS F-measure for one candidate against its references."""
    if not references:
        raise ConfigError("rouge_l needs at least one reference")
    ct = _tokens(candidate)
    if not ct:
        return 0.0
    precs, recs = [], []
    for r in references:
        rt = _tokens(r)
        if not rt:
            continue
        lcs = _lcs_len(ct, rt)
        precs.append(lcs / len(ct))
        recs.append(lcs / len(rt))
    if not precs:
        return 0.0
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + ROUGE_BETA ** 2) * p * r / (r + ROUGE_BETA ** 2 * p)


def _tfidf_vector(counts_by_n, doc_freq, log_corpus_size):
    vec = [dict() for _ in range(MAX_N)]
    norms = [0.0] * MAX_N
    for k in range(MAX_N):
        for gram, tf in counts_by_n[k].items():
            w = tf * (log_corpus_size - math.log(max(1.0, doc_freq[gram])))
            vec[k][gram] = w
            norms[k] += w * w
    return vec, [math.sqrt(x) for x in norms]


def _per_n_counts(tokens):
    return [_ngram_counts(tokens, k + 1) for k in range(MAX_N)]


def cider_d_scores(candidates, references):
    """Per-image CIDEr-D values (each in [0, 10])."""
    _check_corpus(candidates, references)
    n_images = len(candidates)
    if n_images < 2:
        warnings.warn("CIDEr-D over a single image has a degenerate IDF "
                      "(log corpus size is zero)", stacklevel=2)

    doc_freq = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for counts in _per_n_counts(_tokens(r)):
                seen.update(counts.keys())
        doc_freq.update(seen)
    log_size = math.log(n_images)

    scores = []
    for cand, refs in zip(candidates, references):
        ct = _tokens(cand)
        cvec, cnorm = _tfidf_vector(_per_n_counts(ct), doc_freq, log_size)
        acc = [0.0] * MAX_N
        for r in refs:
            rt = _tokens(r)
            rvec, rnorm = _tfidf_vector(_per_n_counts(rt), doc_freq, log_size)
            penalty = math.exp(-((len(ct) - len(rt)) ** 2) / (2 * CIDER_SIGMA ** 2))
            for k in range(MAX_N):
                dot = sum(min(w, rvec[k].get(gram, 0.0)) * rvec[k].get(gram, 0.0)
                          for gram, w in cvec[k].items())
                if cnorm[k] != 0 and rnorm[k] != 0:
                    dot /= cnorm[k] * rnorm[k]
                acc[k] += dot * penalty
        scores.append(10.0 * (sum(acc) / MAX_N) / len(refs))
    return scores


def cider_d(candidates, references) -> float:
    """Corpus CIDEr-D: mean of the per-image values."""
    scores = cider_d_scores(candidates, references)
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider_d: float
    per_image: tuple

    def to_dict(self) -> dict:
        """4-decimal emission; presentation rounding beyond that is the caller's."""
        return {
            "bleu1": round(self.bleu1, 4),
            "bleu2": round(self.bleu2, 4),
            "bleu3": round(self.bleu3, 4),
            "bleu4": round(self.bleu4, 4),
            "rouge_l": round(self.rouge_l, 4),
            "cider_d": round(self.cider_d, 4),
            "per_image": [
                {"id": e["id"], "candidate": e["candidate"],
                 "rouge_l": round(e["rouge_l"], 4), "cider_d": round(e["cider_d"], 4)}
                for e in self.per_image
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_corpus(candidates, references, ids=None) -> EvalReport:
    """All metrics over an aligned corpus, with a per-image breakdown."""
    _check_corpus(candidates, references)
    if ids is None:
        ids = list(range(len(candidates)))
    rouge_vals = [rouge_l(c, r) for c, r in zip(candidates, references)]
    cider_vals = cider_d_scores(candidates, references)
    per_image = tuple(
        {"id": i, "candidate": c, "rouge_l": rv, "cider_d": cv}
        for i, c, rv, cv in zip(ids, candidates, rouge_vals, cider_vals)
    )
    return EvalReport(
        bleu1=bleu(candidates, references, 1),
        bleu2=bleu(candidates, references, 2),
        bleu3=bleu(candidates, references, 3),
        bleu4=bleu(candidates, references, 4),
        rouge_l=sum(rouge_vals) / len(rouge_vals),
        cider_d=sum(cider_vals) / len(cider_vals),
        per_image=per_image,
    )
