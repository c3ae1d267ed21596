"""Corpus caption metrics: BLEU-4 and CIDEr-D.

Both consume a corpus mapping record id -> (candidate tokens, list of
reference token lists), pre-tokenized with data.tokenize so scoring and
training share one tokenization.

CIDEr-D constants follow the published definition: n-grams up to 4,
idf from the reference document set, count clipping in the numerator,
gaussian length penalty with sigma = 6, final scale x10.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Dict, List, Sequence, Tuple

Corpus = Dict[str, Tuple[List[str], List[List[str]]]]

MAX_NGRAM = 4
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


def _check_corpus(corpus: Corpus) -> None:
    if not corpus:
        raise ValueError("empty corpus")
    for rid, (cand, refs) in corpus.items():
        if not refs:
            raise ValueError(f"record {rid!r} has no references")
        if not isinstance(cand, list):
            raise ValueError(f"record {rid!r}: candidate must be a token list")


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus: Corpus, smoothing: bool = False) -> float:
    """Corpus-level BLEU with n = 1..4 clipped precisions.

    Unsmoothed by default: any zero match count zeroes the score.  With
    ``smoothing``, precisions use (matches+1)/(attempts+1) for n >= 2.
    The brevity penalty uses the closest reference length per candidate,
    ties toward the shorter reference.
    """
    _check_corpus(corpus)
    matches = [0] * MAX_NGRAM
    attempts = [0] * MAX_NGRAM
    cand_len = 0
    ref_len = 0
    for cand, refs in corpus.values():
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, MAX_NGRAM + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            cap: Counter = Counter()
            for r in refs:
                rc = _ngram_counts(r, n)
                for g, c in rc.items():
                    if c > cap[g]:
                        cap[g] = c
            matches[n - 1] += sum(min(c, cap[g]) for g, c in counts.items())
            attempts[n - 1] += max(0, len(cand) - n + 1)

    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(MAX_NGRAM):
        num, den = matches[n], attempts[n]
        if smoothing and n >= 1:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / MAX_NGRAM)


def _tfidf_vector(tokens: Sequence[str], doc_freq: Dict[tuple, int],
                  log_n_docs: float) -> Tuple[List[Dict[tuple, float]], List[float]]:
    """Per-n tf-idf maps and their norms for one caption."""
    vecs: List[Dict[tuple, float]] = []
    norms: List[float] = []
    for n in range(1, MAX_NGRAM + 1):
        vec = {}
        sq = 0.0
        for g, tf in _ngram_counts(tokens, n).items():
            idf = log_n_docs - math.log(max(1.0, doc_freq.get(g, 0.0)))
            w = tf * idf
            vec[g] = w
            sq += w * w
        vecs.append(vec)
        norms.append(math.sqrt(sq))
    return vecs, norms


def cider_d_per_image(corpus: Corpus,
                      idf_from_refs_only: bool = False) -> Dict[str, float]:
    """Per-record CIDEr-D scores (already on the x10 scale).

    The idf document set is the corpus's reference sets, so fewer than
    two records makes idf degenerate (every weight 0); that is rejected
    unless ``idf_from_refs_only`` explicitly opts into the degenerate
    single-document behavior.
    """
    _check_corpus(corpus)
    if len(corpus) < 2 and not idf_from_refs_only:
        raise ValueError(
            "idf needs at least 2 record ids; pass idf_from_refs_only "
            "to score a degenerate corpus anyway"
        )
    doc_freq: Dict[tuple, int] = defaultdict(int)
    for _, refs in corpus.values():
        seen = set()
        for r in refs:
            for n in range(1, MAX_NGRAM + 1):
                seen.update(_ngram_counts(r, n).keys())
        for g in seen:
            doc_freq[g] += 1
    log_n_docs = math.log(float(len(corpus)))

    scores: Dict[str, float] = {}
    for rid, (cand, refs) in corpus.items():
        cvecs, cnorms = _tfidf_vector(cand, doc_freq, log_n_docs)
        image_score = 0.0
        for ref in refs:
            rvecs, rnorms = _tfidf_vector(ref, doc_freq, log_n_docs)
            delta = float(len(cand) - len(ref))
            penalty = math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA ** 2))
            for n in range(MAX_NGRAM):
                acc = 0.0
                for g, w in cvecs[n].items():
                    rw = rvecs[n].get(g)
                    if rw is not None:
                        acc += min(w, rw) * rw
                if cnorms[n] > 0 and rnorms[n] > 0:
                    acc /= cnorms[n] * rnorms[n]
                image_score += penalty * acc / MAX_NGRAM
        scores[rid] = CIDER_SCALE * image_score / len(refs)
    return scores


def cider_d(corpus: Corpus, idf_from_refs_only: bool = False) -> float:
    """Corpus CIDEr-D: the mean of the per-image scores."""
    scores = cider_d_per_image(corpus, idf_from_refs_only=idf_from_refs_only)
    return sum(scores.values()) / len(scores)


def build_corpus(predictions: Dict[str, str],
                 references: Dict[str, List[str]],
                 tokenizer) -> Corpus:
    """Join prediction and reference maps on id and tokenize both sides."""
    missing = sorted(set(predictions) - set(references))
    if missing:
        raise ValueError(f"predictions without references: {missing[:5]}")
    corpus: Corpus = {}
    for rid, caption in predictions.items():
        refs = references[rid]
        if not refs:
            raise ValueError(f"record {rid!r} has no references")
        corpus[rid] = (tokenizer(caption), [tokenizer(r) for r in refs])
    if not corpus:
        raise ValueError("empty corpus")
    return corpus
