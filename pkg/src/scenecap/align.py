"""Concept selection and semantic alignment of OCR subword features.

Selected concepts attend against OCR subword vectors; each token row is
then shifted by its attention-weighted concept mixture and L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .data import Concept, EmbeddingTable, MAX_CONCEPTS, SUBWORD_DIM, subword_vector

# Softmax axis for the K x M concept-token score matrix.  "concepts"
# normalizes each token's weights over the K concepts, which gives the
# uniform-attention closed form x_ft + mean_k(voc_ft_k) at zero weights;
# "tokens" normalizes each concept row over the M tokens instead.
ALIGN_AXES = ("concepts", "tokens")


@dataclass
class SelectedConcept:
    word: str
    score: float
    ft: np.ndarray


def select_concepts(candidates: Sequence[Concept], k: int,
                    table: EmbeddingTable,
                    allow_oov: bool = False) -> List[SelectedConcept]:
    """Top-k candidates by (score desc, word asc), resolved to vectors.

    Short lists are returned whole; no padding entries are invented.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(candidates) > MAX_CONCEPTS:
        raise ValueError(f"{len(candidates)} concept candidates exceeds "
                         f"the {MAX_CONCEPTS} limit")
    for c in candidates:
        if not np.isfinite(c.score):
            raise ValueError(f"concept {c.word!r} has non-finite score")
    ranked = sorted(candidates, key=lambda c: (-c.score, c.word))
    return [
        SelectedConcept(word=c.word, score=c.score,
                        ft=subword_vector(table, c.word, allow_oov=allow_oov))
        for c in ranked[:k]
    ]


def align_scores(voc_ft: ad.Node, x_ft: ad.Node,
                 w_qs: ad.Node, w_ks: ad.Node) -> ad.Node:
    """Scaled concept-token score matrix, K x M."""
    if voc_ft.value.shape[1] != SUBWORD_DIM or x_ft.value.shape[1] != SUBWORD_DIM:
        raise ad.ShapeError(
            f"alignment needs width {SUBWORD_DIM}, got "
            f"{voc_ft.value.shape} and {x_ft.value.shape}"
        )
    q = ad.matmul(voc_ft, w_qs)
    k = ad.matmul(x_ft, w_ks)
    return ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(SUBWORD_DIM))


def sgam_align(voc_ft: ad.Node, x_ft: ad.Node, w_qs: ad.Node, w_ks: ad.Node,
               axis: str = "concepts") -> ad.Node:
    """Inject concept semantics into OCR subword rows; unit-norm output.

    Returns the M x 300 updated subword matrix.  ``axis`` picks the
    softmax normalization of the score matrix (see ALIGN_AXES).
    """
    if axis not in ALIGN_AXES:
        raise ValueError(f"axis must be one of {ALIGN_AXES}, got {axis!r}")
    scores = align_scores(voc_ft, x_ft, w_qs, w_ks)
    if axis == "concepts":
        weights = ad.softmax_rows(ad.transpose(scores))  # M x K, rows sum to 1
        mixed = ad.matmul(weights, voc_ft)
    else:
        weights = ad.softmax_rows(scores)                # K x M, rows sum to 1
        mixed = ad.matmul(ad.transpose(weights), voc_ft)
    return ad.l2_normalize_rows(ad.add(x_ft, mixed))
