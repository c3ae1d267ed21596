"""Pyramidal histogram of characters: 604-bit binary word descriptors.

Layout, in order:
  - unigram levels 2,3,4,5 over the 36-symbol alphabet a-z,0-9:
    for each level L, for each region r (0..L-1), one bit per symbol
    (2+3+4+5 = 14 regions, 504 bits);
  - bigram level 2 over the 50 most frequent English bigrams:
    2 regions x 50 bits = 100 bits.

Character k of an n-character word occupies [k/n, (k+1)/n); a bigram
starting at k occupies [k/n, (k+2)/n).  A bit is set when the region
overlaps the occupancy by at least half the occupancy's extent
(inclusive at exactly half, so a single character reaches both level-2
regions).
"""

from __future__ import annotations

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
UNIGRAM_LEVELS = (2, 3, 4, 5)
BIGRAM_LEVELS = (2,)

# 50 most frequent English bigrams, the standard list used with
# pyramidal character histograms.
BIGRAMS = (
    "th", "he", "in", "er", "an", "re", "es", "on", "st", "nt",
    "en", "at", "ed", "nd", "to", "or", "ea", "ti", "ar", "te",
    "ng", "al", "it", "as", "is", "ha", "et", "se", "ou", "of",
    "le", "sa", "ve", "ro", "ra", "ri", "hi", "ne", "me", "de",
    "co", "ta", "ec", "si", "ll", "so", "na", "li", "la", "el",
)

PHOC_DIM = sum(UNIGRAM_LEVELS) * len(ALPHABET) + sum(BIGRAM_LEVELS) * len(BIGRAMS)

_CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}
_BIGRAM_INDEX = {b: i for i, b in enumerate(BIGRAMS)}

_HALF_EPS = 1e-12


class UnrepresentableTokenError(ValueError):
    """Token has no representable characters."""


def _occupies(start: float, stop: float, region_lo: float, region_hi: float) -> bool:
    overlap = min(stop, region_hi) - max(start, region_lo)
    return overlap >= 0.5 * (stop - start) - _HALF_EPS


def phoc(token: str) -> np.ndarray:
    """604-bit descriptor of a token; case-insensitive.

    Characters outside [a-z0-9] are dropped before placement; a token
    with nothing left raises UnrepresentableTokenError.
    """
    chars = [c for c in token.lower() if c in _CHAR_INDEX]
    if not chars:
        raise UnrepresentableTokenError(
            f"token {token!r} has no characters in [a-z0-9]"
        )
    n = len(chars)
    out = np.zeros(PHOC_DIM, dtype=np.float64)

    offset = 0
    for level in UNIGRAM_LEVELS:
        for region in range(level):
            lo = region / level
            hi = (region + 1) / level
            for k, c in enumerate(chars):
                if _occupies(k / n, (k + 1) / n, lo, hi):
                    out[offset + region * len(ALPHABET) + _CHAR_INDEX[c]] = 1.0
        offset += level * len(ALPHABET)

    for level in BIGRAM_LEVELS:
        for region in range(level):
            lo = region / level
            hi = (region + 1) / level
            for k in range(n - 1):
                bi = _BIGRAM_INDEX.get(chars[k] + chars[k + 1])
                if bi is None:
                    continue
                if _occupies(k / n, (k + 2) / n, lo, hi):
                    out[offset + region * len(BIGRAMS) + bi] = 1.0
        offset += level * len(BIGRAMS)

    return out
