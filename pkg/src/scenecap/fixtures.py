"""Deterministic synthetic corpora standing in for a perception stack.

Every value is drawn from SplitMix64 streams derived from the corpus
seed, so a (seed, config) pair maps to byte-identical files.  Captions
are constructed so each one contains at least one token that is absent
from the vocabulary but present in the record's OCR list, which forces
the copy head during training.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .data import (DepthMap, EmbeddingTable, ObjectEntity, OcrEntity, Concept,
                   SceneRecord, SUBWORD_DIM, Vocabulary, load_scene_records,
                   save_depth_map, save_embedding_table, save_scene_records,
                   save_vocabulary)
from .params import SplitMix64, fnv1a64

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_DIGITS = "0123456789"


@dataclass
class FixtureConfig:
    vocab_size: int = 64              # total size including the 4 specials
    appearance_dim: int = 32
    image_width: int = 64
    image_height: int = 64
    n_objects: Tuple[int, int] = (2, 4)
    n_ocr: Tuple[int, int] = (2, 4)
    n_oov: Tuple[int, int] = (1, 2)   # OCR entries outside the vocabulary
    n_concepts: Tuple[int, int] = (2, 4)
    n_caption_words: Tuple[int, int] = (3, 5)  # vocabulary words per caption

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ValueError("vocab_size must leave room for ordinary words")
        if self.appearance_dim < 1:
            raise ValueError("appearance_dim must be >= 1")
        if self.image_width < 4 or self.image_height < 4:
            raise ValueError("image too small for region boxes")
        for name in ("n_objects", "n_ocr", "n_oov", "n_concepts",
                     "n_caption_words"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} range {lo}..{hi} is invalid")
        if self.n_objects[0] < 1 or self.n_ocr[0] < 1:
            raise ValueError("records need at least one object and one OCR entry")
        if self.n_oov[0] < 1:
            raise ValueError("each record needs an out-of-vocabulary OCR token")
        if self.n_oov[1] > self.n_ocr[0]:
            raise ValueError("n_oov cannot exceed n_ocr")
        if self.n_ocr[1] > 80 or self.n_objects[1] > 100 or self.n_concepts[1] > 15:
            raise ValueError("entity ranges exceed the record limits")

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureConfig":
        kwargs = {}
        for key, value in d.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown fixture config key {key!r}")
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)


def _stream(seed: int, purpose: str) -> SplitMix64:
    return SplitMix64(seed ^ fnv1a64(purpose.encode("utf-8")))


def _range_sample(stream: SplitMix64, lo_hi: Tuple[int, int]) -> int:
    lo, hi = lo_hi
    return lo + stream.randint(hi - lo + 1) if hi > lo else lo


def _pseudo_word(stream: SplitMix64) -> str:
    n = 3 + stream.randint(4)
    return "".join(_LETTERS[stream.randint(26)] for _ in range(n))


def _unique_words(stream: SplitMix64, count: int) -> List[str]:
    words: List[str] = []
    seen = set()
    while len(words) < count:
        w = _pseudo_word(stream)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _rand_box(stream: SplitMix64, width: int, height: int) -> Tuple[int, int, int, int]:
    w = 1 + stream.randint(max(1, width // 2))
    h = 1 + stream.randint(max(1, height // 2))
    x0 = stream.randint(width - w + 1)
    y0 = stream.randint(height - h + 1)
    return (x0, y0, x0 + w, y0 + h)


def _rand_vector(stream: SplitMix64, n: int) -> List[float]:
    return [stream.uniform(-1.0, 1.0) for _ in range(n)]


def _depth_raster(stream: SplitMix64, width: int, height: int) -> np.ndarray:
    """Piecewise-constant depth: a base plane plus painted rectangles."""
    base = stream.randint(256)
    raster = np.full((height, width), base, dtype=np.uint8)
    for _ in range(2 + stream.randint(3)):
        x0, y0, x1, y1 = _rand_box(stream, width, height)
        raster[y0:y1, x0:x1] = stream.randint(256)
    return raster


def gen_fixtures(seed: int, n_images: int, out_dir,
                 config: FixtureConfig = FixtureConfig()) -> Dict[str, str]:
    """Write a synthetic corpus; returns the emitted file paths."""
    if n_images <= 0:
        raise ValueError(f"n_images must be positive, got {n_images}")
    os.makedirs(out_dir, exist_ok=True)
    depth_dir = os.path.join(out_dir, "depth")
    os.makedirs(depth_dir, exist_ok=True)

    vocab_words = _unique_words(_stream(seed, "vocab"), config.vocab_size - 4)
    vocab = Vocabulary(vocab_words)
    table = EmbeddingTable()
    vec_stream = _stream(seed, "vectors")
    for w in vocab_words:
        table.put(w, _rand_vector(vec_stream, SUBWORD_DIM))

    used_oov = set(vocab_words)
    records: List[SceneRecord] = []
    for i in range(n_images):
        rs = _stream(seed, f"record{i}")
        rec_id = f"img{i:04d}"
        width, height = config.image_width, config.image_height

        raster = _depth_raster(rs, width, height)
        depth_name = f"depth/{rec_id}.pgm"
        save_depth_map(os.path.join(out_dir, depth_name),
                       DepthMap(values=raster))

        objects = [
            ObjectEntity(box=_rand_box(rs, width, height),
                         feat=np.array(_rand_vector(rs, config.appearance_dim)))
            for _ in range(_range_sample(rs, config.n_objects))
        ]

        n_ocr = _range_sample(rs, config.n_ocr)
        n_oov = min(_range_sample(rs, config.n_oov), n_ocr)
        oov_tokens: List[str] = []
        while len(oov_tokens) < n_oov:
            w = _pseudo_word(rs) + _DIGITS[rs.randint(10)]
            if w not in used_oov:
                used_oov.add(w)
                oov_tokens.append(w)
        in_vocab_tokens = [vocab_words[rs.randint(len(vocab_words))]
                           for _ in range(n_ocr - n_oov)]
        ocr_tokens = oov_tokens + in_vocab_tokens
        rs.shuffle(ocr_tokens)
        ocr = [
            OcrEntity(token=tok, box=_rand_box(rs, width, height),
                      feat=np.array(_rand_vector(rs, config.appearance_dim)),
                      conf=rs.uniform(0.6, 1.0))
            for tok in ocr_tokens
        ]
        for tok in oov_tokens:
            table.put(tok, _rand_vector(vec_stream, SUBWORD_DIM))

        caption_words = [vocab_words[rs.randint(len(vocab_words))]
                         for _ in range(_range_sample(rs, config.n_caption_words))]
        caption_tokens = caption_words + oov_tokens
        rs.shuffle(caption_tokens)
        caption = " ".join(caption_tokens)

        n_concepts = _range_sample(rs, config.n_concepts)
        concept_pool = list(dict.fromkeys(
            caption_words + [vocab_words[rs.randint(len(vocab_words))]
                             for _ in range(n_concepts)]
        ))
        concepts = [
            Concept(word=w, score=rs.uniform(0.0, 1.0))
            for w in concept_pool[:n_concepts]
        ]

        records.append(SceneRecord(
            id=rec_id, width=width, height=height, depth_map=depth_name,
            objects=objects, ocr=ocr, concepts=concepts, captions=[caption],
        ))

    paths = {
        "records": os.path.join(out_dir, "records.jsonl"),
        "vocab": os.path.join(out_dir, "vocab.txt"),
        "vectors": os.path.join(out_dir, "vectors.txt"),
        "refs": os.path.join(out_dir, "refs.jsonl"),
        "depth_dir": depth_dir,
    }
    save_scene_records(paths["records"], records)
    save_vocabulary(paths["vocab"], vocab)
    save_embedding_table(paths["vectors"], table)
    with open(paths["refs"], "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps({"id": rec.id, "captions": rec.captions},
                               sort_keys=True, separators=(",", ":")) + "\n")

    # the generator's own output must satisfy the loaders' invariants
    load_scene_records(paths["records"])
    return paths
