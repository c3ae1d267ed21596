"""File formats and domain types: scene records, depth maps, word vectors.

All loaders fail closed: invalid input raises with a positional
diagnostic (line number or record id) instead of being repaired.
Writers emit canonical bytes so load -> save round-trips exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SUBWORD_DIM = 300
MAX_OBJECTS = 100
MAX_OCR = 80
MAX_CONCEPTS = 15
DEFAULT_OCR_CONF = 0.9

SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3


class ParseError(ValueError):
    """Malformed file content, with position information."""


class ValidationError(ValueError):
    """Structurally valid input violating a domain invariant."""


# ---------------------------------------------------------------------------
# tokenization
#
# One rule shared by metric scoring and training-target alignment:
# lowercase, drop every character outside [a-z0-9] and whitespace,
# split on whitespace.  Punctuation inside a token is removed without
# splitting the token ("5-star" -> "5star").

_KEEP = set("abcdefghijklmnopqrstuvwxyz0123456789")


def normalize_token(token: str) -> str:
    """Lowercase and strip characters outside [a-z0-9]. May return ''."""
    return "".join(c for c in token.lower() if c in _KEEP)


def tokenize(text: str) -> List[str]:
    out = []
    for piece in text.lower().split():
        t = "".join(c for c in piece if c in _KEEP)
        if t:
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Ordered word list with reserved indices 0..3 for the specials."""

    def __init__(self, words: Sequence[str]):
        full = list(SPECIAL_TOKENS) + list(words)
        seen = set()
        for w in full:
            if w in seen:
                raise ValidationError(f"duplicate vocabulary word {w!r}")
            seen.add(w)
        self.words: Tuple[str, ...] = tuple(full)
        self._index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def get(self, word: str) -> Optional[int]:
        return self._index.get(word)

    def word(self, index: int) -> str:
        return self.words[index]

    @property
    def ordinary_words(self) -> Tuple[str, ...]:
        return self.words[len(SPECIAL_TOKENS):]


def load_vocabulary(path) -> Vocabulary:
    """One ordinary word per line; specials are prepended automatically."""
    words = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            w = line.strip()
            if not w:
                raise ParseError(f"{path}:{ln}: empty vocabulary line")
            words.append(w)
    return Vocabulary(words)


def save_vocabulary(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in vocab.ordinary_words:
            f.write(w + "\n")


# ---------------------------------------------------------------------------
# embedding table


class EmbeddingTable:
    """word -> 300-dim vector; lookups are case-folded to lowercase."""

    def __init__(self, vectors: Optional[Dict[str, np.ndarray]] = None):
        self._vectors: Dict[str, np.ndarray] = {}
        if vectors:
            for w, v in vectors.items():
                self.put(w, v)

    def put(self, word: str, vec) -> None:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.shape != (SUBWORD_DIM,):
            raise ValidationError(
                f"vector for {word!r} has length {v.shape[0]}, need {SUBWORD_DIM}"
            )
        self._vectors[word.lower()] = v

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._vectors

    def __len__(self):
        return len(self._vectors)

    def lookup(self, word: str) -> np.ndarray:
        key = word.lower()
        if key not in self._vectors:
            raise KeyError(f"word {word!r} not in embedding table")
        return self._vectors[key]

    def words(self):
        return self._vectors.keys()


def subword_vector(table: EmbeddingTable, token: str,
                   allow_oov: bool = False) -> np.ndarray:
    """Look up a token's 300-dim vector.

    Tokens containing spaces average their per-word lookups.  Missing
    words raise unless ``allow_oov``, which substitutes zeros and warns.
    """
    parts = token.split() or [token]
    vecs = []
    for p in parts:
        if p in table:
            vecs.append(table.lookup(p))
        elif allow_oov:
            warnings.warn(f"no vector for {p!r}; using zeros")
            vecs.append(np.zeros(SUBWORD_DIM))
        else:
            raise KeyError(f"word {p!r} not in embedding table "
                           "(pass allow_oov to substitute zeros)")
    return np.mean(vecs, axis=0)


def load_embedding_table(path) -> EmbeddingTable:
    """Text lines "word v1 ... v300"; duplicate words: last wins, warned."""
    table = EmbeddingTable()
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1 + SUBWORD_DIM:
                raise ParseError(
                    f"{path}:{ln}: expected word + {SUBWORD_DIM} values, "
                    f"got {len(parts) - 1}"
                )
            word = parts[0]
            if word in table:
                warnings.warn(f"{path}:{ln}: duplicate vector for {word!r}; "
                              "keeping the later one")
            try:
                vec = [float(x) for x in parts[1:]]
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: bad number: {e}") from None
            table.put(word, vec)
    return table


def save_embedding_table(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in table.words():
            v = table.lookup(w)
            f.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


# ---------------------------------------------------------------------------
# depth maps (binary PGM, P5, maxval 255)


@dataclass
class DepthMap:
    values: np.ndarray  # uint8, shape (height, width); 0 = nearest

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.dtype != np.uint8:
            raise ValidationError(
                f"depth map must be a 2-D uint8 raster, got {v.dtype} {v.shape}"
            )
        self.values = v

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _pgm_header_tokens(data: bytes, path) -> Tuple[List[int], int]:
    """Parse magic + 3 header ints, honoring '#' comments.

    Returns the ints and the offset of the first raster byte.
    """
    if data[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    i = 2
    vals: List[int] = []
    while len(vals) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ParseError(f"{path}: truncated PGM header")
        try:
            vals.append(int(data[i:j]))
        except ValueError:
            raise ParseError(f"{path}: bad PGM header token {data[i:j]!r}") from None
        i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise ParseError(f"{path}: missing whitespace after PGM maxval")
    return vals, i + 1


def load_depth_map(path) -> DepthMap:
    with open(path, "rb") as f:
        data = f.read()
    (w, h, maxval), offset = _pgm_header_tokens(data, path)
    if maxval != 255:
        raise ParseError(f"{path}: PGM maxval {maxval}, only 255 supported")
    if w <= 0 or h <= 0:
        raise ParseError(f"{path}: bad PGM dimensions {w}x{h}")
    raster = data[offset:]
    if len(raster) != w * h:
        raise ParseError(
            f"{path}: raster has {len(raster)} bytes, expected {w * h}"
        )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
    return DepthMap(values=arr)


def save_depth_map(path, dm: DepthMap) -> None:
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (dm.width, dm.height))
        f.write(dm.values.tobytes(order="C"))


# ---------------------------------------------------------------------------
# scene records (JSON Lines)


@dataclass
class ObjectEntity:
    box: Tuple[int, int, int, int]
    feat: np.ndarray


@dataclass
class OcrEntity:
    token: str
    box: Tuple[int, int, int, int]
    feat: np.ndarray
    conf: float = DEFAULT_OCR_CONF


@dataclass
class Concept:
    word: str
    score: float


@dataclass
class SceneRecord:
    id: str
    width: int
    height: int
    depth_map: str
    objects: List[ObjectEntity]
    ocr: List[OcrEntity]
    concepts: List[Concept] = field(default_factory=list)
    captions: List[str] = field(default_factory=list)


def _require(cond: bool, rec_id, field_name: str, msg: str):
    if not cond:
        raise ValidationError(f"record {rec_id!r}, field {field_name}: {msg}")


def _as_int(v, rec_id, field_name):
    _require(isinstance(v, int) and not isinstance(v, bool), rec_id, field_name,
             f"expected integer, got {v!r}")
    return v


def _check_box(box, width, height, rec_id, field_name) -> Tuple[int, int, int, int]:
    _require(isinstance(box, (list, tuple)) and len(box) == 4, rec_id, field_name,
             f"box must be 4 integers, got {box!r}")
    x0, y0, x1, y1 = (_as_int(b, rec_id, field_name) for b in box)
    _require(0 <= x0 < x1 <= width, rec_id, field_name,
             f"need 0 <= x_tl < x_br <= width, got x_tl={x0}, x_br={x1}, width={width}")
    _require(0 <= y0 < y1 <= height, rec_id, field_name,
             f"need 0 <= y_tl < y_br <= height, got y_tl={y0}, y_br={y1}, height={height}")
    return (x0, y0, x1, y1)


def _feat_array(v, rec_id, field_name) -> np.ndarray:
    _require(isinstance(v, list) and len(v) >= 1, rec_id, field_name,
             "feature must be a nonempty list of numbers")
    try:
        arr = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(
            f"record {rec_id!r}, field {field_name}: non-numeric feature"
        ) from None
    _require(arr.ndim == 1 and np.isfinite(arr).all(), rec_id, field_name,
             "feature must be a flat list of finite numbers")
    return arr


def record_from_dict(obj: dict, feat_dim: Optional[int] = None) -> SceneRecord:
    """Validate one parsed JSON object into a SceneRecord.

    ``feat_dim`` pins the appearance width when validating a corpus; the
    first record fixes it for the rest.
    """
    rec_id = obj.get("id")
    _require(isinstance(rec_id, str) and rec_id != "", rec_id, "id",
             "missing or empty id")
    width = _as_int(obj.get("width"), rec_id, "width")
    height = _as_int(obj.get("height"), rec_id, "height")
    _require(width >= 1 and height >= 1, rec_id, "width/height",
             f"dimensions must be >= 1, got {width}x{height}")
    depth_map = obj.get("depth_map")
    _require(isinstance(depth_map, str) and depth_map != "", rec_id, "depth_map",
             "missing depth map path")

    raw_objects = obj.get("objects")
    _require(isinstance(raw_objects, list) and 1 <= len(raw_objects) <= MAX_OBJECTS,
             rec_id, "objects",
             f"need 1..{MAX_OBJECTS} objects, got "
             f"{len(raw_objects) if isinstance(raw_objects, list) else raw_objects!r}")
    raw_ocr = obj.get("ocr")
    _require(isinstance(raw_ocr, list) and 1 <= len(raw_ocr) <= MAX_OCR,
             rec_id, "ocr",
             f"need 1..{MAX_OCR} ocr entries, got "
             f"{len(raw_ocr) if isinstance(raw_ocr, list) else raw_ocr!r}")
    raw_concepts = obj.get("concepts", [])
    _require(isinstance(raw_concepts, list) and len(raw_concepts) <= MAX_CONCEPTS,
             rec_id, "concepts", f"at most {MAX_CONCEPTS} concepts allowed")
    raw_captions = obj.get("captions", [])
    _require(isinstance(raw_captions, list)
             and all(isinstance(c, str) for c in raw_captions),
             rec_id, "captions", "captions must be strings")

    objects = []
    for i, o in enumerate(raw_objects):
        fname = f"objects[{i}]"
        _require(isinstance(o, dict), rec_id, fname, "expected an object")
        box = _check_box(o.get("box"), width, height, rec_id, fname + ".box")
        feat = _feat_array(o.get("feat"), rec_id, fname + ".feat")
        if feat_dim is None:
            feat_dim = feat.shape[0]
        _require(feat.shape[0] == feat_dim, rec_id, fname + ".feat",
                 f"feature length {feat.shape[0]} != corpus width {feat_dim}")
        objects.append(ObjectEntity(box=box, feat=feat))

    ocr = []
    for i, o in enumerate(raw_ocr):
        fname = f"ocr[{i}]"
        _require(isinstance(o, dict), rec_id, fname, "expected an object")
        token = o.get("token")
        _require(isinstance(token, str) and token != "", rec_id, fname + ".token",
                 "missing token text")
        box = _check_box(o.get("box"), width, height, rec_id, fname + ".box")
        feat = _feat_array(o.get("feat"), rec_id, fname + ".feat")
        _require(feat.shape[0] == feat_dim, rec_id, fname + ".feat",
                 f"feature length {feat.shape[0]} != corpus width {feat_dim}")
        conf = o.get("conf", DEFAULT_OCR_CONF)
        _require(isinstance(conf, (int, float)) and not isinstance(conf, bool)
                 and 0.0 <= float(conf) <= 1.0,
                 rec_id, fname + ".conf", f"conf must be in [0,1], got {conf!r}")
        ocr.append(OcrEntity(token=token, box=box, feat=feat, conf=float(conf)))

    concepts = []
    for i, c in enumerate(raw_concepts):
        fname = f"concepts[{i}]"
        _require(isinstance(c, dict), rec_id, fname, "expected an object")
        word = c.get("word")
        _require(isinstance(word, str) and word != "", rec_id, fname + ".word",
                 "missing concept word")
        score = c.get("score")
        _require(isinstance(score, (int, float)) and not isinstance(score, bool)
                 and np.isfinite(score),
                 rec_id, fname + ".score", f"score must be finite, got {score!r}")
        concepts.append(Concept(word=word, score=float(score)))

    return SceneRecord(id=rec_id, width=width, height=height, depth_map=depth_map,
                       objects=objects, ocr=ocr, concepts=concepts,
                       captions=list(raw_captions))


def load_scene_records(path) -> List[SceneRecord]:
    records: List[SceneRecord] = []
    feat_dim: Optional[int] = None
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                raise ParseError(f"{path}:{ln}: blank line in JSONL")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{ln}: malformed JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{ln}: expected a JSON object")
            try:
                rec = record_from_dict(obj, feat_dim)
            except ValidationError as e:
                raise ValidationError(f"{path}:{ln}: {e}") from None
            if rec.id in seen_ids:
                raise ValidationError(f"{path}:{ln}: duplicate record id {rec.id!r}")
            seen_ids.add(rec.id)
            if feat_dim is None and rec.objects:
                feat_dim = rec.objects[0].feat.shape[0]
            records.append(rec)
    return records


def _num(x: float):
    """JSON-serializable number keeping ints as ints."""
    f = float(x)
    return int(f) if f.is_integer() and abs(f) < 2 ** 53 else f


def record_to_dict(rec: SceneRecord) -> dict:
    return {
        "id": rec.id,
        "width": rec.width,
        "height": rec.height,
        "depth_map": rec.depth_map,
        "objects": [
            {"box": list(o.box), "feat": [_num(v) for v in o.feat]}
            for o in rec.objects
        ],
        "ocr": [
            {"token": o.token, "box": list(o.box),
             "feat": [_num(v) for v in o.feat], "conf": _num(o.conf)}
            for o in rec.ocr
        ],
        "concepts": [{"word": c.word, "score": _num(c.score)} for c in rec.concepts],
        "captions": list(rec.captions),
    }


def save_scene_records(path, records: Sequence[SceneRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(record_to_dict(rec), sort_keys=True,
                               separators=(",", ":")) + "\n")
