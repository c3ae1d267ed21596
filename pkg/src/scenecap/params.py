"""Parameter store, deterministic initialization, Adam, checkpoints.

Randomness comes from SplitMix64 streams.  Each parameter draws from its
own stream seeded by ``global_seed XOR fnv1a64(param_name)``, so adding or
re-ordering parameters never shifts another parameter's init values.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

_MASK64 = (1 << 64) - 1

CHECKPOINT_MAGIC = b"SCPT"
CHECKPOINT_VERSION = 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


class SplitMix64:
    """SplitMix64 sequence; uniform doubles use the top 53 bits."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection; unbiased."""
        if n <= 0:
            raise ValueError("randint needs n > 0")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]


def param_stream(global_seed: int, name: str) -> SplitMix64:
    return SplitMix64(global_seed ^ fnv1a64(name.encode("utf-8")))


def xavier_uniform(rows: int, cols: int, stream: SplitMix64) -> np.ndarray:
    """Xavier/Glorot uniform init, bound sqrt(6/(fan_in+fan_out)).

    Values are drawn row-major so the layout is stable for a given seed.
    """
    bound = np.sqrt(6.0 / (rows + cols))
    out = np.empty((rows, cols))
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = stream.uniform(-bound, bound)
    return out


class ParamStore:
    """Named float64 matrices in insertion order.

    Insertion order is the serialization order, so checkpoints written by
    one build load bit-exactly in another as long as the model registers
    parameters in the same sequence.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._params: Dict[str, np.ndarray] = {}

    def add(self, name: str, rows: int, cols: int, init: str = "xavier") -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if init == "xavier":
            v = xavier_uniform(rows, cols, param_stream(self.seed, name))
        elif init == "zeros":
            v = np.zeros((rows, cols))
        elif init == "ones":
            v = np.ones((rows, cols))
        else:
            raise ValueError(f"unknown init {init!r}")
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}")
        old = self._params[name]
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape {value.shape} != {old.shape}")
        self._params[name] = np.ascontiguousarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def n_values(self) -> int:
        return sum(v.size for v in self._params.values())


class Adam:
    """Adam with bias correction; one moment pair per parameter."""

    def __init__(self, store: ParamStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in store.items()}
        self._v = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.store[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# layout: magic, u32 version, u32 config-json length + bytes,
#         u32 vocab word count + (u32 length + utf-8 bytes) per word,
#         u32 param count + per param (u32 name length + bytes,
#         u32 rows, u32 cols, rows*cols little-endian float64).


def _write_u32(buf, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _read_u32(buf) -> int:
    raw = buf.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def _write_bytes(buf, data: bytes) -> None:
    _write_u32(buf, len(data))
    buf.write(data)


def _read_bytes(buf) -> bytes:
    n = _read_u32(buf)
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def save_checkpoint(path, store: ParamStore, config: dict, words: list) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    _write_u32(buf, CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _write_bytes(buf, cfg)
    _write_u32(buf, len(words))
    for w in words:
        _write_bytes(buf, w.encode("utf-8"))
    _write_u32(buf, len(store))
    for name, value in store.items():
        _write_bytes(buf, name.encode("utf-8"))
        _write_u32(buf, value.shape[0])
        _write_u32(buf, value.shape[1])
        buf.write(value.astype("<f8", copy=False).tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[dict, list, Dict[str, np.ndarray]]:
    """Returns (config, vocab words, {name: matrix}) in file order."""
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version = _read_u32(buf)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = json.loads(_read_bytes(buf).decode("utf-8"))
    words = [_read_bytes(buf).decode("utf-8") for _ in range(_read_u32(buf))]
    params: Dict[str, np.ndarray] = {}
    for _ in range(_read_u32(buf)):
        name = _read_bytes(buf).decode("utf-8")
        rows = _read_u32(buf)
        cols = _read_u32(buf)
        raw = buf.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise ValueError("truncated checkpoint")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    trailing = buf.read(1)
    if trailing:
        raise ValueError("trailing bytes after checkpoint payload")
    return config, words, params
