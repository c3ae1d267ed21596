"""Finite-difference verification suites for the differentiable modules.

Each suite rebuilds its forward pass from a fresh parameter dict and
compares tape gradients against central differences.  Large matrices are
probed on a seeded element sample; tolerances and the probe step match
the pinned verification contract (h = 1e-5, tol = 1e-4).

Used by both the CLI and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import depth_fusion, embeddings
from .align import sgam_align
from .autodiff import GradCheckReport, grad_check
from .data import SUBWORD_DIM, Vocabulary
from .depth import relative_depth_matrix, spatial_feature
from .model import CaptionModel, ModelConfig, RecordFeatures
from .params import SplitMix64, fnv1a64
from .phoc import phoc

MICRO = dict(t=16, heads=2, mmt_layers=1, defum_layers=1, K=2, max_len=8)
MICRO_D = 8
MICRO_OBJECTS = 2
MICRO_OCR = 3

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class SuiteResult:
    suite: str
    seed: int
    report: GradCheckReport
    seconds: float

    def line(self) -> str:
        status = "pass" if self.report.passed else "FAIL"
        return (f"{status}  {self.suite:<10} seed={self.seed}  "
                f"max_rel_err={self.report.max_rel_err:.3e}  "
                f"n={self.report.n_checked}  {self.seconds:.2f}s")


def _word(stream: SplitMix64, n: int) -> str:
    return "".join(_LETTERS[stream.randint(26)] for _ in range(n))


def _uniform_matrix(stream: SplitMix64, rows: int, cols: int,
                    lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    out = np.empty((rows, cols))
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = stream.uniform(lo, hi)
    return out


def micro_vocab(seed: int, n_words: int = 12) -> Vocabulary:
    stream = SplitMix64(seed ^ fnv1a64(b"microvocab"))
    words = []
    seen = set()
    while len(words) < n_words:
        w = _word(stream, 3 + stream.randint(3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return Vocabulary(words)


def micro_features(seed: int, vocab: Vocabulary, d: int = MICRO_D,
                   n_obj: int = MICRO_OBJECTS, m_ocr: int = MICRO_OCR,
                   k: int = MICRO["K"]) -> RecordFeatures:
    """Synthetic in-memory scene with a copyable OCR token in its caption."""
    stream = SplitMix64(seed ^ fnv1a64(b"microfeats"))
    width = height = 32

    def box():
        w = 1 + stream.randint(width // 2)
        h = 1 + stream.randint(height // 2)
        x0 = stream.randint(width - w + 1)
        y0 = stream.randint(height - h + 1)
        return (x0, y0, x0 + w, y0 + h)

    dv = [stream.randint(256) for _ in range(n_obj + m_ocr)]
    s_all = [spatial_feature(box(), v, width, height) for v in dv]

    ocr_tokens = [_word(stream, 4) + str(stream.randint(10))
                  for _ in range(m_ocr)]
    ordinary = list(vocab.ordinary_words)
    caption = " ".join(
        [ordinary[stream.randint(len(ordinary))] for _ in range(2)]
        + [ocr_tokens[stream.randint(m_ocr)]]
    )

    return RecordFeatures(
        id=f"micro{seed}",
        x_of=_uniform_matrix(stream, n_obj, d),
        s_obj=np.stack(s_all[:n_obj]),
        x_tf=_uniform_matrix(stream, m_ocr, d),
        s_ocr=np.stack(s_all[n_obj:]),
        conf=_uniform_matrix(stream, m_ocr, 1, 0.5, 1.0),
        x_ph=np.stack([phoc(t) for t in ocr_tokens]),
        x_ft=_uniform_matrix(stream, m_ocr, SUBWORD_DIM),
        r=relative_depth_matrix(dv),
        ocr_tokens=ocr_tokens,
        ocr_norm=list(ocr_tokens),
        voc_ft=_uniform_matrix(stream, k, SUBWORD_DIM),
        voc_score=_uniform_matrix(stream, k, 1, 0.0, 1.0),
        captions=[caption],
    )


def micro_model(seed: int, overrides: Optional[dict] = None) -> CaptionModel:
    cfg = dict(MICRO, seed=seed)
    if overrides:
        cfg.update(overrides)
    d = cfg.pop("appearance_dim", MICRO_D)
    vocab = micro_vocab(seed)
    return CaptionModel(ModelConfig.from_dict(cfg), vocab, d)


def _subset(store, prefixes) -> Dict[str, np.ndarray]:
    return {name: value for name, value in store.items()
            if any(name.startswith(p) for p in prefixes)}


def _sum_squares(node: ad.Node) -> ad.Node:
    return ad.sum_all(ad.mul(node, node))


def features_suite(seed: int, overrides: Optional[dict] = None) -> GradCheckReport:
    model = micro_model(seed, overrides)
    feats = micro_features(seed, model.vocab, d=model.appearance_dim,
                           k=model.config.K)

    def objective(p: Dict[str, ad.Node]) -> ad.Node:
        tape = next(iter(p.values())).tape
        x_obj = embeddings.embed_object(
            tape.constant(feats.x_of), tape.constant(feats.s_obj), p)
        x_ocr = embeddings.embed_ocr(
            tape.constant(feats.x_tf), tape.constant(feats.x_ft),
            tape.constant(feats.x_ph), tape.constant(feats.s_ocr),
            tape.constant(feats.conf), p)
        x_voc = embeddings.embed_concept(
            tape.constant(feats.voc_ft), tape.constant(feats.voc_score), p)
        total = ad.add(_sum_squares(x_obj),
                       ad.add(_sum_squares(x_ocr), _sum_squares(x_voc)))
        return total

    return grad_check(objective, _subset(model.store, ("emb.",)),
                      max_elements_per_param=12, seed=seed)


def defum_suite(seed: int, overrides: Optional[dict] = None) -> GradCheckReport:
    model = micro_model(seed, overrides)
    feats = micro_features(seed, model.vocab, d=model.appearance_dim,
                           k=model.config.K)
    x_v = depth_fusion.concat_visual(feats.x_of, feats.x_tf)

    def objective(p: Dict[str, ad.Node]) -> ad.Node:
        tape = next(iter(p.values())).tape
        out = depth_fusion.defum_update(
            tape.constant(x_v), feats.r, p,
            model.config.defum_layers, model.config.heads,
            depth_heads=model.config.depth_heads)
        return _sum_squares(out)

    return grad_check(objective, _subset(model.store, ("defum.",)),
                      max_elements_per_param=12, seed=seed)


def sgam_suite(seed: int, overrides: Optional[dict] = None) -> GradCheckReport:
    model = micro_model(seed, overrides)
    feats = micro_features(seed, model.vocab, d=model.appearance_dim,
                           k=model.config.K)

    def objective(p: Dict[str, ad.Node]) -> ad.Node:
        tape = next(iter(p.values())).tape
        out = sgam_align(tape.constant(feats.voc_ft), tape.constant(feats.x_ft),
                         p["sgam.w_qs"], p["sgam.w_ks"],
                         axis=model.config.align_axis)
        return _sum_squares(out)

    return grad_check(objective, _subset(model.store, ("sgam.",)),
                      max_elements_per_param=24, seed=seed)


def captioner_suite(seed: int, overrides: Optional[dict] = None) -> GradCheckReport:
    model = micro_model(seed, overrides)
    feats = micro_features(seed, model.vocab, d=model.appearance_dim,
                           k=model.config.K)
    caption = feats.captions[0]

    def objective(p: Dict[str, ad.Node]) -> ad.Node:
        tape = next(iter(p.values())).tape
        loss, steps, _ = model.caption_loss(tape, p, feats, caption)
        return ad.scale(loss, 1.0 / steps)

    return grad_check(objective, dict(model.store.items()),
                      max_elements_per_param=6, seed=seed)


SUITES = {
    "features": features_suite,
    "defum": defum_suite,
    "sgam": sgam_suite,
    "captioner": captioner_suite,
}


def run_suites(seeds=range(5), names=None,
               overrides: Optional[dict] = None) -> List[SuiteResult]:
    results = []
    for name in (names or SUITES):
        fn = SUITES[name]
        for seed in seeds:
            start = time.perf_counter()
            report = fn(seed, overrides)
            results.append(SuiteResult(suite=name, seed=seed, report=report,
                                       seconds=time.perf_counter() - start))
    return results
