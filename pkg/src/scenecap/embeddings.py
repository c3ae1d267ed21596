"""Common-space embeddings for objects, OCR tokens, and visual concepts.

Each entity kind is a sum of independently layer-normalized linear
branches over its feature groups.  The spatial projection is one shared
parameter used by both the object and OCR paths.
"""

from __future__ import annotations

from typing import Dict

from . import autodiff as ad
from .data import SUBWORD_DIM
from .params import ParamStore
from .phoc import PHOC_DIM

SPATIAL_DIM = 5

SHARED_SPATIAL_PARAM = "emb.w_s"


def _branch(x: ad.Node, p: Dict[str, ad.Node], w_name: str, ln_prefix: str) -> ad.Node:
    return ad.layer_norm_rows(ad.matmul(x, p[w_name]),
                              p[f"{ln_prefix}.gain"], p[f"{ln_prefix}.bias"])


def embed_object(x_of: ad.Node, s: ad.Node, p: Dict[str, ad.Node]) -> ad.Node:
    """LN(appearance projection) + LN(spatial projection); rows N x t."""
    return ad.add(
        _branch(x_of, p, "emb.obj.w_of", "emb.obj.ln_feat"),
        _branch(s, p, SHARED_SPATIAL_PARAM, "emb.obj.ln_spatial"),
    )


def embed_ocr(x_tf_upd: ad.Node, x_ft_upd: ad.Node, x_ph: ad.Node,
              s: ad.Node, conf: ad.Node, p: Dict[str, ad.Node]) -> ad.Node:
    """Three-branch OCR embedding; rows M x t.

    First branch jointly projects the updated appearance feature, the
    aligned subword feature, and the character histogram; the other two
    are the shared spatial projection and the confidence scalar.
    """
    joint = ad.add(
        ad.add(ad.matmul(x_tf_upd, p["emb.ocr.w_tf"]),
               ad.matmul(x_ft_upd, p["emb.ocr.w_ft"])),
        ad.matmul(x_ph, p["emb.ocr.w_ph"]),
    )
    feat = ad.layer_norm_rows(joint, p["emb.ocr.ln_feat.gain"],
                              p["emb.ocr.ln_feat.bias"])
    spatial = _branch(s, p, SHARED_SPATIAL_PARAM, "emb.ocr.ln_spatial")
    confb = _branch(conf, p, "emb.ocr.w_conf", "emb.ocr.ln_conf")
    return ad.add(ad.add(feat, spatial), confb)


def embed_concept(ft: ad.Node, score: ad.Node, p: Dict[str, ad.Node]) -> ad.Node:
    """LN(subword projection) + LN(score projection); rows K x t."""
    return ad.add(
        _branch(ft, p, "emb.voc.w_voc", "emb.voc.ln_feat"),
        _branch(score, p, "emb.voc.w_score", "emb.voc.ln_score"),
    )


def register_embeddings(store: ParamStore, appearance_dim: int, t: int) -> None:
    store.add(SHARED_SPATIAL_PARAM, SPATIAL_DIM, t)

    store.add("emb.obj.w_of", appearance_dim, t)
    for ln in ("emb.obj.ln_feat", "emb.obj.ln_spatial"):
        store.add(f"{ln}.gain", 1, t, init="ones")
        store.add(f"{ln}.bias", 1, t, init="zeros")

    store.add("emb.ocr.w_tf", appearance_dim, t)
    store.add("emb.ocr.w_ft", SUBWORD_DIM, t)
    store.add("emb.ocr.w_ph", PHOC_DIM, t)
    store.add("emb.ocr.w_conf", 1, t)
    for ln in ("emb.ocr.ln_feat", "emb.ocr.ln_spatial", "emb.ocr.ln_conf"):
        store.add(f"{ln}.gain", 1, t, init="ones")
        store.add(f"{ln}.bias", 1, t, init="zeros")

    store.add("emb.voc.w_voc", SUBWORD_DIM, t)
    store.add("emb.voc.w_score", 1, t)
    for ln in ("emb.voc.ln_feat", "emb.voc.ln_score"):
        store.add(f"{ln}.gain", 1, t, init="ones")
        store.add(f"{ln}.bias", 1, t, init="zeros")
