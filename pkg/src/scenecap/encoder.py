"""Transformer encoder blocks shared by the feature updater and the
multimodal stage: multi-head self-attention, position-wise feed-forward,
post-layer-norm residual wiring.

Parameters live in a flat {name: Node} mapping; each block reads its own
names under a caller-supplied prefix.  Registration helpers create the
matching entries in a ParamStore with standard inits (xavier weights,
zero biases, unit layer-norm gains).
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .params import ParamStore

FF_WIDTH_FACTOR = 4


def _heads_ok(width: int, n_heads: int) -> None:
    if n_heads < 1 or width % n_heads != 0:
        raise ValueError(f"head count {n_heads} must divide width {width}")


def self_attention(x: ad.Node, p: Dict[str, ad.Node], prefix: str, n_heads: int,
                   mask: Optional[np.ndarray] = None,
                   logit_bias: Optional[np.ndarray] = None,
                   project_out: bool = True) -> ad.Node:
    """Multi-head self-attention over the rows of x.

    ``mask`` is a static boolean (rows x rows) keep-matrix; ``logit_bias``
    is added to every head's logits before softmax.  ``project_out``
    selects the trailing output projection (the bias-free single-matrix
    variant used by the depth stage turns it off, along with q/k/v
    biases).
    """
    width = x.value.shape[1]
    _heads_ok(width, n_heads)
    dh = width // n_heads

    def proj(kind: str) -> ad.Node:
        out = ad.matmul(x, p[f"{prefix}.w_{kind}"])
        bias = p.get(f"{prefix}.b_{kind}")
        return ad.add(out, bias) if bias is not None else out

    q, k, v = proj("q"), proj("k"), proj("v")
    heads = []
    for h in range(n_heads):
        qs = ad.slice_cols(q, h * dh, (h + 1) * dh)
        ks = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vs = ad.slice_cols(v, h * dh, (h + 1) * dh)
        logits = ad.scale(ad.matmul(qs, ad.transpose(ks)), 1.0 / np.sqrt(dh))
        if logit_bias is not None:
            logits = ad.add(logits, logit_bias)
        attn = ad.softmax_rows(logits, mask=mask)
        heads.append(ad.matmul(attn, vs))
    mixed = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
    if not project_out:
        return mixed
    return ad.add(ad.matmul(mixed, p[f"{prefix}.w_o"]), p[f"{prefix}.b_o"])


def feed_forward(x: ad.Node, p: Dict[str, ad.Node], prefix: str) -> ad.Node:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def encoder_layer(x: ad.Node, p: Dict[str, ad.Node], prefix: str, n_heads: int,
                  mask: Optional[np.ndarray] = None) -> ad.Node:
    a = self_attention(x, p, f"{prefix}.attn", n_heads, mask=mask)
    x = ad.layer_norm_rows(ad.add(x, a),
                           p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    f = feed_forward(x, p, f"{prefix}.ff")
    return ad.layer_norm_rows(ad.add(x, f),
                              p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])


def encoder_stack(x: ad.Node, p: Dict[str, ad.Node], prefix: str, n_layers: int,
                  n_heads: int, mask: Optional[np.ndarray] = None) -> ad.Node:
    for i in range(n_layers):
        x = encoder_layer(x, p, f"{prefix}.layer{i}", n_heads, mask=mask)
    return x


def register_attention(store: ParamStore, prefix: str, width: int,
                       n_heads: int, project_out: bool = True,
                       biases: bool = True) -> None:
    _heads_ok(width, n_heads)
    for kind in ("q", "k", "v"):
        store.add(f"{prefix}.w_{kind}", width, width)
        if biases:
            store.add(f"{prefix}.b_{kind}", 1, width, init="zeros")
    if project_out:
        store.add(f"{prefix}.w_o", width, width)
        store.add(f"{prefix}.b_o", 1, width, init="zeros")


def register_layer_norm(store: ParamStore, prefix: str, width: int) -> None:
    store.add(f"{prefix}.gain", 1, width, init="ones")
    store.add(f"{prefix}.bias", 1, width, init="zeros")


def register_encoder_layer(store: ParamStore, prefix: str, width: int,
                           n_heads: int) -> None:
    register_attention(store, f"{prefix}.attn", width, n_heads)
    register_layer_norm(store, f"{prefix}.ln1", width)
    ff = FF_WIDTH_FACTOR * width
    store.add(f"{prefix}.ff.w1", width, ff)
    store.add(f"{prefix}.ff.b1", 1, ff, init="zeros")
    store.add(f"{prefix}.ff.w2", ff, width)
    store.add(f"{prefix}.ff.b2", 1, width, init="zeros")
    register_layer_norm(store, f"{prefix}.ln2", width)


def register_encoder_stack(store: ParamStore, prefix: str, width: int,
                           n_layers: int, n_heads: int) -> None:
    if n_layers < 1:
        raise ValueError(f"need at least one encoder layer, got {n_layers}")
    for i in range(n_layers):
        register_encoder_layer(store, f"{prefix}.layer{i}", width, n_heads)


def entity_decoder_mask(n_entities: int, n_steps: int) -> np.ndarray:
    """Attention keep-mask for [entities | decoder steps] sequences.

    Entity rows see all entities and no decoder positions; decoder row s
    sees all entities plus decoder positions 0..s.
    """
    size = n_entities + n_steps
    mask = np.zeros((size, size), dtype=bool)
    mask[:, :n_entities] = True
    for s in range(n_steps):
        mask[n_entities + s, n_entities:n_entities + s + 1] = True
    return mask
