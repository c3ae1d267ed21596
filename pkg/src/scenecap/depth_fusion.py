"""Depth-enhanced updating of appearance features.

Object and OCR appearance rows are concatenated, passed through one
depth-aware self-attention stage whose logits carry the pairwise
relative-depth bias, then through a stack of standard encoder layers.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import encoder
from .params import ParamStore


def concat_visual(x_of: np.ndarray, x_tf: np.ndarray) -> np.ndarray:
    """Stack object rows above OCR rows; both must share the width."""
    x_of = np.atleast_2d(np.asarray(x_of, dtype=np.float64))
    x_tf = np.atleast_2d(np.asarray(x_tf, dtype=np.float64))
    if x_of.shape[0] == 0:
        raise ValueError("need at least one object row")
    if x_tf.shape[0] == 0:
        raise ValueError("need at least one OCR row")
    if x_of.shape[1] != x_tf.shape[1]:
        raise ad.ShapeError(
            f"appearance widths differ: objects {x_of.shape[1]}, "
            f"ocr {x_tf.shape[1]}"
        )
    return np.concatenate([x_of, x_tf], axis=0)


def depth_aware_attention(x_v: ad.Node, r: np.ndarray, p: Dict[str, ad.Node],
                          prefix: str = "defum.depth",
                          n_heads: int = 1) -> ad.Node:
    """Self-attention with the relative-depth bias added to the logits.

    Unprojected single-matrix form: no q/k/v biases and no output
    projection; residual + layer norm on the way out.  The bias matrix
    is shared across heads when a multi-head variant is configured.
    """
    size = x_v.value.shape[0]
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (size, size):
        raise ad.ShapeError(
            f"depth bias is {r.shape}, need ({size}, {size}) to match "
            "the entity ordering"
        )
    attended = encoder.self_attention(x_v, p, prefix, n_heads,
                                      logit_bias=r, project_out=False)
    return ad.layer_norm_rows(ad.add(x_v, attended),
                              p[f"{prefix}.ln.gain"], p[f"{prefix}.ln.bias"])


def defum_update(x_v: ad.Node, r: np.ndarray, p: Dict[str, ad.Node],
                 n_layers: int, n_heads: int, depth_heads: int = 1,
                 prefix: str = "defum") -> ad.Node:
    """Depth-aware stage followed by the encoder stack; same row order."""
    if n_layers < 1:
        raise ValueError(f"need at least one encoder layer, got {n_layers}")
    x = depth_aware_attention(x_v, r, p, f"{prefix}.depth", depth_heads)
    return encoder.encoder_stack(x, p, prefix, n_layers, n_heads)


def split_visual(x_vto: ad.Node, n_objects: int) -> Tuple[ad.Node, ad.Node]:
    """Undo concat_visual on the updated rows."""
    total = x_vto.value.shape[0]
    if not 0 < n_objects < total:
        raise ad.ShapeError(f"cannot split {total} rows at {n_objects}")
    return (ad.slice_rows(x_vto, 0, n_objects),
            ad.slice_rows(x_vto, n_objects, total))


def register_defum(store: ParamStore, width: int, n_layers: int, n_heads: int,
                   depth_heads: int = 1, prefix: str = "defum") -> None:
    if n_layers < 1:
        raise ValueError(f"need at least one encoder layer, got {n_layers}")
    encoder.register_attention(store, f"{prefix}.depth", width, depth_heads,
                               project_out=False, biases=False)
    encoder.register_layer_norm(store, f"{prefix}.depth.ln", width)
    encoder.register_encoder_stack(store, prefix, width, n_layers, n_heads)
