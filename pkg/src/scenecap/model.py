"""The captioning model: feature preparation, multimodal encoding,
dual-head word prediction, teacher-forced training, greedy generation.

A model owns a ParamStore; every forward pass wraps the current arrays
in tape nodes, so one training step is one tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import depth_fusion, embeddings, encoder
from .align import ALIGN_AXES, select_concepts, sgam_align
from .data import (BOS, EOS, UNK, DepthMap, EmbeddingTable, SceneRecord,
                   Vocabulary, normalize_token, subword_vector, tokenize)
from .depth import depth_value_of_region, relative_depth_matrix, spatial_feature
from .params import Adam, ParamStore, load_checkpoint, save_checkpoint
from .phoc import phoc


@dataclass
class ModelConfig:
    t: int = 48
    heads: int = 4
    mmt_layers: int = 4
    defum_layers: int = 2
    K: int = 5
    max_len: int = 30
    vocab_path: str = "vocab.txt"
    seed: int = 0
    lr: float = 1e-4
    # schedule and variants beyond the core keys
    lr_decay: float = 0.1
    lr_decay_at: Tuple[int, ...] = ()
    train_steps: int = 500
    depth_heads: int = 1
    align_axis: str = "concepts"
    prefer_copy: bool = False
    allow_oov: bool = False

    def __post_init__(self):
        if self.t < 1 or self.heads < 1 or self.t % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide t {self.t}")
        if self.mmt_layers < 1 or self.defum_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.align_axis not in ALIGN_AXES:
            raise ValueError(f"align_axis must be one of {ALIGN_AXES}")
        self.lr_decay_at = tuple(int(s) for s in self.lr_decay_at)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass
class RecordFeatures:
    """Numeric inputs for one scene, ready for the tape."""
    id: str
    x_of: np.ndarray          # n x d object appearance
    s_obj: np.ndarray         # n x 5
    x_tf: np.ndarray          # m x d OCR appearance
    s_ocr: np.ndarray         # m x 5
    conf: np.ndarray          # m x 1
    x_ph: np.ndarray          # m x 604
    x_ft: np.ndarray          # m x 300
    r: np.ndarray             # (n+m) x (n+m) relative depth bias
    ocr_tokens: List[str]
    ocr_norm: List[str]
    voc_ft: np.ndarray        # k x 300 (k may be 0)
    voc_score: np.ndarray     # k x 1
    captions: List[str] = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return self.x_of.shape[0]

    @property
    def n_ocr(self) -> int:
        return self.x_tf.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.voc_ft.shape[0]


@dataclass
class TokenChoice:
    surface: str
    source: str               # "vocab" or "ocr"
    index: int


@dataclass
class CaptionHypothesis:
    tokens: List[TokenChoice]
    terminated: bool

    @property
    def caption(self) -> str:
        return " ".join(t.surface for t in self.tokens)


def prepare_record(record: SceneRecord, depth_map: DepthMap,
                   table: EmbeddingTable, config: ModelConfig) -> RecordFeatures:
    if (depth_map.width, depth_map.height) != (record.width, record.height):
        raise ValueError(
            f"record {record.id!r}: depth map is "
            f"{depth_map.width}x{depth_map.height}, scene is "
            f"{record.width}x{record.height}"
        )
    dv_obj = [depth_value_of_region(depth_map, o.box) for o in record.objects]
    dv_ocr = [depth_value_of_region(depth_map, o.box) for o in record.ocr]

    x_of = np.stack([o.feat for o in record.objects])
    s_obj = np.stack([
        spatial_feature(o.box, dv, record.width, record.height)
        for o, dv in zip(record.objects, dv_obj)
    ])
    x_tf = np.stack([o.feat for o in record.ocr])
    s_ocr = np.stack([
        spatial_feature(o.box, dv, record.width, record.height)
        for o, dv in zip(record.ocr, dv_ocr)
    ])
    conf = np.array([[o.conf] for o in record.ocr])
    x_ph = np.stack([phoc(o.token) for o in record.ocr])
    x_ft = np.stack([
        subword_vector(table, o.token, allow_oov=config.allow_oov)
        for o in record.ocr
    ])

    chosen = select_concepts(record.concepts, config.K, table,
                             allow_oov=config.allow_oov)
    if chosen:
        voc_ft = np.stack([c.ft for c in chosen])
        voc_score = np.array([[c.score] for c in chosen])
    else:
        voc_ft = np.zeros((0, x_ft.shape[1]))
        voc_score = np.zeros((0, 1))

    return RecordFeatures(
        id=record.id,
        x_of=x_of, s_obj=s_obj,
        x_tf=x_tf, s_ocr=s_ocr, conf=conf, x_ph=x_ph, x_ft=x_ft,
        r=relative_depth_matrix(dv_obj + dv_ocr),
        ocr_tokens=[o.token for o in record.ocr],
        ocr_norm=[normalize_token(o.token) for o in record.ocr],
        voc_ft=voc_ft, voc_score=voc_score,
        captions=list(record.captions),
    )


def align_caption_tokens(tokens: Sequence[str], vocab: Vocabulary,
                         ocr_norm: Sequence[str],
                         prefer_copy: bool = False) -> List[int]:
    """Map caption tokens into the joint vocab+copy index space.

    Indices below |V| supervise the classifier head; |V|+j supervises a
    copy of OCR entry j (lowest j on duplicates).  Unresolvable tokens
    become <unk>.
    """
    v = len(vocab)
    out = []
    for tok in tokens:
        vocab_idx = vocab.get(tok)
        copy_idx = None
        for j, norm in enumerate(ocr_norm):
            if norm == tok:
                copy_idx = v + j
                break
        if prefer_copy:
            idx = copy_idx if copy_idx is not None else vocab_idx
        else:
            idx = vocab_idx if vocab_idx is not None else copy_idx
        out.append(idx if idx is not None else UNK)
    return out


class CaptionModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 appearance_dim: int):
        if appearance_dim < 1:
            raise ValueError("appearance dim must be >= 1")
        if appearance_dim % config.heads != 0:
            raise ValueError(
                f"heads {config.heads} must divide appearance dim {appearance_dim}"
            )
        self.config = config
        self.vocab = vocab
        self.appearance_dim = appearance_dim
        self.store = ParamStore(config.seed)
        self._register_params()

    def _register_params(self) -> None:
        c = self.config
        store = self.store
        embeddings.register_embeddings(store, self.appearance_dim, c.t)
        store.add("sgam.w_qs", 300, 300)
        store.add("sgam.w_ks", 300, 300)
        depth_fusion.register_defum(store, self.appearance_dim, c.defum_layers,
                                    c.heads, depth_heads=c.depth_heads)
        encoder.register_encoder_stack(store, "mmt", c.t, c.mmt_layers, c.heads)
        store.add("dec.table", len(self.vocab), c.t)
        store.add("dec.pos", c.max_len, c.t)
        store.add("head.cls.w", c.t, len(self.vocab))
        store.add("head.cls.b", 1, len(self.vocab), init="zeros")
        store.add("head.ptr.w", c.t, c.t)
        store.add("head.ptr.b", 1, 1, init="zeros")

    def wrap_params(self, tape: ad.Tape) -> Dict[str, ad.Node]:
        return {name: tape.param(name, value) for name, value in self.store.items()}

    # -- forward pieces ----------------------------------------------------

    def entity_embeddings(self, tape: ad.Tape, p: Dict[str, ad.Node],
                          feats: RecordFeatures) -> Tuple[ad.Node, ad.Node]:
        """Common-space entity rows [objects | ocr | concepts].

        Returns (x_ent, x_ocr_emb); the OCR block is also handed back
        separately because copied decoder inputs reuse those rows.
        """
        c = self.config
        x_v = tape.constant(
            depth_fusion.concat_visual(feats.x_of, feats.x_tf), "x_v")
        x_vto = depth_fusion.defum_update(x_v, feats.r, p, c.defum_layers,
                                          c.heads, depth_heads=c.depth_heads)
        # The updated object rows are deliberately unused: the object
        # embedding consumes the raw appearance feature.
        _, x_tf_upd = depth_fusion.split_visual(x_vto, feats.n_objects)

        x_ft = tape.constant(feats.x_ft, "x_ft")
        if feats.n_concepts > 0:
            voc_ft = tape.constant(feats.voc_ft, "voc_ft")
            x_ft_upd = sgam_align(voc_ft, x_ft, p["sgam.w_qs"], p["sgam.w_ks"],
                                  axis=c.align_axis)
        else:
            x_ft_upd = x_ft

        x_obj = embeddings.embed_object(
            tape.constant(feats.x_of, "x_of"),
            tape.constant(feats.s_obj, "s_obj"), p)
        x_ocr = embeddings.embed_ocr(
            x_tf_upd, x_ft_upd,
            tape.constant(feats.x_ph, "x_ph"),
            tape.constant(feats.s_ocr, "s_ocr"),
            tape.constant(feats.conf, "conf"), p)
        parts = [x_obj, x_ocr]
        if feats.n_concepts > 0:
            x_voc = embeddings.embed_concept(
                voc_ft, tape.constant(feats.voc_score, "voc_score"), p)
            parts.append(x_voc)
        return ad.concat_rows(parts), x_ocr

    def mmt_pass(self, p: Dict[str, ad.Node], x_ent: ad.Node, dec_emb: ad.Node,
                 n_objects: int, n_ocr: int) -> Tuple[ad.Node, ad.Node]:
        """Run the multimodal stack; returns (dec_out, x_tocr)."""
        n_ent = x_ent.value.shape[0]
        n_steps = dec_emb.value.shape[0]
        mask = encoder.entity_decoder_mask(n_ent, n_steps)
        seq = ad.concat_rows([x_ent, dec_emb])
        out = encoder.encoder_stack(seq, p, "mmt", self.config.mmt_layers,
                                    self.config.heads, mask=mask)
        dec_out = ad.slice_rows(out, n_ent, n_ent + n_steps)
        x_tocr = ad.slice_rows(out, n_objects, n_objects + n_ocr)
        return dec_out, x_tocr

    def predict_scores(self, dec_out: ad.Node, x_tocr: ad.Node,
                       p: Dict[str, ad.Node]) -> ad.Node:
        """Joint scores [vocab logits | pointer scores], rows per step."""
        vocab_logits = ad.add(ad.matmul(dec_out, p["head.cls.w"]),
                              p["head.cls.b"])
        pointer = ad.add(
            ad.matmul(ad.matmul(dec_out, p["head.ptr.w"]), ad.transpose(x_tocr)),
            p["head.ptr.b"])
        return ad.concat_cols([vocab_logits, pointer])

    def _teacher_inputs(self, p: Dict[str, ad.Node], x_ocr: ad.Node,
                        aligned: Sequence[int]) -> ad.Node:
        """Decoder input rows for steps 0..len(aligned): start token, then
        the embedding of each forced token, plus step positions."""
        v = len(self.vocab)
        rows = [ad.gather_rows(p["dec.table"], [BOS])]
        for idx in aligned:
            if idx < v:
                rows.append(ad.gather_rows(p["dec.table"], [idx]))
            else:
                rows.append(ad.gather_rows(x_ocr, [idx - v]))
        emb = ad.concat_rows(rows)
        pos = ad.slice_rows(p["dec.pos"], 0, len(rows))
        return ad.add(emb, pos)

    def caption_loss(self, tape: ad.Tape, p: Dict[str, ad.Node],
                     feats: RecordFeatures, caption: str
                     ) -> Tuple[ad.Node, int, int]:
        """Teacher-forced summed cross-entropy for one (record, caption).

        Returns (loss sum node, step count, correct argmax count).
        """
        tokens = tokenize(caption)
        if not tokens:
            raise ValueError(f"record {feats.id!r}: caption has no tokens")
        tokens = tokens[:self.config.max_len - 1]
        aligned = align_caption_tokens(tokens, self.vocab, feats.ocr_norm,
                                       prefer_copy=self.config.prefer_copy)
        targets = aligned + [EOS]

        x_ent, x_ocr = self.entity_embeddings(tape, p, feats)
        dec_emb = self._teacher_inputs(p, x_ocr, aligned)
        dec_out, x_tocr = self.mmt_pass(p, x_ent, dec_emb,
                                        feats.n_objects, feats.n_ocr)
        scores = self.predict_scores(dec_out, x_tocr, p)
        loss = ad.cross_entropy(scores, targets, reduction="sum")
        correct = int((scores.value.argmax(axis=1) == np.asarray(targets)).sum())
        return loss, len(targets), correct

    def batch_loss(self, tape: ad.Tape, p: Dict[str, ad.Node],
                   batch: Sequence[Tuple[RecordFeatures, str]]
                   ) -> Tuple[ad.Node, float]:
        """Token-mean loss node over (features, caption) pairs + accuracy."""
        if not batch:
            raise ValueError("empty batch")
        total: Optional[ad.Node] = None
        steps = 0
        correct = 0
        for feats, caption in batch:
            loss, n, c = self.caption_loss(tape, p, feats, caption)
            total = loss if total is None else ad.add(total, loss)
            steps += n
            correct += c
        return ad.scale(total, 1.0 / steps), correct / steps

    def train_step(self, batch: Sequence[Tuple[RecordFeatures, str]],
                   optimizer: Adam) -> Tuple[float, float]:
        """One forward/backward/update pass; returns (loss, accuracy)."""
        tape = ad.Tape()
        p = self.wrap_params(tape)
        loss, accuracy = self.batch_loss(tape, p, batch)
        tape.backward(loss)
        grads = {name: ad.grad_of(node) for name, node in p.items()}
        optimizer.step(grads)
        return float(loss.value[0, 0]), accuracy

    def generate(self, feats: RecordFeatures) -> CaptionHypothesis:
        """Greedy decode from the start token; stops at the end token or
        the length cap.  Argmax ties break toward the lower index."""
        c = self.config
        v = len(self.vocab)
        tape = ad.Tape(record=False)
        p = self.wrap_params(tape)
        x_ent, x_ocr = self.entity_embeddings(tape, p, feats)

        input_rows = [ad.gather_rows(p["dec.table"], [BOS])]
        tokens: List[TokenChoice] = []
        terminated = False
        for step in range(c.max_len):
            dec_emb = ad.add(ad.concat_rows(input_rows),
                             ad.slice_rows(p["dec.pos"], 0, len(input_rows)))
            dec_out, x_tocr = self.mmt_pass(p, x_ent, dec_emb,
                                            feats.n_objects, feats.n_ocr)
            scores = self.predict_scores(
                ad.slice_rows(dec_out, step, step + 1), x_tocr, p)
            y = int(scores.value[0].argmax())
            if y == EOS:
                terminated = True
                break
            if y < v:
                tokens.append(TokenChoice(self.vocab.word(y), "vocab", y))
                input_rows.append(ad.gather_rows(p["dec.table"], [y]))
            else:
                j = y - v
                tokens.append(TokenChoice(feats.ocr_tokens[j], "ocr", j))
                input_rows.append(ad.gather_rows(x_ocr, [j]))
        return CaptionHypothesis(tokens=tokens, terminated=terminated)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config.to_dict()
        cfg["appearance_dim"] = self.appearance_dim
        save_checkpoint(path, self.store, cfg, list(self.vocab.ordinary_words))

    @classmethod
    def load(cls, path) -> "CaptionModel":
        cfg, words, arrays = load_checkpoint(path)
        appearance_dim = cfg.pop("appearance_dim")
        model = cls(ModelConfig.from_dict(cfg), Vocabulary(words), appearance_dim)
        expected = set(model.store)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(
                f"checkpoint parameter mismatch: missing {missing}, extra {extra}"
            )
        for name, value in arrays.items():
            model.store[name] = value
        return model


def make_optimizer(model: CaptionModel) -> Adam:
    return Adam(model.store, lr=model.config.lr)


def run_training(model: CaptionModel,
                 batch: Sequence[Tuple[RecordFeatures, str]],
                 steps: int,
                 log_every: int = 0,
                 stop_at_accuracy: Optional[float] = None
                 ) -> List[Tuple[int, float, float]]:
    """Full-batch training loop; returns (step, loss, accuracy) history.

    The learning rate is multiplied by config.lr_decay when the step
    counter crosses each entry of config.lr_decay_at.  With
    ``stop_at_accuracy`` set, the loop ends early once the teacher-forced
    accuracy reaches it.
    """
    opt = make_optimizer(model)
    history = []
    for step in range(1, steps + 1):
        if step in model.config.lr_decay_at:
            opt.lr *= model.config.lr_decay
        loss, accuracy = model.train_step(batch, opt)
        if log_every and (step % log_every == 0 or step == steps):
            history.append((step, loss, accuracy))
        elif not log_every:
            history.append((step, loss, accuracy))
        if stop_at_accuracy is not None and accuracy >= stop_at_accuracy:
            if not history or history[-1][0] != step:
                history.append((step, loss, accuracy))
            break
    return history
