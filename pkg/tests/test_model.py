import numpy as np
import pytest

from scenecap import autodiff as ad
from scenecap.data import (BOS, EOS, UNK, Concept, DepthMap, EmbeddingTable,
                           ObjectEntity, OcrEntity, SceneRecord, Vocabulary)
from scenecap.encoder import entity_decoder_mask
from scenecap.gradsuite import micro_features, micro_model, micro_vocab
from scenecap.model import (CaptionModel, ModelConfig, align_caption_tokens,
                            make_optimizer, prepare_record, run_training)


class TestModelConfig:
    def test_defaults_construct(self):
        cfg = ModelConfig()
        assert cfg.t % cfg.heads == 0
        assert cfg.max_len == 30

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(t=48, heads=5)

    def test_unknown_key_rejected(self):
        with pytest.raises((TypeError, ValueError)):
            ModelConfig.from_dict({"t": 16, "head_count": 2})

    def test_dict_round_trip(self):
        cfg = ModelConfig(t=16, heads=2, lr_decay_at=(10, 20))
        d = cfg.to_dict()
        assert d["lr_decay_at"] == [10, 20]
        assert ModelConfig.from_dict(d) == cfg


class TestMask:
    def test_entity_block_bidirectional(self):
        m = entity_decoder_mask(3, 2)
        assert m.shape == (5, 5)
        assert m[:3, :3].all()

    def test_entities_blind_to_decoder(self):
        m = entity_decoder_mask(3, 2)
        assert not m[:3, 3:].any()

    def test_decoder_causal_over_steps(self):
        m = entity_decoder_mask(2, 3)
        np.testing.assert_array_equal(
            m[2:, 2:], [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
        assert m[2:, :2].all()


class TestAlignCaptionTokens:
    def setup_method(self):
        self.vocab = Vocabulary(["red", "stop", "sign"])
        self.v = len(self.vocab)

    def test_vocab_match_first(self):
        idx = align_caption_tokens(["stop"], self.vocab, ["stop"])
        assert idx == [self.vocab.get("stop")]

    def test_oov_copies_from_ocr(self):
        idx = align_caption_tokens(["exit7"], self.vocab, ["hello", "exit7"])
        assert idx == [self.v + 1]

    def test_duplicate_ocr_takes_lowest_index(self):
        idx = align_caption_tokens(["exit7"], self.vocab,
                                   ["exit7", "other", "exit7"])
        assert idx == [self.v + 0]

    def test_unresolvable_becomes_unk(self):
        idx = align_caption_tokens(["nowhere"], self.vocab, ["exit7"])
        assert idx == [UNK]

    def test_prefer_copy_flips_priority(self):
        idx = align_caption_tokens(["stop"], self.vocab, ["stop"],
                                   prefer_copy=True)
        assert idx == [self.v + 0]
        idx = align_caption_tokens(["red"], self.vocab, ["stop"],
                                   prefer_copy=True)
        assert idx == [self.vocab.get("red")]


class TestLossCalibration:
    def test_zero_heads_give_log_uniform(self):
        model = micro_model(0)
        feats = micro_features(0, model.vocab, k=model.config.K)
        model.store["head.cls.w"] = np.zeros_like(model.store["head.cls.w"])
        model.store["head.cls.b"] = np.zeros_like(model.store["head.cls.b"])
        model.store["head.ptr.w"] = np.zeros_like(model.store["head.ptr.w"])
        model.store["head.ptr.b"] = np.zeros_like(model.store["head.ptr.b"])
        tape = ad.Tape()
        p = model.wrap_params(tape)
        loss, steps, _ = model.caption_loss(tape, p, feats, feats.captions[0])
        per_token = loss.value[0, 0] / steps
        expected = np.log(len(model.vocab) + feats.n_ocr)
        assert abs(per_token - expected) < 1e-9

    def test_step_count_is_tokens_plus_stop(self):
        model = micro_model(1)
        feats = micro_features(1, model.vocab, k=model.config.K)
        tape = ad.Tape()
        p = model.wrap_params(tape)
        _, steps, _ = model.caption_loss(tape, p, feats, "one two three")
        assert steps == 4


class TestMaskIsolation:
    """Perturbation checks that the static mask actually isolates blocks."""

    def _pieces(self, caption):
        model = micro_model(3)
        feats = micro_features(3, model.vocab, k=model.config.K)
        tape = ad.Tape()
        p = model.wrap_params(tape)
        x_ent, x_ocr = model.entity_embeddings(tape, p, feats)
        aligned = align_caption_tokens(caption.split(), model.vocab,
                                       feats.ocr_norm)
        dec_emb = model._teacher_inputs(p, x_ocr, aligned)
        dec_out, x_tocr = model.mmt_pass(p, x_ent, dec_emb,
                                         feats.n_objects, feats.n_ocr)
        return dec_out.value, x_tocr.value

    def test_entity_rows_ignore_decoder_content(self):
        words = list(micro_vocab(3).ordinary_words)
        _, x_tocr_a = self._pieces(" ".join(words[:2]))
        _, x_tocr_b = self._pieces(" ".join(words[2:6]))
        np.testing.assert_array_equal(x_tocr_a, x_tocr_b)

    def test_decoder_rows_causal(self):
        words = list(micro_vocab(3).ordinary_words)
        dec_a, _ = self._pieces(f"{words[0]} {words[1]} {words[2]}")
        dec_b, _ = self._pieces(f"{words[0]} {words[3]} {words[4]}")
        # step 0 input is <s>, step 1 input is words[0]: both unchanged
        np.testing.assert_array_equal(dec_a[0], dec_b[0])
        np.testing.assert_array_equal(dec_a[1], dec_b[1])
        assert np.abs(dec_a[2] - dec_b[2]).max() > 0.0


class TestTeacherInputs:
    def test_rows_are_embeddings_plus_positions(self):
        model = micro_model(4)
        feats = micro_features(4, model.vocab, k=model.config.K)
        tape = ad.Tape()
        p = model.wrap_params(tape)
        _, x_ocr = model.entity_embeddings(tape, p, feats)
        v = len(model.vocab)
        aligned = [5, v + 1]  # one vocab word, one copied OCR entry
        emb = model._teacher_inputs(p, x_ocr, aligned).value
        table = model.store["dec.table"]
        pos = model.store["dec.pos"]
        np.testing.assert_array_equal(emb[0], table[BOS] + pos[0])
        np.testing.assert_array_equal(emb[1], table[5] + pos[1])
        np.testing.assert_array_equal(emb[2], x_ocr.value[1] + pos[2])


class TestGradientWiring:
    def test_unused_table_rows_get_zero_grad(self):
        model = micro_model(5)
        feats = micro_features(5, model.vocab, k=model.config.K)
        caption = feats.captions[0]
        tape = ad.Tape()
        p = model.wrap_params(tape)
        loss, _, _ = model.caption_loss(tape, p, feats, caption)
        tape.backward(loss)
        g = ad.grad_of(p["dec.table"])

        aligned = align_caption_tokens(caption.split(), model.vocab,
                                       feats.ocr_norm)
        used = {BOS} | {i for i in aligned if i < len(model.vocab)}
        for row in range(len(model.vocab)):
            if row in used:
                assert np.abs(g[row]).max() > 0.0
            else:
                assert not g[row].any()


class TestTrainingLoop:
    def test_loss_decreases(self):
        model = micro_model(6, overrides={"lr": 1e-3})
        feats = micro_features(6, model.vocab, k=model.config.K)
        batch = [(feats, feats.captions[0])]
        history = run_training(model, batch, steps=30)
        assert history[-1][1] < history[0][1]

    def test_lr_decay_applied(self):
        # Decaying to zero right before step 2 must freeze the params,
        # so two steps land exactly where one step did.
        feats = micro_features(7, micro_vocab(7), k=2)
        base = {"lr": 1e-3, "lr_decay": 0.0}

        one = micro_model(7, overrides=base)
        run_training(one, [(feats, feats.captions[0])], steps=1)

        frozen = micro_model(7, overrides=dict(base, lr_decay_at=[2]))
        run_training(frozen, [(feats, feats.captions[0])], steps=2)
        for name, value in one.store.items():
            np.testing.assert_array_equal(frozen.store[name], value)

        moving = micro_model(7, overrides=base)
        run_training(moving, [(feats, feats.captions[0])], steps=2)
        assert any(np.abs(moving.store[n] - one.store[n]).max() > 0.0
                   for n, _ in one.store.items())


class TestGeneration:
    def test_zero_scores_emit_first_vocab_word(self):
        model = micro_model(8)
        feats = micro_features(8, model.vocab, k=model.config.K)
        for name in ("head.cls.w", "head.cls.b", "head.ptr.w", "head.ptr.b"):
            model.store[name] = np.zeros_like(model.store[name])
        hyp = model.generate(feats)
        assert not hyp.terminated
        assert len(hyp.tokens) == model.config.max_len
        assert all(t.source == "vocab" and t.index == 0 for t in hyp.tokens)

    def test_suppressed_vocab_head_forces_copies(self):
        model = micro_model(9)
        feats = micro_features(9, model.vocab, k=model.config.K)
        model.store["head.cls.b"] = np.full_like(model.store["head.cls.b"],
                                                 -50.0)
        hyp = model.generate(feats)
        assert len(hyp.tokens) == model.config.max_len
        assert all(t.source == "ocr" for t in hyp.tokens)
        assert all(t.surface in feats.ocr_tokens for t in hyp.tokens)

    def test_closure_over_random_models(self):
        for seed in range(5):
            model = micro_model(20 + seed)
            feats = micro_features(20 + seed, model.vocab, k=model.config.K)
            hyp = model.generate(feats)
            assert len(hyp.tokens) <= model.config.max_len
            surfaces = set(model.vocab.words) | set(feats.ocr_tokens)
            for t in hyp.tokens:
                assert t.surface in surfaces
            if not hyp.terminated:
                assert len(hyp.tokens) == model.config.max_len


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        model = micro_model(10)
        feats = micro_features(10, model.vocab, k=model.config.K)
        path = tmp_path / "model.ckpt"
        model.save(path)
        again = CaptionModel.load(path)
        assert again.config == model.config
        assert again.vocab.words == model.vocab.words
        assert again.appearance_dim == model.appearance_dim
        for name, value in model.store.items():
            np.testing.assert_array_equal(again.store[name], value)
        assert again.generate(feats).caption == model.generate(feats).caption

    def test_resave_is_byte_identical(self, tmp_path):
        model = micro_model(11)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        model.save(p1)
        CaptionModel.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()


def tiny_scene():
    rng = np.random.default_rng(0)
    table = EmbeddingTable({
        "stop": rng.normal(size=300), "sign": rng.normal(size=300),
        "exit5": rng.normal(size=300), "red": rng.normal(size=300),
    })
    record = SceneRecord(
        id="s1", width=8, height=8, depth_map="depth/s1.pgm",
        objects=[ObjectEntity(box=(0, 0, 4, 4), feat=rng.normal(size=6)),
                 ObjectEntity(box=(2, 2, 8, 8), feat=rng.normal(size=6))],
        ocr=[OcrEntity(token="exit5", box=(1, 1, 3, 3),
                       feat=rng.normal(size=6), conf=0.7)],
        concepts=[Concept("sign", 0.9), Concept("red", 0.4)],
        captions=["red stop sign exit5"],
    )
    vals = rng.integers(0, 256, size=(8, 8)).astype(np.uint8)
    return record, DepthMap(values=vals), table


class TestPrepareRecord:
    def test_shapes_and_ordering(self):
        record, dm, table = tiny_scene()
        cfg = ModelConfig(t=16, heads=2, K=1, vocab_path="v.txt")
        feats = prepare_record(record, dm, table, cfg)
        assert feats.x_of.shape == (2, 6)
        assert feats.x_tf.shape == (1, 6)
        assert feats.x_ph.shape == (1, 604)
        assert feats.x_ft.shape == (1, 300)
        assert feats.r.shape == (3, 3)
        assert feats.ocr_tokens == ["exit5"]
        # K=1 keeps only the highest-scoring concept
        assert feats.voc_ft.shape == (1, 300)
        np.testing.assert_array_equal(feats.voc_ft[0], table.lookup("sign"))

    def test_depth_dimension_mismatch_rejected(self):
        record, _, table = tiny_scene()
        bad = DepthMap(values=np.zeros((4, 8), dtype=np.uint8))
        with pytest.raises(ValueError, match="depth"):
            prepare_record(record, bad, table, ModelConfig(t=16, heads=2))
