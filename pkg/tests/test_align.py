import numpy as np
import pytest

from scenecap import autodiff as ad
from scenecap.align import select_concepts, sgam_align
from scenecap.data import Concept, EmbeddingTable


def table_with(words):
    rng = np.random.default_rng(hash(tuple(words)) & 0xFFFF)
    return EmbeddingTable({w: rng.normal(size=300) for w in words})


class TestSelectConcepts:
    def test_ranked_by_score_then_word(self):
        table = table_with(["car", "sign", "road", "tree"])
        cands = [Concept("road", 0.5), Concept("sign", 0.9),
                 Concept("tree", 0.5), Concept("car", 0.1)]
        picked = select_concepts(cands, 3, table)
        assert [c.word for c in picked] == ["sign", "road", "tree"]

    def test_tie_breaks_alphabetically(self):
        table = table_with(["b", "a"])
        picked = select_concepts([Concept("b", 0.7), Concept("a", 0.7)], 1, table)
        assert picked[0].word == "a"

    def test_short_list_returned_whole(self):
        table = table_with(["sign"])
        picked = select_concepts([Concept("sign", 0.9)], 5, table)
        assert len(picked) == 1

    def test_vectors_resolved(self):
        table = table_with(["sign"])
        picked = select_concepts([Concept("sign", 0.9)], 1, table)
        np.testing.assert_array_equal(picked[0].ft, table.lookup("sign"))

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            select_concepts([], 0, table_with([]))

    def test_nonfinite_score_rejected(self):
        table = table_with(["sign"])
        with pytest.raises(ValueError):
            select_concepts([Concept("sign", float("nan"))], 1, table)

    def test_too_many_candidates_rejected(self):
        table = table_with([f"w{i}" for i in range(16)])
        cands = [Concept(f"w{i}", 0.5) for i in range(16)]
        with pytest.raises(ValueError):
            select_concepts(cands, 3, table)


def random_inputs(seed, k=3, m=5, zero_weights=False):
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    voc = tape.constant(rng.normal(size=(k, 300)))
    x_ft = tape.constant(rng.normal(size=(m, 300)))
    if zero_weights:
        w_qs = tape.param("w_qs", np.zeros((300, 300)))
        w_ks = tape.param("w_ks", np.zeros((300, 300)))
    else:
        w_qs = tape.param("w_qs", rng.normal(size=(300, 300)) * 0.05)
        w_ks = tape.param("w_ks", rng.normal(size=(300, 300)) * 0.05)
    return tape, voc, x_ft, w_qs, w_ks


class TestSgamAlign:
    def test_output_rows_unit_norm(self):
        _, voc, x_ft, w_qs, w_ks = random_inputs(0)
        out = sgam_align(voc, x_ft, w_qs, w_ks)
        norms = np.linalg.norm(out.value, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_zero_weights_closed_form_exact(self):
        # With zero projections every token attends uniformly, so the
        # update is the plain concept mean.  K != M guards against an
        # axis mix-up producing the same shape by luck.  K=2 makes the
        # uniform weight an exact power of two, so weighting-then-summing
        # and summing-then-dividing agree bit for bit.
        _, voc, x_ft, w_qs, w_ks = random_inputs(1, k=2, m=5,
                                                 zero_weights=True)
        out = sgam_align(voc, x_ft, w_qs, w_ks)
        shifted = x_ft.value + voc.value.mean(axis=0)
        expected = shifted / np.linalg.norm(shifted, axis=1, keepdims=True)
        np.testing.assert_array_equal(out.value, expected)

    def test_zero_weights_closed_form_odd_k(self):
        # With K=3 the uniform weight 1/3 is rounded, so the two
        # summation orders differ by an ulp or so; still the same mean.
        _, voc, x_ft, w_qs, w_ks = random_inputs(6, k=3, m=5,
                                                 zero_weights=True)
        out = sgam_align(voc, x_ft, w_qs, w_ks)
        shifted = x_ft.value + voc.value.mean(axis=0)
        expected = shifted / np.linalg.norm(shifted, axis=1, keepdims=True)
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_concept_permutation_invariance(self):
        _, voc, x_ft, w_qs, w_ks = random_inputs(2, k=4, m=6)
        out = sgam_align(voc, x_ft, w_qs, w_ks)
        tape2 = ad.Tape()
        perm = [2, 0, 3, 1]
        voc_p = tape2.constant(voc.value[perm])
        out_p = sgam_align(voc_p,
                           tape2.constant(x_ft.value),
                           tape2.param("w_qs", w_qs.value),
                           tape2.param("w_ks", w_ks.value))
        np.testing.assert_allclose(out_p.value, out.value, atol=1e-12)

    def test_token_axis_normalizes_over_tokens(self):
        # With a single concept the token-axis softmax spreads one unit
        # of weight across the M tokens, so the total shift mass is 1.
        rng = np.random.default_rng(3)
        tape = ad.Tape()
        voc = tape.constant(rng.normal(size=(1, 300)))
        x_ft_val = rng.normal(size=(4, 300))
        x_ft = tape.constant(x_ft_val)
        w_qs = tape.param("w_qs", rng.normal(size=(300, 300)) * 0.05)
        w_ks = tape.param("w_ks", rng.normal(size=(300, 300)) * 0.05)
        out = sgam_align(voc, x_ft, w_qs, w_ks, axis="tokens")
        # Recover the per-token shift before normalization.
        q = voc.value @ w_qs.value
        kk = x_ft_val @ w_ks.value
        logits = (q @ kk.T) / np.sqrt(300)
        alpha = np.exp(logits[0] - logits[0].max())
        alpha /= alpha.sum()
        shifted = x_ft_val + alpha[:, None] * voc.value[0]
        expected = shifted / np.linalg.norm(shifted, axis=1, keepdims=True)
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_concept_axis_weights_sum_per_token(self):
        # Uniform-over-concepts is specific to the concept axis; the
        # token axis at zero weights gives 1/M of each concept instead.
        _, voc, x_ft, w_qs, w_ks = random_inputs(4, k=2, m=5,
                                                 zero_weights=True)
        out_tok = sgam_align(voc, x_ft, w_qs, w_ks, axis="tokens")
        shifted = x_ft.value + voc.value.sum(axis=0) / 5.0
        expected = shifted / np.linalg.norm(shifted, axis=1, keepdims=True)
        np.testing.assert_allclose(out_tok.value, expected, atol=1e-12)

    def test_bad_axis_rejected(self):
        _, voc, x_ft, w_qs, w_ks = random_inputs(5)
        with pytest.raises(ValueError):
            sgam_align(voc, x_ft, w_qs, w_ks, axis="rows")

    def test_bad_width_rejected(self):
        tape = ad.Tape()
        voc = tape.constant(np.zeros((2, 10)))
        x_ft = tape.constant(np.zeros((3, 10)))
        w = tape.param("w", np.zeros((10, 10)))
        with pytest.raises(ad.ShapeError):
            sgam_align(voc, x_ft, w, w)
