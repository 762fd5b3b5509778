import math

import numpy as np
import pytest

from diffood import tensor as tn
from diffood.model import DenoiserModel, ModelConfig, masked_positions, timestep_embedding
from diffood.tensor import Tensor
from diffood.text import MASK_ID, TokenSequence, stack


def model(**kw):
    cfg = dict(d=16, layers=2, heads=4, n=8, vocab_size=20)
    cfg.update(kw)
    return DenoiserModel(ModelConfig(**cfg), seed=1)


def sequences():
    return [TokenSequence(np.array([2, 7, 8, 9, 3, 0, 0, 0]), 5),
            TokenSequence(np.array([2, 10, 3, 0, 0, 0, 0, 0]), 3),
            TokenSequence(np.array([2, 11, 12, 13, 14, 15, 16, 3]), 8)]


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(d=10, heads=4)

    def test_presets_differ_in_size(self):
        base, large = ModelConfig.preset("base-analog"), ModelConfig.preset("large-analog")
        assert large.d > base.d and large.layers > base.layers

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            ModelConfig.preset("huge")

    def test_small_vocab_rejected(self):
        with pytest.raises(ValueError):
            DenoiserModel(ModelConfig(vocab_size=3))


class TestDenoise:
    def test_output_shape_matches_input(self, rng):
        m = model()
        x = Tensor(rng.normal(size=(3, 8, 16)))
        assert m.denoise(x, np.array([1, 500, 1000])).shape == (3, 8, 16)

    def test_wrong_width_raises(self, rng):
        with pytest.raises(tn.ShapeError):
            model().denoise(Tensor(rng.normal(size=(2, 8, 15))), 1)

    def test_too_long_raises(self, rng):
        with pytest.raises(tn.ShapeError):
            model().denoise(Tensor(rng.normal(size=(2, 9, 16))), 1)

    def test_batch_rows_are_independent(self, rng):
        m = model()
        x = rng.normal(size=(4, 8, 16))
        t = np.array([5, 50, 500, 900])
        perm = np.array([2, 0, 3, 1])
        with tn.precision(np.float64), tn.no_grad():
            a = m.denoise(Tensor(x), t).data
            b = m.denoise(Tensor(x[perm]), t[perm]).data
        np.testing.assert_allclose(a[perm], b, rtol=1e-12, atol=1e-12)

    def test_step_changes_output(self, rng):
        m = model()
        x = Tensor(rng.normal(size=(1, 8, 16)))
        with tn.no_grad():
            assert not np.allclose(m.denoise(x, 10).data, m.denoise(x, 900).data)

    def test_same_seed_same_params(self):
        a, b = model(), model()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


class TestTimestepEmbedding:
    def test_step_zero(self):
        e = timestep_embedding(np.array([0]), 6)
        np.testing.assert_allclose(e, [[0, 0, 0, 1, 1, 1]])

    def test_odd_width_padded(self):
        assert timestep_embedding(np.array([3, 4]), 7).shape == (2, 7)


class TestHiddenRepr:
    def test_mean_over_real_positions(self):
        m = model()
        seqs = sequences()
        ids, _ = stack(seqs)
        with tn.no_grad():
            h = m.hidden(ids).data.astype(np.float64)
        expected = np.stack([h[i, : s.length].mean(axis=0) for i, s in enumerate(seqs)])
        np.testing.assert_allclose(m.hidden_repr(seqs), expected, rtol=1e-10)

    def test_shape(self):
        assert model().hidden_repr(sequences()).shape == (3, 16)

    def test_empty_sentence_rejected(self):
        with pytest.raises(ValueError):
            model().hidden_repr([TokenSequence(np.zeros(8, dtype=int), 0)])


class TestClassifier:
    def test_probabilities_sum_to_one(self):
        p, z = model(num_classes=3).classify(sequences())
        assert p.shape == z.shape == (3, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_single_class_is_certain(self):
        p, _ = model(num_classes=1).classify(sequences())
        np.testing.assert_array_equal(p, 1.0)

    def test_no_head(self):
        with pytest.raises(ValueError):
            model().classify(sequences())


class TestMLM:
    def test_logit_shape(self):
        ids, _ = stack(sequences())
        assert model().mlm_logits(ids).shape == (3, 8, 20)

    def test_untrained_loss_near_log_vocab(self):
        m = model(vocab_size=50)
        ids, mask = stack(sequences())
        loss = m.mlm_loss(ids, mask.astype(bool)).item()
        assert abs(loss - math.log(50)) < 0.5

    def test_no_masked_positions(self):
        ids, _ = stack(sequences())
        with pytest.raises(ValueError):
            model().mlm_loss(ids, np.zeros_like(ids, dtype=bool))

    def test_mask_token_reaches_the_model(self):
        m = model()
        ids, mask = stack(sequences())
        masked = np.zeros_like(ids, dtype=bool)
        masked[:, 1] = True
        with tn.no_grad():
            a = m.mlm_loss(ids, masked).item()
            direct = tn.cross_entropy(m.mlm_logits(np.where(masked, MASK_ID, ids)), ids, masked.astype(float)).item()
        assert a == direct


class TestMaskedPositions:
    def test_words_only_and_count(self, rng):
        seq_mask = np.array([[1] * 8, [1] * 4 + [0] * 4], dtype=float)
        words = np.array([[0] + [1] * 6 + [0], [0, 1, 1, 0, 0, 0, 0, 0]], dtype=bool)
        out = masked_positions(seq_mask, words, 0.5, rng)
        assert out.sum(axis=1).tolist() == [3, 1]
        assert not np.any(out & ~words)

    def test_at_least_one(self, rng):
        out = masked_positions(np.ones((1, 4)), np.array([[0, 1, 1, 0]], dtype=bool), 0.01, rng)
        assert out.sum() == 1

    def test_zero_rate_rejected(self, rng):
        with pytest.raises(ValueError):
            masked_positions(np.ones((1, 4)), np.ones((1, 4), dtype=bool), 0.0, rng)
