import math

import numpy as np
import pytest

from diffood import tensor as tn
from diffood.diffusion import (NoiseSchedule, diffusion_loss, embed_tokens, forward_noise, linear_beta_schedule,
                               recon_loss, reconstruct, rounding_loss, sample)
from diffood.model import DenoiserModel, ModelConfig
from diffood.rng import stream
from diffood.tensor import Tensor
from diffood.text import TokenSequence


def tiny_model(vocab=12, d=8, n=6, seed=0, **kw):
    return DenoiserModel(ModelConfig(d=d, layers=1, heads=2, n=n, vocab_size=vocab, **kw), seed=seed)


def seqs_for():
    return [TokenSequence(np.array([2, 5, 6, 3, 0, 0]), 4), TokenSequence(np.array([2, 7, 8, 9, 10, 3]), 6)]


class TestSchedule:
    def test_default_endpoints(self):
        s = linear_beta_schedule(1000, 1e-4, 0.02)
        assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02
        assert np.all(np.diff(s.betas) > 0)

    def test_linear_formula(self):
        s = linear_beta_schedule(5, 0.1, 0.5)
        np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3, 0.4, 0.5])

    def test_constant_schedule(self):
        s = linear_beta_schedule(2, 0.5, 0.5)
        assert s.alpha_bar(2) == 0.25

    def test_alpha_bar_zero_is_one(self):
        assert linear_beta_schedule().alpha_bar(0) == 1.0

    def test_alpha_bar_final_below_threshold(self):
        ab = linear_beta_schedule().alpha_bars
        assert np.all(np.diff(ab) < 0) and ab[-1] < 1e-4

    def test_single_step(self):
        s = linear_beta_schedule(1, 0.01, 0.02)
        np.testing.assert_array_equal(s.betas, [0.01])

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 0.1, 1.0)])
    def test_bounds(self, args):
        with pytest.raises(ValueError):
            linear_beta_schedule(*args)

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            linear_beta_schedule(10).alpha_bar(11)

    def test_immutable(self):
        s = linear_beta_schedule(10)
        with pytest.raises(Exception):
            s.T = 3


class TestForwardProcess:
    def test_embed_without_noise_is_gather(self, rng):
        E = Tensor(rng.normal(size=(5, 3)))
        ids = np.array([[1, 4, 0]])
        np.testing.assert_array_equal(embed_tokens(ids, E, 0.0).data, E.data[ids])

    def test_embed_jitter_std(self):
        E = Tensor(np.zeros((2, 4)))
        noise = stream(0, "jitter").standard_normal((10_000, 4))
        x0 = embed_tokens(np.zeros(10_000, dtype=int), E, 0.1, noise).data
        std = x0.std(axis=0)
        assert np.all((std >= 0.097) & (std <= 0.103))

    def test_zero_eps(self, rng):
        s = linear_beta_schedule()
        x0 = Tensor(rng.normal(size=(2, 3)))
        out = forward_noise(x0, 500, s, np.zeros((2, 3))).data
        np.testing.assert_allclose(out, math.sqrt(s.alpha_bar(500)) * x0.data, rtol=1e-6)

    def test_vanishing_alpha_bar_returns_eps(self, rng):
        s = NoiseSchedule(3, np.array([0.5, 0.999999, 0.999999]))
        eps = rng.normal(size=(4,))
        out = forward_noise(Tensor(np.ones(4)), 3, s, eps).data
        np.testing.assert_allclose(out, eps, atol=1e-5)

    def test_per_row_steps(self, rng):
        s = linear_beta_schedule()
        x0 = Tensor(np.ones((2, 3, 4)))
        out = forward_noise(x0, np.array([10, 900]), s, np.zeros((2, 3, 4))).data
        np.testing.assert_allclose(out[0], math.sqrt(s.alpha_bar(10)), rtol=1e-6)
        np.testing.assert_allclose(out[1], math.sqrt(s.alpha_bar(900)), rtol=1e-5)

    def test_variance_at_700(self):
        s = linear_beta_schedule()
        eps = stream(3, "var").standard_normal((10_000, 8))
        with tn.precision(np.float64):
            xt = forward_noise(Tensor(np.full((10_000, 8), 2.0)), 700, s, eps).data
        assert abs(xt.var(axis=0).mean() / (1 - s.alpha_bar(700)) - 1) < 0.02

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            forward_noise(Tensor(np.ones(2)), 0, linear_beta_schedule(), np.zeros(2))


class TestLosses:
    def test_diffusion_loss_zero(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        assert diffusion_loss(x, x, np.ones((2, 3))).item() == 0.0

    def test_diffusion_loss_per_coordinate(self):
        x0, xh = Tensor(np.zeros((1, 1, 4))), Tensor(np.ones((1, 1, 4)))
        assert diffusion_loss(x0, xh, np.ones((1, 1))).item() == 1.0

    def test_diffusion_loss_loop_oracle(self, rng):
        x0, xh = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
        mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
        total, count = 0.0, 0
        for b in range(2):
            for i in range(3):
                if mask[b, i]:
                    total += sum((x0[b, i, k] - xh[b, i, k]) ** 2 for k in range(5)) / 5
                    count += 1
        with tn.precision(np.float64):
            got = diffusion_loss(Tensor(x0), Tensor(xh), mask).item()
        assert got == pytest.approx(total / count, rel=1e-12)

    def test_rounding_uniform(self):
        E = Tensor(np.eye(6)[:, :4] * 0 + np.array([[1, 0, 0, 0]] * 6))
        xh = Tensor(np.array([[[0.0, 1.0, 0.0, 0.0]]]))
        loss = rounding_loss(xh, np.array([[3]]), E, np.ones((1, 1))).item()
        assert loss == pytest.approx(math.log(6), rel=1e-6)

    def test_rounding_true_row_beats_uniform(self):
        E = Tensor(np.eye(5))
        xh = Tensor(E.data[[2]][None])
        assert rounding_loss(xh, np.array([[2]]), E, np.ones((1, 1))).item() < math.log(5)

    def test_rounding_loop_oracle(self, rng):
        E, xh = rng.normal(size=(7, 3)), rng.normal(size=(2, 4, 3))
        ids = rng.integers(0, 7, size=(2, 4))
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=float)
        total = 0.0
        for b in range(2):
            for i in range(4):
                if mask[b, i]:
                    logits = [sum(xh[b, i, k] * E[v, k] for k in range(3)) for v in range(7)]
                    m = max(logits)
                    lse = m + math.log(sum(math.exp(z - m) for z in logits))
                    total += lse - logits[ids[b, i]]
        with tn.precision(np.float64):
            got = rounding_loss(Tensor(xh), ids, Tensor(E), mask).item()
        assert got == pytest.approx(total / mask.sum(), rel=1e-10)


class TestReconLoss:
    def test_deterministic_and_additive(self):
        m = tiny_model()
        s = linear_beta_schedule()
        a = recon_loss(seqs_for(), m, s, 300, [stream(1, i) for i in range(2)])
        b = recon_loss(seqs_for(), m, s, 300, [stream(1, i) for i in range(2)])
        np.testing.assert_array_equal(a.l_d, b.l_d)
        np.testing.assert_array_equal(a.l_c, b.l_c)
        assert np.all(a.l_recon == a.l_d + a.l_c)
        assert np.all(a.l_d >= 0) and np.all(a.l_c >= 0)

    def test_per_word_average_uses_real_length(self):
        # with a zero output head the prediction is the bias only; l_d reduces to mean ||x0||^2/d over real words
        m = tiny_model(emb_std=1.0)
        m.params["out.w"].data[:] = 0
        m.params["out.b"].data[:] = 0
        seq = TokenSequence(np.array([2, 5, 3, 0, 0, 0]), 3)
        br = recon_loss([seq], m, linear_beta_schedule(), 10, [stream(0, 0)], sigma0=0.0)
        E = m.E.data.astype(np.float64)
        expected = (E[[2, 5, 3]] ** 2).mean(axis=1).mean()
        assert br.l_d[0] == pytest.approx(expected, rel=1e-5)
        assert br.l_c[0] == pytest.approx(math.log(12), rel=1e-5)


class TestReconstructAndSample:
    def test_untrained_chance_accuracy(self):
        m = tiny_model(vocab=40, d=16, n=6, seed=3, emb_std=1.0)
        s = linear_beta_schedule()
        rng = np.random.default_rng(0)
        seqs = [TokenSequence(np.array([2, *rng.integers(5, 40, size=4), 3]), 6) for _ in range(200)]
        rec = reconstruct(seqs, m, s, 900, [stream(5, i) for i in range(200)])
        acc = np.mean([r.accuracy for r in rec])
        assert acc < 0.15
        assert all(len(r.ids) == 6 for r in rec)

    def test_sample_deterministic(self):
        m = tiny_model()
        s = linear_beta_schedule(20)
        a = sample(m, s, 3, 6, stream(0, "s"))
        b = sample(m, s, 3, 6, stream(0, "s"))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 6)

    def test_single_step_sample_is_rounded_prediction(self):
        m = tiny_model()
        s = linear_beta_schedule(1, 0.01, 0.01)
        x1 = stream(4, "x").standard_normal((2, 6, 8))
        with tn.no_grad():
            x0 = m.denoise(Tensor(x1), np.ones(2, dtype=int)).data
            expected = (x0 @ m.E.data.T).argmax(axis=-1)
        np.testing.assert_array_equal(sample(m, s, 2, 6, stream(4, "x")), expected)
