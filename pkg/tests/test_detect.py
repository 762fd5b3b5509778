import decimal
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffood import detect as dt
from diffood.diffusion import linear_beta_schedule, recon_loss
from diffood.model import DenoiserModel, ModelConfig
from diffood.rng import stream
from diffood.text import TokenSequence

SCORES = st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=30)


def brute_auroc(a, b):
    wins = sum(1.0 if y > x else 0.5 if y == x else 0.0 for x in a for y in b)
    return wins / (len(a) * len(b))


def brute_far95(a, b):
    # scan every ID score as a candidate threshold, keep the smallest that admits 95%
    for g in sorted(a):
        if 100 * sum(x <= g for x in a) >= 95 * len(a):
            return sum(y <= g for y in b) / len(b)


def tiny(vocab=20, **kw):
    return DenoiserModel(ModelConfig(d=8, layers=1, heads=2, n=8, vocab_size=vocab, **kw), seed=2)


def seqs(n=5, seed=0, vocab=20):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, 6))
        ids = np.zeros(8, dtype=np.int64)
        ids[: k + 2] = [2, *rng.integers(5, vocab, size=k), 3]
        out.append(TokenSequence(ids, k + 2))
    return out


class TestAuroc:
    @pytest.mark.parametrize("a,b,want", [([1, 2], [3, 4], 1.0), ([1, 3], [2, 4], 0.75), ([5], [5], 0.5)])
    def test_examples(self, a, b, want):
        assert dt.auroc(a, b) == want

    def test_empty_side(self):
        with pytest.raises(ValueError):
            dt.auroc([], [1.0])

    def test_random_oracle(self, rng):
        for _ in range(50):
            a = rng.integers(0, 8, size=rng.integers(1, 40)).astype(float)
            b = rng.integers(0, 8, size=rng.integers(1, 40)).astype(float)
            assert dt.auroc(a, b) == brute_auroc(a, b)


class TestFar95:
    def test_all_ood_above(self):
        ids = np.arange(1, 101)
        assert dt.id_threshold(ids) == 95
        assert dt.far95(ids, np.full(10, 200)) == 0.0

    def test_all_ood_below(self):
        assert dt.far95(np.arange(1, 101), np.zeros(10)) == 1.0

    def test_single_id_score(self):
        assert dt.id_threshold([3.0]) == 3.0

    def test_random_oracle(self, rng):
        for _ in range(50):
            a = rng.integers(0, 10, size=rng.integers(1, 50))
            b = rng.integers(0, 10, size=rng.integers(1, 50))
            assert dt.far95(a, b) == brute_far95(list(a), list(b))

    def test_calibrated_threshold_keeps_95_percent(self, rng):
        dev = rng.normal(size=333)
        gamma = dt.id_threshold(dev)
        assert dt.decide(dev, gamma).mean() <= 0.05

    def test_metrics_record(self):
        m = dt.DetectionMetrics.compute([1.0, 2.0], [3.0, 4.0, 5.0])
        assert (m.auroc, m.far95, m.n_id, m.n_ood) == (1.0, 0.0, 2, 3)


class TestDecide:
    def test_boundary(self):
        assert dt.decide(1.5, 1.5) == 0
        assert dt.decide(1.5 + 1e-12, 1.5) == 1

    def test_vector(self):
        np.testing.assert_array_equal(dt.decide(np.array([0.0, 2.0, 1.0]), 1.0), [0, 1, 0])


class TestMahalanobis:
    def test_two_points(self):
        s = dt.maha_fit(np.array([[0.0, 0.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(s.mu, [[1.0, 0.0]])
        assert np.linalg.matrix_rank(s.sigma) == 1
        # the null direction is ignored
        assert dt.maha_score([[1.0, 5.0]], s)[0] == pytest.approx(0.0, abs=1e-12)
        assert dt.maha_score([[2.0, 0.0]], s)[0] == pytest.approx(1.0, rel=1e-12)

    def test_identical_samples(self):
        s = dt.maha_fit(np.ones((4, 3)))
        assert dt.maha_score(np.ones(3), s)[0] == 0.0

    def test_identity_example(self):
        s = dt.MahalanobisStats(np.zeros((1, 2)), np.eye(2), np.eye(2), np.array([10]))
        assert dt.maha_score([3.0, 4.0], s)[0] == pytest.approx(25.0)

    def test_pinv_symmetric(self, rng):
        x = rng.normal(size=(5, 8))
        p = dt.maha_fit(x).sigma_pinv
        assert np.abs(p - p.T).max() <= 1e-6

    def test_pinv_cutoff(self):
        inv = dt.pinv_sym(np.diag([1.0, 1e-9, 0.0]))
        np.testing.assert_allclose(inv, np.diag([1.0, 0.0, 0.0]))

    def test_two_class_loop_oracle(self, rng):
        h = rng.normal(size=(40, 3))
        labels = np.repeat([0, 1], 20)
        h[labels == 1] += 4.0
        s = dt.maha_fit(h, labels)
        assert s.class_count == 2 and s.n == 40
        q = rng.normal(size=(6, 3)) * 3
        want = [min(float((x - m) @ s.sigma_pinv @ (x - m)) for m in s.mu) for x in q]
        np.testing.assert_allclose(dt.maha_score(q, s), want, rtol=1e-10)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            dt.maha_fit(np.ones((1, 3)))

    def test_dimension_mismatch(self, rng):
        s = dt.maha_fit(rng.normal(size=(5, 3)))
        with pytest.raises(ValueError):
            dt.maha_score(np.ones((1, 4)), s)


class TestCosine:
    def test_identical_and_orthogonal(self):
        dev = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(dt.cosine_similarity_max([[3.0, 0.0]], dev), [1.0])
        np.testing.assert_allclose(dt.cosine_similarity_max([[1.0, 0.0]], dev[1:]), [0.0])

    def test_negated(self, rng):
        h, dev = rng.normal(size=(4, 5)), rng.normal(size=(7, 5))
        np.testing.assert_array_equal(dt.cosine_score(h, dev), -dt.cosine_similarity_max(h, dev))

    def test_loop_oracle(self, rng):
        h, dev = rng.normal(size=(4, 5)), rng.normal(size=(7, 5))
        want = [max(float(x @ y) / (np.linalg.norm(x) * np.linalg.norm(y)) for y in dev) for x in h]
        np.testing.assert_allclose(dt.cosine_similarity_max(h, dev), want, rtol=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            dt.cosine_score([[0.0, 0.0]], [[1.0, 0.0]])


class TestClassifierScores:
    def test_msp_uniform(self):
        assert dt.msp_score(np.full((1, 4), 0.25))[0] == pytest.approx(0.75)

    def test_msp_one_hot(self):
        assert dt.msp_score([[1.0 - 1e-9, 1e-9]])[0] == pytest.approx(0.0, abs=1e-8)

    def test_msp_loop_oracle(self, rng):
        z = rng.normal(size=(5, 3))
        want = [1 - max(math.exp(v) for v in row) / sum(math.exp(v) for v in row) for row in z]
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(dt.msp_score(p), want, rtol=1e-12)

    def test_energy_single_logit(self):
        assert dt.energy_score([[2.5]])[0] == -2.5

    def test_energy_two_equal(self):
        assert dt.energy_score([[1.0, 1.0]])[0] == pytest.approx(-1.0 - math.log(2), rel=1e-15)

    def test_energy_high_precision_oracle(self, rng):
        z = rng.normal(size=(3, 6)) * 20
        ctx = decimal.Context(prec=50)
        for row, got in zip(z, dt.energy_score(z)):
            total = sum(ctx.exp(decimal.Decimal(float(v))) for v in row)
            assert got == pytest.approx(-float(ctx.ln(total)), rel=1e-14)

    def test_energy_large_logits_stable(self):
        assert np.isfinite(dt.energy_score([[1000.0, 999.0]])).all()


class TestCombined:
    def test_endpoints(self, rng):
        r, d = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_array_equal(dt.combined_score(r, d, 1.0), r)
        np.testing.assert_array_equal(dt.combined_score(r, d, 0.0), d)
        np.testing.assert_allclose(dt.combined_score(r, d, 0.5), (r + d) / 2)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_range(self, lam):
        with pytest.raises(ValueError):
            dt.combined_score([1.0], [1.0], lam)

    def test_standardized_mode(self):
        r, d = np.array([1.0, 3.0]), np.array([10.0, 30.0])
        out = dt.combined_score(r, d, 0.5, dt.Standardizer.fit(r), dt.Standardizer.fit(d))
        np.testing.assert_allclose(out, [-1.0, 1.0])


class TestModelScores:
    def test_recon_score_single_draw_equals_recon_loss(self):
        m, s, data = tiny(), linear_beta_schedule(), seqs()
        got = dt.recon_score(data, m, s, 700, K=1, seed=3, key="q")
        br = recon_loss(data, m, s, 700, [stream(3, "q", i, 0) for i in range(len(data))])
        np.testing.assert_allclose(got, br.l_recon, rtol=1e-6)
        assert np.all(got >= 0)

    def test_l_c_kind(self):
        m, s, data = tiny(), linear_beta_schedule(), seqs()
        full = dt.recon_score(data, m, s, 700, K=2, seed=0, key="a")
        lc = dt.recon_score(data, m, s, 700, K=2, seed=0, key="a", kind="l_c")
        assert np.all(lc <= full)
        with pytest.raises(ValueError):
            dt.recon_score(data, m, s, 700, K=1, kind="x")

    def test_mlm_single_token(self):
        one = TokenSequence(np.array([2, 9, 3, 0, 0, 0, 0, 0]), 3)
        assert np.isfinite(dt.mlm_score([one], tiny(), R=2)).all()

    def test_mlm_untrained_near_log_vocab(self):
        score = dt.mlm_score(seqs(30, vocab=60), tiny(vocab=60), R=3, seed=1)
        assert abs(score.mean() - math.log(60)) < 0.5

    def test_mlm_more_draws_is_stable(self):
        m, data = tiny(), seqs(10)
        a = dt.mlm_score(data, m, R=20, seed=5)
        b = dt.mlm_score(data, m, R=40, seed=5)
        # the first 20 patterns are shared, so the difference is within a few standard errors of the mean
        per = np.stack([dt.mlm_score(data, m, R=1, seed=5, key=str(r)) for r in range(20)])
        se = per.std(axis=0, ddof=1) / math.sqrt(20)
        assert np.all(np.abs(a - b) <= 3 * se + 1e-9)


class TestScoreReport:
    def test_duplicate_and_non_finite(self):
        rep = dt.ScoreReport()
        rep.add("d", "maha", [1.0])
        with pytest.raises(ValueError):
            rep.add("d", "maha", [2.0])
        with pytest.raises(ValueError):
            rep.add("d", "msp", [np.nan])

    def test_csv(self, tmp_path):
        rep = dt.ScoreReport()
        rep.add("q", "diffusion", [0.5, 1.25])
        rep.write_csv(tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().splitlines() == [
            "sample_id,domain,detector,score", "0,q,diffusion,0.5", "1,q,diffusion,1.25"]

    def test_metrics_csv_header(self, tmp_path):
        dt.write_metrics_csv([dict(id_domain="a", ood_domain="b", detector="msp", auroc=0.5, far95=1.0,
                                   n_id=2, n_ood=3)], tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines == ["id_domain,ood_domain,detector,auroc,far95,n_id,n_ood", "a,b,msp,0.5,1.0,2,3"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20, unique=True),
       st.lists(st.floats(-100, 100), min_size=1, max_size=20, unique=True))
def test_auroc_antisymmetric(a, b):
    if set(a) & set(b):
        return
    assert dt.auroc(a, b) + dt.auroc(b, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(SCORES, SCORES)
def test_metrics_invariant_to_increasing_transform(a, b):
    f = lambda x: np.exp(np.asarray(x) / 10.0) * 3 + 1
    assert dt.auroc(a, b) == dt.auroc(f(a), f(b))
    assert dt.far95(a, b) == dt.far95(f(a), f(b))


@settings(max_examples=60, deadline=None)
@given(SCORES, st.floats(-20, 20), st.floats(0, 10))
def test_accept_set_grows_with_threshold(f, gamma, delta):
    lo = dt.decide(np.array(f), gamma) == 0
    hi = dt.decide(np.array(f), gamma + delta) == 0
    assert np.all(hi[lo])


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5))
def test_combined_monotone_in_each_part(lam, r, d, bump):
    base = dt.combined_score([r], [d], lam)[0]
    assert dt.combined_score([r + bump], [d], lam)[0] >= base
    assert dt.combined_score([r], [d + bump], lam)[0] >= base
