import json

import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import norm

from ddr import metrics
from ddr.losses import pinball
from ddr.sampler import DECILES


def test_mae_mse_examples():
    assert metrics.mae([1, -1], [0, 0]) == 1.0 and metrics.mse([1, -1], [0, 0]) == 1.0
    assert metrics.mae([0, 0], [0, 0]) == 0.0 and metrics.mse([0, 0], [0, 0]) == 0.0
    assert metrics.mae([3], [0]) == 3.0 and metrics.mse([3], [0]) == 9.0
    with pytest.raises(ValueError):
        metrics.mae([], [])
    with pytest.raises(ValueError):
        metrics.mse([1, 2], [1])


def test_mae_is_twice_median_pinball():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, y = rng.normal(size=50) * 10, rng.normal(size=50) * 10
        assert abs(metrics.mae(p, y) - 2 * np.mean(pinball(0.5, y, p))) <= 1e-12 * max(1, metrics.mae(p, y))


def test_qs_zero_for_exact_constant(rigged):
    m = rigged(q=lambda t, x: np.zeros(x.shape[0]))
    qs, per = metrics.qs_score(m, np.zeros((5, 1)), np.zeros(5))
    assert qs == 0.0 and per == [0.0] * 9


def test_qs_is_sum_of_deciles(make_model):
    m = make_model(seed=1)
    rng = np.random.default_rng(2)
    qs, per = metrics.qs_score(m, rng.normal(size=(30, 2)), rng.normal(size=30))
    assert len(per) == 9 and abs(qs - sum(per)) <= 1e-12


def _oracle_model(rigged, sigma=0.3):
    return rigged(q=lambda t, x: 2 * x[:, 0] + 1 + sigma * ndtri(t))


def _oracle_sample(n, seed=0, sigma=0.3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    return x.reshape(-1, 1), 2 * x + 1 + sigma * rng.standard_normal(n)


def test_oracle_qs_matches_closed_form(rigged):
    # the expected pinball of the true tau-quantile under N(mu, s^2) noise is s * phi(z_tau)
    sigma = 0.3
    x, y = _oracle_sample(400_000)
    qs, per = metrics.qs_score(_oracle_model(rigged, sigma), x, y)
    expected = [sigma * norm.pdf(ndtri(t)) for t in DECILES]
    assert np.allclose(per, expected, rtol=0.01)
    assert qs == pytest.approx(sum(expected), rel=0.005)


def test_other_predictor_not_better_than_oracle(rigged):
    x, y = _oracle_sample(20_000, 1)
    oracle = metrics.qs_score(_oracle_model(rigged), x, y)[0]
    shifted = metrics.qs_score(rigged(q=lambda t, x: 2 * x[:, 0] + 1.05 + 0.3 * ndtri(t)), x, y)[0]
    flat = metrics.qs_score(rigged(q=lambda t, x: 1 + 0.5 * ndtri(t) + 0 * x[:, 0]), x, y)[0]
    assert oracle < shifted and oracle < flat


def test_coverage(rigged):
    x, y = _oracle_sample(100_000, 2)
    cov = metrics.coverage(_oracle_model(rigged), x, y, (0.5, 0.9))
    assert abs(cov[0.5] - 0.5) < 0.01 and abs(cov[0.9] - 0.9) < 0.01
    big = metrics.coverage(rigged(q=lambda t, x: np.full(x.shape[0], 1e300)), x, y, (0.1,))
    assert big == {0.1: 1.0}


def test_crossing_rate(rigged, make_model):
    x = np.zeros((3, 1))
    assert metrics.crossing_rate(rigged(), x) == 0.0
    assert metrics.crossing_rate(rigged(q=lambda t, x: -t + 0 * x[:, 0]), x) == 1.0
    r = metrics.crossing_rate(make_model(seed=3, scale=3.0), np.random.default_rng(0).normal(size=(20, 2)))
    assert 0.0 <= r <= 1.0
    with pytest.raises(ValueError):
        metrics.crossing_rate(rigged(), x, [0.5])
    with pytest.raises(ValueError):
        metrics.crossing_rate(rigged(), x, [0.6, 0.5])
    assert len(metrics.CROSSING_GRID) == 101


def test_crossing_invariant_to_shift():
    c = np.random.default_rng(4).normal(size=(10, 101))
    assert metrics.crossing_fraction(c) == metrics.crossing_fraction(c + 7.25)


def test_evaluate_report(make_model):
    m = make_model(seed=5)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(40, 2)), rng.normal(size=40)
    r = metrics.evaluate(m, x, y)
    assert abs(r.q_s - sum(r.per_decile)) <= 1e-12
    assert all(0 <= v <= 1 for v in r.coverage.values())
    assert r.recover_Q is not None and r.oracle_gap is None and r.n == 40
    doc = json.loads(r.to_json())
    assert abs(doc["q_s"] - sum(doc["per_decile"])) <= 1e-12
    header, row = r.csv_row().splitlines()
    assert header.startswith("q_s,mae,mse") and "coverage_q90" in header
    with pytest.raises(ValueError):
        metrics.evaluate(m, x, y, oracle=lambda t, xs: xs)


def test_evaluate_oracle_gap_zero_for_oracle(rigged):
    x, y = _oracle_sample(100, 7)
    r = metrics.evaluate(_oracle_model(rigged), x, y, oracle=lambda t, xs: 2 * xs[:, 0] + 1 + 0.3 * ndtri(t), x_raw=x)
    assert all(v < 1e-12 for v in r.oracle_gap.values())
    assert "oracle_gap_q50" in r.csv_row()


def test_summarize_mean_and_sample_std(make_model):
    m = make_model(seed=8)
    rng = np.random.default_rng(9)
    reps = [metrics.evaluate(m, rng.normal(size=(20, 2)), rng.normal(size=20)) for _ in range(3)]
    s = metrics.summarize(reps)
    vals = [r.q_s for r in reps]
    assert s["q_s"]["mean"] == pytest.approx(np.mean(vals))
    assert s["q_s"]["std"] == pytest.approx(np.std(vals, ddof=1)) and s["q_s"]["n"] == 3
