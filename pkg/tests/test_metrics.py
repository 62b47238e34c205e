import math

import numpy as np
import pytest

from vidiff import diffusion as df, metrics, models, variational as vi
from vidiff.errors import EmptySamples
from vidiff.schedule import noise_level


def test_identical_oracles_zero_mse():
    model = models.IsingModel(models.random_coupling(4, 0.5, 1))
    orc = df.exact_oracle(model)
    mse, _ = metrics.score_mse(orc, orc, model, 0.5, 2000, seed=1)
    assert mse <= 1e-14


def test_constant_offset():
    model = models.IsingModel(models.random_coupling(3, 0.5, 2))
    exact = df.exact_oracle(model)
    c = np.array([0.3, -0.1, 0.2])
    shifted = df.ScoreOracle(lambda t, z: exact(t, z) + c, "exact", 3)
    mse, se = metrics.score_mse(shifted, exact, model, 0.5, 2000, seed=1)
    assert abs(mse - c @ c / 3) <= max(3 * se, 1e-12)


def test_symmetric_in_arguments():
    model = models.IsingModel(models.random_coupling(3, 0.5, 3))
    a, b = df.exact_oracle(model), df.vi_oracle(model)
    assert metrics.score_mse(a, b, model, 0.3, 500, 2)[0] == metrics.score_mse(b, a, model, 0.3, 500, 2)[0]


def test_unrolled_mse_within_decomposition():
    a = models.random_coupling(6, 0.3, 4)
    model = models.IsingModel(a)
    t = 0.5
    nl = noise_level(t)
    exact = df.exact_oracle(model)
    x, _ = metrics.draw_clean(model, 5000, 7)
    z = df.forward_noise(x, t, seed=8)
    m_hat = vi.fixed_point_solve(vi.ising_spec(a, None, t, z), vi.TANH)
    eps_vi = np.mean(np.sum((m_hat - models.exact_denoiser(model, t, z)) ** 2, 1)) / 6
    mse, _ = metrics.score_mse(df.unrolled_oracle(model, 12, 0.01), exact, model, t, 5000, 9)
    assert mse <= nl.lam ** 2 / nl.sigma2 ** 2 * (eps_vi + 1e-3) * 10


def test_kl_self_samples_small():
    model = models.IsingModel(np.array([[0, .4], [.4, 0]]))
    p = models.enumerate_distribution(model)
    x = models.sample(model, 1_000_000, 3)
    assert metrics.discrete_kl(p, x) <= 1e-4


def test_kl_tv_identical():
    p = models.DiscreteDistribution(models.spin_configurations(2), np.full(4, 0.25))
    x = np.repeat(models.spin_configurations(2), 10, axis=0).astype(float)
    assert metrics.tv(p, x) == 0
    assert metrics.discrete_kl(p, x) < 1e-12


def test_tv_disjoint():
    p = models.DiscreteDistribution(models.spin_configurations(1), np.array([1.0, 0.0]))
    assert metrics.tv(p, np.ones((100, 1))) == 1.0


def test_kl_decreases_with_n():
    model = models.IsingModel(models.random_coupling(3, 0.8, 1))
    p = models.enumerate_distribution(model)
    small = [metrics.discrete_kl(p, models.sample(model, 1000, s)) for s in range(20)]
    large = [metrics.discrete_kl(p, models.sample(model, 20000, 100 + s)) for s in range(20)]
    assert np.median(large) < np.median(small)
    assert min(small + large) >= 0


def test_empty_samples():
    p = models.DiscreteDistribution(models.spin_configurations(1), np.array([.5, .5]))
    with pytest.raises(EmptySamples):
        metrics.discrete_kl(p, np.empty((0, 1)))


def test_rounded_distribution_monte_carlo():
    model = models.IsingModel(models.random_coupling(3, 0.9, 5))
    t = 0.4
    p = metrics.rounded_noised_distribution(model, t)
    x = models.sample(model, 400_000, 6)
    z = df.forward_noise(x, t, seed=7)
    freq = np.bincount(models.config_index(df.round_spins(z).astype(int)), minlength=8) / len(z)
    se = np.sqrt(p.probs * (1 - p.probs) / len(z))
    assert np.all(np.abs(freq - p.probs) <= 5 * se)


def test_rounded_distribution_independent_spins():
    t = 0.3
    nl = noise_level(t)
    p = metrics.rounded_noised_distribution(models.IsingModel(np.zeros((2, 2))), t)
    np.testing.assert_allclose(p.probs, 0.25, atol=1e-15)
    # a single biased spin: P(+) = P(x=+) Phi(r) + P(x=-) (1 - Phi(r))
    from scipy.stats import norm
    model = models.IsingModel(np.array([[0, 2.0], [2.0, 0]]))
    q = metrics.rounded_noised_distribution(model, t)
    px = models.enumerate_distribution(model).probs
    keep = norm.cdf(nl.lam / nl.sigma)
    # state (+,+) has index 3, reached from (+,+), (+,-), (-,+), (-,-)
    flips = {3: keep * keep, 2: keep * (1 - keep), 1: (1 - keep) * keep, 0: (1 - keep) ** 2}
    assert abs(q.probs[3] - sum(px[i] * f for i, f in flips.items())) < 1e-15


def test_energy_distance_and_moments(rng):
    a = rng.normal(size=(1500, 2))
    b = rng.normal(size=(1500, 2))
    c = rng.normal(size=(1500, 2)) + 1
    assert abs(metrics.energy_distance(a, b)) < 0.02
    assert metrics.energy_distance(a, c) > 0.3
    mean, cov = metrics.moments(c)
    assert np.allclose(mean, 1, atol=0.1) and cov.shape == (2, 2)


def test_report_round_trip(tmp_path):
    r = metrics.EvalReport(score_mse_per_dim=0.1, kl=0.01, tv=0.2, metadata={"seed": 1}).check()
    r.write_json(tmp_path / "r.json")
    r.write_csv(tmp_path / "r.csv")
    assert "meta_seed" in (tmp_path / "r.csv").read_text()
    with pytest.raises(ValueError):
        metrics.EvalReport(tv=1.5).check()
