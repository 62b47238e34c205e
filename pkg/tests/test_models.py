import json
import math

import numpy as np
import pytest

from conftest import central_grad, random_ising
from vidiff import models
from vidiff.errors import DimensionTooLarge, ShapeMismatch, SupportTooLarge, ParameterRange
from vidiff.schedule import noise_level


def brute_force_mean(coupling, t, z):
    """Weighted sum over every configuration, written out independently."""
    nl = noise_level(t)
    d = coupling.shape[0]
    num, den = np.zeros(d), 0.0
    for bits in range(2 ** d):
        x = np.array([1.0 if (bits >> k) & 1 else -1.0 for k in range(d)])
        w = math.exp(0.5 * x @ coupling @ x - np.sum((z - nl.lam * x) ** 2) / (2 * nl.sigma2))
        num += w * x
        den += w
    return num / den


def test_zero_coupling_is_uniform():
    dist = models.enumerate_distribution(models.IsingModel(np.zeros((2, 2))))
    np.testing.assert_allclose(dist.probs, 0.25, atol=1e-15)


def test_two_spin_hand_enumeration():
    dist = models.enumerate_distribution(models.IsingModel(np.array([[0, 1.0], [1.0, 0]])))
    z = 2 * math.e + 2 / math.e
    for x, p in zip(dist.support, dist.probs):
        expect = math.e / z if x[0] == x[1] else math.exp(-1) / z
        assert abs(p - expect) < 1e-15


def test_normalization_d8():
    dist = models.enumerate_distribution(random_ising(8, 0.7, 3))
    assert abs(dist.probs.sum() - 1) < 1e-12
    assert len({tuple(r) for r in dist.support}) == 256


def test_config_index_inverts_enumeration():
    configs = models.spin_configurations(5)
    np.testing.assert_array_equal(models.config_index(configs), np.arange(32))


def test_enumeration_cap():
    with pytest.raises(DimensionTooLarge):
        models.spin_configurations(23)
    with pytest.raises(DimensionTooLarge):
        models.exact_denoiser(models.IsingModel(np.zeros((23, 23))), 1.0, np.zeros(23))


def test_asymmetric_rejected():
    with pytest.raises(ParameterRange):
        models.IsingModel(np.array([[0, 1.0], [0.5, 0]]))


def test_sample_mean_and_determinism():
    m = models.IsingModel(np.zeros((1, 1)))
    x = models.sample(m, 100_000, seed=7)
    assert abs(x.mean()) <= 0.02
    np.testing.assert_array_equal(x, models.sample(m, 100_000, seed=7))
    assert models.sample(m, 0, seed=7).shape == (0, 1)


def test_sample_frequencies_match_table():
    model = random_ising(3, 0.8, 11)
    dist = models.enumerate_distribution(model)
    x = models.sample(model, 200_000, seed=1)
    freq = np.bincount(models.config_index(x), minlength=8) / len(x)
    se = np.sqrt(dist.probs * (1 - dist.probs) / len(x))
    assert np.all(np.abs(freq - dist.probs) <= 5 * se)


def test_product_measure_denoiser_is_tanh(rng):
    t = 0.7
    nl = noise_level(t)
    z = rng.normal(size=(5, 4))
    m = models.exact_denoiser(models.IsingModel(np.zeros((4, 4))), t, z)
    np.testing.assert_allclose(m, np.tanh(nl.lam * z / nl.sigma2), atol=1e-14)
    assert np.all(models.exact_denoiser(models.IsingModel(np.zeros((4, 4))), t, np.zeros(4)) == 0)


def test_denoiser_matches_brute_force(rng):
    model = random_ising(3, 0.9, 5)
    for _ in range(10):
        z, t = rng.normal(size=3) * 2, rng.uniform(0.1, 2)
        np.testing.assert_allclose(models.exact_denoiser(model, t, z),
                                   brute_force_mean(model.coupling, t, z), atol=1e-12)


def test_tweedie_identity(rng):
    model = random_ising(5, 0.6, 2)
    for _ in range(20):
        t, z = rng.uniform(0.05, 3), rng.normal(size=5)
        nl = noise_level(t)
        s = models.exact_score(model, t, z)
        m = models.exact_denoiser(model, t, z)
        np.testing.assert_allclose(s * nl.sigma2 + z, nl.lam * m, atol=1e-14)
        assert np.all(np.abs(m) <= 1)


def test_symmetric_zero_score():
    t = math.log(2)  # lambda / sigma^2 = 2/3, value only needs z = 0
    assert models.exact_score(models.IsingModel(np.zeros((1, 1))), t, np.zeros(1))[0] == 0


@pytest.mark.parametrize("seed", range(5))
def test_score_is_gradient_of_log_density(seed):
    model = random_ising(4, 0.8, seed)
    rng = np.random.default_rng(seed)
    t, z = rng.uniform(0.2, 2), rng.normal(size=4)
    fd = central_grad(lambda v: models.log_density(model, t, v), z)
    np.testing.assert_allclose(models.exact_score(model, t, z), fd, rtol=1e-6, atol=1e-8)


def test_large_time_denoiser_is_prior_mean():
    a = models.random_coupling(5, 0.7, 4)
    model = models.IsingModel(a)
    mean = models.enumerate_distribution(model).mean()
    np.testing.assert_allclose(models.exact_denoiser(model, 20.0, np.ones(5)), mean, atol=1e-6)


def _block(d, m, seed):
    a = models.random_coupling(d + m, 0.8, seed)
    return models.BlockIsingModel(a[:d, :d], a[:d, d:], a[d:, d:])


def test_conditional_ignores_theta_without_coupling(rng):
    b = models.BlockIsingModel(models.random_coupling(3, 0.5, 1), np.zeros((3, 2)), np.zeros((2, 2)))
    z = rng.normal(size=3)
    np.testing.assert_array_equal(
        models.exact_conditional_denoiser(b, [1, 1], 0.5, z),
        models.exact_conditional_denoiser(b, [-1, 1], 0.5, z))


def test_conditional_brute_force(rng):
    b = _block(3, 2, 9)
    theta = np.array([1.0, -1.0])
    t, z = 0.4, rng.normal(size=3)
    nl = noise_level(t)
    num, den = np.zeros(3), 0.0
    for bits in range(8):
        x = np.array([1.0 if (bits >> k) & 1 else -1.0 for k in range(3)])
        joint = np.concatenate([x, theta])
        w = math.exp(0.5 * joint @ b.joint_coupling() @ joint
                     - np.sum((z - nl.lam * x) ** 2) / (2 * nl.sigma2))
        num, den = num + w * x, den + w
    np.testing.assert_allclose(models.exact_conditional_denoiser(b, theta, t, z), num / den, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        models.exact_conditional_denoiser(b, [1.0], t, z)


def test_marginal_brute_force(rng):
    b = _block(3, 2, 10)
    t, z = 0.8, rng.normal(size=3)
    nl = noise_level(t)
    num, den = np.zeros(3), 0.0
    for bits in range(32):
        w_ = np.array([1.0 if (bits >> k) & 1 else -1.0 for k in range(5)])
        w = math.exp(0.5 * w_ @ b.joint_coupling() @ w_
                     - np.sum((z - nl.lam * w_[:3]) ** 2) / (2 * nl.sigma2))
        num, den = num + w * w_[:3], den + w
    np.testing.assert_allclose(models.exact_marginal_denoiser(b, t, z), num / den, atol=1e-12)


def test_marginal_without_latents_is_plain(rng):
    a = models.random_coupling(4, 0.6, 3)
    b = models.BlockIsingModel(a, np.zeros((4, 0)), np.zeros((0, 0)))
    z = rng.normal(size=(3, 4))
    np.testing.assert_allclose(models.exact_marginal_denoiser(b, 0.3, z),
                               models.exact_denoiser(models.IsingModel(a), 0.3, z), atol=1e-15)


def _sparse(d, m, seed, atoms=(-1.0, 1.0), probs=(0.5, 0.5), tau=0.3):
    a = np.random.default_rng(seed).normal(size=(d, m)) / np.sqrt(d)
    return models.SparseCodingModel(a, np.array(atoms), np.array(probs), tau)


def test_sparse_zero_dictionary_gaussian_score(rng):
    model = models.SparseCodingModel(np.zeros((4, 3)), np.array([-1.0, 1.0]), np.array([.5, .5]), 0.4)
    t, z = 0.6, rng.normal(size=4)
    nl = noise_level(t)
    expect = -z / (0.16 * nl.lam ** 2 + nl.sigma2)
    assert np.array_equal(models.sparse_exact_score(model, t, z), expect)


def test_sparse_dirac_prior(rng):
    model = _sparse(4, 3, 1, atoms=(0.0,), probs=(1.0,))
    z = rng.normal(size=4)
    assert np.all(models.sparse_exact_posterior_mean(model, 0.5, z) == 0)
    nl = noise_level(0.5)
    np.testing.assert_allclose(models.sparse_exact_score(model, 0.5, z),
                               -z / (0.09 * nl.lam ** 2 + nl.sigma2), atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_sparse_score_matches_mixture_density(seed):
    model = _sparse(4, 3, seed)
    rng = np.random.default_rng(100 + seed)
    t, z = rng.uniform(0.2, 1.5), rng.normal(size=4)
    fd = central_grad(lambda v: models.sparse_log_density(model, t, v), z)
    np.testing.assert_allclose(models.sparse_exact_score(model, t, z), fd, rtol=1e-6, atol=1e-8)


def test_sparse_posterior_within_bound(rng):
    model = _sparse(3, 4, 2, atoms=(-2.0, 0.0, 1.5), probs=(.2, .5, .3))
    e = models.sparse_exact_posterior_mean(model, 0.3, rng.normal(size=(10, 3)) * 5)
    assert np.all(np.abs(e) <= model.support_bound)


def test_sparse_support_cap():
    model = _sparse(2, 23, 0)
    with pytest.raises(SupportTooLarge):
        models.sparse_exact_posterior_mean(model, 1.0, np.zeros(2))


def test_sparse_sample_moments():
    model = _sparse(3, 2, 4)
    x = models.sparse_sample(model, 100_000, seed=3)
    cov = model.dictionary @ model.dictionary.T + 0.09 * np.eye(3)
    np.testing.assert_allclose(np.cov(x.T), cov, atol=0.02)
    np.testing.assert_array_equal(x, models.sparse_sample(model, 100_000, seed=3))


def test_sparse_rejects_bad_tau():
    with pytest.raises(ParameterRange):
        _sparse(2, 2, 0, tau=0.0)


@pytest.mark.parametrize("build", [
    lambda: random_ising(4, 0.5, 1),
    lambda: _block(3, 2, 2),
    lambda: _sparse(3, 2, 3, atoms=(-1.0, 0.0, 1.0), probs=(.25, .5, .25)),
])
def test_json_round_trip(build, tmp_path):
    model = build()
    path = tmp_path / "m.json"
    models.save_model(model, path)
    back = models.load_model(path)
    assert json.dumps(models.model_to_dict(back)) == json.dumps(models.model_to_dict(model))


def test_sk_coupling_is_goe():
    j = models.sk_coupling(400, 1.0, 0)
    off = j[np.triu_indices(400, 1)]
    assert np.allclose(j, j.T) and np.all(np.diag(j) == 0)
    assert abs(off.var() * 400 - 1) < 0.05
