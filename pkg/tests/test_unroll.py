import math

import numpy as np
import pytest

from vidiff import models, unroll, variational as vi
from vidiff.errors import ContractionViolation, ShapeMismatch
from vidiff.schedule import noise_level


def straight_line_forward(w_in, w1, w2, w_out, x):
    """Independent per-sample evaluation with explicit loops over layers."""
    u = w_in @ np.append(x, 1.0)
    for a, b in zip(w1, w2):
        pre = b @ u
        u = u + a @ np.where(pre > 0, pre, 0.0)
    return w_out @ u


def random_net(rng, d=4, D=7, M=5, L=3, scale=0.5):
    return unroll.ResNetWeights(
        rng.normal(size=(D, d + 1)) * scale,
        tuple(rng.normal(size=(D, M)) * scale for _ in range(L)),
        tuple(rng.normal(size=(M, D)) * scale for _ in range(L)),
        rng.normal(size=(d, D)) * scale)


def test_forward_matches_straight_line(rng):
    w = random_net(rng)
    for _ in range(20):
        z = rng.normal(size=4)
        ref = straight_line_forward(w.w_in, w.w1, w.w2, w.w_out, z)
        np.testing.assert_allclose(unroll.resnet_forward(w, z), ref, atol=1e-14, rtol=0)


def test_zero_blocks_are_identity(rng):
    w = random_net(rng)
    z = rng.normal(size=4)
    zeroed = w.with_matrices([w.w_in, *[0 * a for a in w.w1], *[0 * b for b in w.w2], w.w_out])
    expect = w.w_out @ w.w_in @ np.append(z, 1.0)
    np.testing.assert_allclose(unroll.resnet_forward(zeroed, z), expect, atol=1e-14)
    no_blocks = unroll.ResNetWeights(w.w_in, (), (), w.w_out)
    np.testing.assert_allclose(unroll.resnet_forward(no_blocks, z), expect, atol=1e-14)


def test_forward_shape_errors(rng):
    w = random_net(rng)
    with pytest.raises(ShapeMismatch):
        unroll.resnet_forward(w, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        unroll.ResNetWeights(w.w_in, w.w1, w.w2, np.zeros((4, 3)))


def test_weight_json_round_trip(tmp_path, rng):
    w = unroll.unroll_ising(models.random_coupling(3, 0.5, 0), None, 0.7, 4,
                            vi.build_pwl(vi.TANH, 0.1))
    path = tmp_path / "w.json"
    unroll.save_weights(w, path)
    back = unroll.load_weights(path)
    for a, b in zip(w.matrices(), back.matrices()):
        assert np.array_equal(a, b)
    assert back.header["kind"] == "ising" and back.header["B"] == w.header["B"]
    z = rng.normal(size=(5, 3))
    assert np.array_equal(unroll.resnet_forward(w, z), unroll.resnet_forward(back, z))


# norms

def test_operator_norm_identity_and_diag():
    assert abs(unroll.operator_norm(np.eye(3)) - 1) < 1e-12
    assert abs(unroll.operator_norm(np.diag([3.0, 1.0])) - 3) < 1e-9


def test_operator_norm_matches_svd(rng):
    for _ in range(5):
        a = rng.normal(size=(20, 20))
        assert abs(unroll.operator_norm(a) - np.linalg.svd(a, compute_uv=False)[0]) <= 1e-8


def test_weight_norm_identity_blocks():
    e = np.eye(3)
    w = unroll.ResNetWeights(np.hstack([e, np.zeros((3, 1))]), (e,), (e,), e)
    assert abs(unroll.weight_norm(w) - 2) < 1e-12


# unrolled constructions

def pwl_trace_score(a, k, t, z, pwl, L):
    nl = noise_level(t)
    spec = vi.ising_spec(a, k, t, z)
    m = vi.fixed_point_solve(spec, pwl, steps=L)
    return (nl.lam * m - z) / nl.sigma2, spec


def test_ising_exactness(rng):
    a = models.random_coupling(3, 0.6, 1)
    pwl = vi.build_pwl(vi.TANH, 0.1)
    t, L = 0.5, 4
    w = unroll.unroll_ising(a, None, t, L, pwl)
    assert w.D == 9 and w.M == (math.ceil(2 / 0.1) + 3) * 3
    z = rng.normal(size=(200, 3)) * 2
    ref, _ = pwl_trace_score(a, None, t, z, pwl, L)
    assert np.max(np.abs(unroll.resnet_forward(w, z) - ref)) <= 1e-9
    assert unroll.weight_norm(w) <= unroll.bound_ising(3, t, 0.1)


def test_ising_hidden_states_follow_iterates(rng):
    a = models.random_coupling(3, 0.6, 2)
    pwl = vi.build_pwl(vi.TANH, 0.2)
    t, z = 0.8, rng.normal(size=3)
    w = unroll.unroll_ising(a, 0.05 * np.eye(3), t, 5, pwl)
    _, states = unroll.resnet_forward(w, z, return_states=True)
    trace = vi.fixed_point_trace(vi.ising_spec(a, 0.05 * np.eye(3), t, z), pwl, 5)
    nl = noise_level(t)
    for s, m in zip(states, trace):
        np.testing.assert_allclose(s, np.concatenate([m, z / nl.sigma2, np.ones(3)]), atol=1e-12)


def test_ising_zero_layers_zero_input():
    w = unroll.unroll_ising(np.zeros((2, 2)), None, 1.0, 0, vi.build_pwl(vi.TANH, 0.5))
    assert np.all(unroll.resnet_forward(w, np.zeros(2)) == 0)


def test_ising_contraction_violation():
    with pytest.raises(ContractionViolation):
        unroll.unroll_ising(1.2 * np.eye(2), None, 1.0, 2, vi.build_pwl(vi.TANH, 0.5))


def test_conditional_exactness(rng):
    a = models.random_coupling(6, 0.6, 3)
    a11, a12 = a[:4, :4], a[:4, 4:]
    pwl = vi.build_pwl(vi.TANH, 0.1)
    t, L = 0.4, 5
    w = unroll.unroll_conditional(a11, a12, None, t, L, pwl)
    assert w.D == 16
    z = rng.normal(size=(200, 4))
    theta = rng.choice([-1.0, 1.0], size=(200, 2))
    nl = noise_level(t)
    m = vi.fixed_point_solve(vi.conditional_spec(a11, a12, None, t, z, theta), pwl, steps=L)
    ref = (nl.lam * m - z) / nl.sigma2
    assert np.max(np.abs(unroll.resnet_forward(w, z, theta) - ref)) <= 1e-9
    bound = unroll.bound_conditional(4, t, 0.1, np.linalg.norm(a12, 2))
    assert unroll.weight_norm(w) <= bound


def test_conditional_without_coupling_ignores_theta(rng):
    a11 = models.random_coupling(3, 0.5, 4)
    w = unroll.unroll_conditional(a11, np.zeros((3, 2)), None, 0.5, 3, vi.build_pwl(vi.TANH, 0.2))
    z = rng.normal(size=3)
    assert np.array_equal(unroll.resnet_forward(w, z, [1, 1]), unroll.resnet_forward(w, z, [-1, 1]))
    with pytest.raises(ShapeMismatch):
        unroll.resnet_forward(w, z)


def test_marginal_exactness(rng):
    a = models.random_coupling(5, 0.6, 5)
    block = models.BlockIsingModel(a[:3, :3], a[:3, 3:], a[3:, 3:])
    pwl = vi.build_pwl(vi.TANH, 0.1)
    t, L = 0.6, 4
    w = unroll.unroll_marginal(block, None, t, L, pwl)
    assert w.D == 15
    z = rng.normal(size=(200, 3))
    nl = noise_level(t)
    omega = vi.fixed_point_solve(vi.marginal_spec(block, None, t, z), pwl, steps=L)
    ref = (nl.lam * omega[:, :3] - z) / nl.sigma2
    assert np.max(np.abs(unroll.resnet_forward(w, z) - ref)) <= 1e-9
    assert unroll.weight_norm(w) <= unroll.bound_marginal(3, 2, t, 0.1)


def test_marginal_without_latents_acts_like_plain(rng):
    a = models.random_coupling(3, 0.5, 6)
    block = models.BlockIsingModel(a, np.zeros((3, 0)), np.zeros((0, 0)))
    pwl = vi.build_pwl(vi.TANH, 0.1)
    z = rng.normal(size=(20, 3))
    w_m = unroll.unroll_marginal(block, None, 0.5, 3, pwl)
    w_i = unroll.unroll_ising(a, None, 0.5, 3, pwl)
    np.testing.assert_allclose(unroll.resnet_forward(w_m, z), unroll.resnet_forward(w_i, z), atol=1e-15)


def sparse_model(seed, d=4, m=3):
    a = np.random.default_rng(seed).normal(size=(d, m)) * 0.3
    return models.SparseCodingModel(a, np.array([-1.0, 1.0]), np.array([.5, .5]), 0.5)


def test_sparse_exactness(rng):
    model = sparse_model(7)
    t, L, nu = 0.5, 6, 0.3
    pwl = vi.build_pwl(vi.posterior_scalar(model.atoms, model.probs, nu), 0.1)
    k_t = 0.05
    w = unroll.unroll_sparse(model, k_t, nu, t, L, pwl)
    assert w.D == 3 * 3 + 4
    nl = noise_level(t)
    var_z = 0.25 * nl.lam ** 2 + nl.sigma2
    z = rng.normal(size=(200, 4))
    e = vi.fixed_point_solve(vi.sparse_spec(model, k_t, t, z), pwl, steps=L)
    ref = -z / var_z + nl.lam / var_z * e @ model.dictionary.T
    assert np.max(np.abs(unroll.resnet_forward(w, z) - ref)) <= 1e-9
    u, _ = unroll.sparse_interaction(model, k_t, t)
    assert unroll.weight_norm(w) <= unroll.bound_sparse(model, t, pwl, np.linalg.norm(u, 2))


def test_sparse_contraction_violation():
    a = np.eye(2) * 3
    model = models.SparseCodingModel(a, np.array([-1.0, 1.0]), np.array([.5, .5]), 0.1)
    pwl = vi.build_pwl(vi.posterior_scalar(model.atoms, model.probs), 0.2)
    with pytest.raises(ContractionViolation):
        unroll.unroll_sparse(model, 0.0, 0.0, 0.05, 3, pwl)


# truncation

def test_truncation_leaves_exact_score(rng):
    model = models.IsingModel(models.random_coupling(5, 0.7, 8))
    for t in (0.05, 0.5, 2.0):
        spec = unroll.TruncationSpec.ising(5, t)
        z = rng.normal(size=(50, 5)) * 3
        s = models.exact_score(model, t, z)
        np.testing.assert_allclose(unroll.truncate(spec, s, z), s, atol=1e-12)


def test_truncation_scales_to_radius(rng):
    spec = unroll.TruncationSpec.ising(3, 0.5)
    z = rng.normal(size=3)
    v = rng.normal(size=3)
    v *= 2 * spec.radius / np.linalg.norm(v)
    out = unroll.truncate(spec, v - spec.shift * z, z)
    assert abs(np.linalg.norm(out + spec.shift * z) - spec.radius) < 1e-12


def test_truncation_is_nonexpansive(rng):
    spec = unroll.TruncationSpec.sparse(sparse_model(1), 0.3)
    for _ in range(200):
        z, f, g = rng.normal(size=(3, 4)) * 5
        lhs = np.linalg.norm(unroll.truncate(spec, f, z) - unroll.truncate(spec, g, z))
        assert lhs <= np.linalg.norm(f - g) + 1e-12
