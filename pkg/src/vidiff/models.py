"""Ground-truth generative models and brute-force oracles.

Ising-type models live on the hypercube and are handled by exhaustive
enumeration, capped at ``MAX_SPINS`` binary variables. The sparse coding model
has a finite discrete prior, so its posterior means are exact sums over the
product support.

Configurations are enumerated in a fixed order: row ``i`` of
``spin_configurations(d)`` has spin ``j`` equal to ``+1`` iff bit ``d-1-j`` of
``i`` is set. ``config_index`` inverts this map.

A note on the diagonal of the coupling matrix: since ``x_i**2 == 1``, the
diagonal only adds ``trace(A)/2`` to every energy, so it changes nothing about
the measure. Any symmetric matrix is accepted as is.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.special import logsumexp

from vidiff import rng as _rng
from vidiff.errors import (
    DimensionTooLarge,
    ParameterRange,
    ShapeMismatch,
    SupportTooLarge,
)
from vidiff.schedule import noise_level

MAX_SPINS = 22
MAX_SUPPORT = 2 ** 22
# rows x states per chunk when tilting a batch of observations
_CHUNK_CELLS = 2 ** 22


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_symmetric(a, name):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise ParameterRange(f"{name} must be symmetric")


def spin_configurations(d):
    """All ``2**d`` spin vectors as an int8 array of shape ``(2**d, d)``."""
    if d > MAX_SPINS:
        raise DimensionTooLarge(f"enumeration needs d <= {MAX_SPINS}, got {d}")
    idx = np.arange(2 ** d, dtype=np.int64)
    shifts = np.arange(d - 1, -1, -1, dtype=np.int64)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def config_index(x):
    """Row index in ``spin_configurations`` of each spin vector in ``x``."""
    x = np.atleast_2d(np.asarray(x))
    d = x.shape[1]
    bits = (x > 0).astype(np.int64)
    weights = 1 << np.arange(d - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def _quadratic_energy(configs, a):
    """``<x, A x>/2`` for every row of ``configs``, chunked to bound memory."""
    out = np.empty(configs.shape[0])
    step = 2 ** 16
    for s in range(0, configs.shape[0], step):
        x = configs[s:s + step].astype(np.float64)
        out[s:s + step] = 0.5 * np.einsum("ij,jk,ik->i", x, a, x)
    return out


@dataclass(frozen=True)
class DiscreteDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(probs < 0):
            raise ParameterRange("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ParameterRange(f"probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def dim(self):
        return self.support.shape[1]

    def mean(self):
        return self.probs @ self.support


@dataclass(frozen=True)
class IsingModel:
    """``mu(x) = exp(<x, A x>/2) / Z`` on ``{-1, +1}^d``."""

    coupling: np.ndarray

    def __post_init__(self):
        a = _frozen(self.coupling)
        _check_symmetric(a, "coupling")
        object.__setattr__(self, "coupling", a)

    @property
    def dim(self):
        return self.coupling.shape[0]

    def log_weights(self):
        """Unnormalized log-probabilities in enumeration order."""
        configs = spin_configurations(self.dim)
        return configs, _quadratic_energy(configs, self.coupling)


@dataclass(frozen=True)
class BlockIsingModel:
    """Joint Ising model over ``(x, theta)`` with blocks ``A11, A12, A22``."""

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray

    def __post_init__(self):
        a11, a12, a22 = _frozen(self.a11), _frozen(self.a12), _frozen(self.a22)
        d, m = a11.shape[0], a22.shape[0] if a22.ndim == 2 else 0
        a12 = a12.reshape(d, m)
        a22 = a22.reshape(m, m)
        _check_symmetric(a11, "A11")
        if m:
            _check_symmetric(a22, "A22")
        a12.setflags(write=False)
        a22.setflags(write=False)
        object.__setattr__(self, "a11", a11)
        object.__setattr__(self, "a12", a12)
        object.__setattr__(self, "a22", a22)

    @property
    def d(self):
        return self.a11.shape[0]

    @property
    def m(self):
        return self.a22.shape[0]

    @property
    def dim(self):
        return self.d

    def joint_coupling(self):
        return np.block([[self.a11, self.a12], [self.a12.T, self.a22]])

    def joint(self):
        return IsingModel(self.joint_coupling())


@dataclass(frozen=True)
class SparseCodingModel:
    """``x = A theta + eps`` with ``theta_i`` iid from a finite prior.

    ``prior`` holds ``(atom, probability)`` pairs; ``noise_sd`` is tau.
    ``support_bound`` (Pi) defaults to the largest atom magnitude.
    """

    dictionary: np.ndarray
    atoms: np.ndarray
    probs: np.ndarray
    noise_sd: float
    support_bound: float | None = None

    def __post_init__(self):
        a = _frozen(self.dictionary)
        if a.ndim != 2:
            raise ShapeMismatch("dictionary must be a d x m matrix")
        atoms = _frozen(np.ravel(self.atoms))
        probs = _frozen(np.ravel(self.probs))
        if atoms.shape != probs.shape or atoms.size == 0:
            raise ParameterRange("prior needs matching, nonempty atoms and probabilities")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ParameterRange("prior probabilities must be nonnegative and sum to 1")
        if not self.noise_sd > 0:
            raise ParameterRange(f"noise_sd must be positive, got {self.noise_sd}")
        bound = self.support_bound
        if bound is None:
            bound = float(np.max(np.abs(atoms)))
        if np.any(np.abs(atoms) > bound + 1e-15):
            raise ParameterRange("prior atoms must lie in [-Pi, Pi]")
        object.__setattr__(self, "dictionary", a)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "noise_sd", float(self.noise_sd))
        object.__setattr__(self, "support_bound", float(bound))

    @property
    def d(self):
        return self.dictionary.shape[0]

    @property
    def m(self):
        return self.dictionary.shape[1]

    @property
    def dim(self):
        return self.d


# --------------------------------------------------------------------------
# Ising enumeration oracles


def enumerate_distribution(model: IsingModel) -> DiscreteDistribution:
    """Exact probability table over all ``2**d`` configurations."""
    configs, energy = model.log_weights()
    log_z = logsumexp(energy)
    probs = np.exp(energy - log_z)
    probs /= probs.sum()
    return DiscreteDistribution(configs, probs)


def log_partition(model: IsingModel) -> float:
    return float(logsumexp(model.log_weights()[1]))


def _inverse_cdf(probs, n, gen):
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, gen.random(n), side="right")


def sample(model, n, seed):
    """``n`` iid spin vectors drawn by inverse CDF over the enumerated table.

    For a :class:`BlockIsingModel` the rows are joint ``(x, theta)`` vectors of
    length ``d + m``.
    """
    if isinstance(model, BlockIsingModel):
        model = model.joint()
    dist = enumerate_distribution(model)
    if n == 0:
        return np.empty((0, model.dim))
    idx = _inverse_cdf(dist.probs, n, _rng.stream(seed, 0))
    return dist.support[idx].astype(np.float64)


def _as_batch(z, d):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != d:
        raise ShapeMismatch(f"expected vectors of length {d}, got {z.shape[1]}")
    return z, single


def _tilted_mean(configs, base, tilt_vectors, gain):
    """Posterior means ``sum_x x w(x)`` with ``log w = base + gain <x, v>``.

    ``tilt_vectors`` has one row per observation; the tilt acts on the first
    ``tilt_vectors.shape[1]`` coordinates of each configuration.
    """
    n = tilt_vectors.shape[0]
    k = tilt_vectors.shape[1]
    xs = configs.astype(np.float64)
    out = np.empty((n, configs.shape[1]))
    rows = max(1, _CHUNK_CELLS // configs.shape[0])
    for s in range(0, n, rows):
        logits = base[None, :] + gain * (tilt_vectors[s:s + rows] @ xs[:, :k].T)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[s:s + rows] = w @ xs
    return out


def exact_denoiser(model: IsingModel, t, z):
    """Posterior mean ``E[x | lambda_t x + sigma_t g = z]`` by enumeration.

    ``z`` may be a single vector or a batch of row vectors.
    """
    nl = noise_level(t)
    z, single = _as_batch(z, model.dim)
    configs, energy = model.log_weights()
    m = _tilted_mean(configs, energy, z, nl.lam / nl.sigma2)
    return m[0] if single else m


def exact_score(model, t, z):
    """Score ``(lambda_t m_t(z) - z) / sigma_t^2`` from the exact denoiser."""
    nl = noise_level(t)
    m = exact_denoiser(model, t, z)
    return (nl.lam * m - np.asarray(z, dtype=np.float64)) / nl.sigma2


def log_density(model: IsingModel, t, z):
    """Log density of ``z = lambda_t x + sigma_t g`` (Gaussian mixture)."""
    nl = noise_level(t)
    z, single = _as_batch(z, model.dim)
    configs, energy = model.log_weights()
    log_p = energy - logsumexp(energy)
    xs = configs.astype(np.float64)
    d = model.dim
    out = np.empty(z.shape[0])
    for i, zi in enumerate(z):
        sq = np.sum((zi[None, :] - nl.lam * xs) ** 2, axis=1)
        out[i] = logsumexp(log_p - sq / (2 * nl.sigma2))
    out -= 0.5 * d * np.log(2 * np.pi * nl.sigma2)
    return out[0] if single else out


def _check_theta(model: BlockIsingModel, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[None, :]
    if theta.shape[-1] != model.m:
        raise ShapeMismatch(f"theta must have length {model.m}, got {theta.shape[-1]}")
    return theta


def exact_conditional_denoiser(model: BlockIsingModel, theta, t, z):
    """``E[x | theta, z]`` enumerating ``x`` with ``theta`` held fixed.

    ``theta`` is one vector shared by all rows of ``z``, or one row per row.
    """
    nl = noise_level(t)
    if model.d > MAX_SPINS or model.d + model.m > MAX_SPINS:
        raise DimensionTooLarge(f"d + m must be <= {MAX_SPINS}")
    z, single = _as_batch(z, model.d)
    theta = _check_theta(model, theta)
    if theta.shape[0] not in (1, z.shape[0]):
        raise ShapeMismatch("theta batch and z batch differ in length")
    configs = spin_configurations(model.d)
    base = _quadratic_energy(configs, model.a11)
    h = (nl.lam / nl.sigma2) * z + theta @ model.a12.T
    m = _tilted_mean(configs, base, h, 1.0)
    return m[0] if single else m


def exact_conditional_score(model: BlockIsingModel, theta, t, z):
    nl = noise_level(t)
    m = exact_conditional_denoiser(model, theta, t, z)
    return (nl.lam * m - np.asarray(z, dtype=np.float64)) / nl.sigma2


def exact_marginal_denoiser(model: BlockIsingModel, t, z):
    """First ``d`` coordinates of the joint posterior mean given ``z``."""
    nl = noise_level(t)
    joint = model.joint()
    if joint.dim > MAX_SPINS:
        raise DimensionTooLarge(f"d + m must be <= {MAX_SPINS}")
    z, single = _as_batch(z, model.d)
    configs, energy = joint.log_weights()
    m = _tilted_mean(configs, energy, z, nl.lam / nl.sigma2)[:, :model.d]
    return m[0] if single else m


def exact_marginal_score(model: BlockIsingModel, t, z):
    nl = noise_level(t)
    m = exact_marginal_denoiser(model, t, z)
    return (nl.lam * m - np.asarray(z, dtype=np.float64)) / nl.sigma2


# --------------------------------------------------------------------------
# Sparse coding oracles


def _sparse_support(model: SparseCodingModel):
    keep = model.probs > 0
    atoms, logp = model.atoms[keep], np.log(model.probs[keep])
    k = atoms.size
    if k ** model.m > MAX_SUPPORT:
        raise SupportTooLarge(
            f"prior support {k}**{model.m} exceeds {MAX_SUPPORT} states")
    grid = np.array(list(product(range(k), repeat=model.m)), dtype=np.int64)
    grid = grid.reshape(-1, model.m)
    return atoms[grid], logp[grid].sum(axis=1)


def sparse_sample(model: SparseCodingModel, n, seed):
    """``n`` iid draws of ``x = A theta + eps``."""
    gen = _rng.stream(seed, 0)
    if n == 0:
        return np.empty((0, model.d))
    idx = _inverse_cdf(model.probs, n * model.m, gen).reshape(n, model.m)
    theta = model.atoms[idx]
    eps = model.noise_sd * gen.standard_normal((n, model.d))
    return theta @ model.dictionary.T + eps


def _sparse_noise(model, t):
    nl = noise_level(t)
    tau_bar2 = model.noise_sd ** 2 + nl.sigma2 / nl.lam ** 2
    var_z = model.noise_sd ** 2 * nl.lam ** 2 + nl.sigma2
    return nl, tau_bar2, var_z


def sparse_exact_posterior_mean(model: SparseCodingModel, t, z_star):
    """``E[theta | z*]`` for ``z* = A theta + eps_bar``, ``eps_bar ~ N(0, tau_bar^2 I)``."""
    _, tau_bar2, _ = _sparse_noise(model, t)
    z_star, single = _as_batch(z_star, model.d)
    thetas, logp = _sparse_support(model)
    means = thetas @ model.dictionary.T  # (S, d)
    out = np.empty((z_star.shape[0], model.m))
    rows = max(1, _CHUNK_CELLS // thetas.shape[0])
    sq_means = np.sum(means ** 2, axis=1)
    for s in range(0, z_star.shape[0], rows):
        zz = z_star[s:s + rows]
        # -|z - A theta|^2 / (2 tau_bar^2) up to terms constant in theta
        logits = logp[None, :] + (zz @ means.T - 0.5 * sq_means[None, :]) / tau_bar2
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[s:s + rows] = w @ thetas
    return out[0] if single else out


def sparse_exact_score(model: SparseCodingModel, t, z):
    """Score of the noised sparse-coding marginal via the posterior mean of theta."""
    nl, _, var_z = _sparse_noise(model, t)
    z = np.asarray(z, dtype=np.float64)
    e = sparse_exact_posterior_mean(model, t, z / nl.lam)
    return -z / var_z + (nl.lam / var_z) * (e @ model.dictionary.T)


def sparse_log_density(model: SparseCodingModel, t, z):
    """Log density of the noised sparse-coding marginal, a finite Gaussian mixture."""
    nl, _, var_z = _sparse_noise(model, t)
    z, single = _as_batch(z, model.d)
    thetas, logp = _sparse_support(model)
    centers = nl.lam * thetas @ model.dictionary.T
    out = np.empty(z.shape[0])
    for i, zi in enumerate(z):
        sq = np.sum((zi[None, :] - centers) ** 2, axis=1)
        out[i] = logsumexp(logp - sq / (2 * var_z))
    out -= 0.5 * model.d * np.log(2 * np.pi * var_z)
    return out[0] if single else out


# --------------------------------------------------------------------------
# Generators for random instances


def random_coupling(d, op_norm, seed, zero_diagonal=True):
    """Symmetric Gaussian matrix rescaled to a given operator norm."""
    gen = _rng.stream(seed, 0)
    g = gen.standard_normal((d, d))
    a = (g + g.T) / np.sqrt(2 * d)
    if zero_diagonal:
        np.fill_diagonal(a, 0.0)
    norm = np.linalg.norm(a, 2)
    if norm == 0:
        return a
    return a * (op_norm / norm)


def sk_coupling(d, beta, seed):
    """``beta * J`` with ``J ~ GOE(d)``: off-diagonal entries of variance ``1/d``."""
    gen = _rng.stream(seed, 0)
    g = gen.standard_normal((d, d)) / np.sqrt(d)
    j = np.triu(g, 1)
    j = j + j.T
    return beta * j


# --------------------------------------------------------------------------
# JSON round trip


def model_to_dict(model):
    if isinstance(model, IsingModel):
        return {"type": "ising", "d": model.dim, "coupling": model.coupling.tolist()}
    if isinstance(model, BlockIsingModel):
        return {
            "type": "block_ising", "d": model.d, "m": model.m,
            "a11": model.a11.tolist(), "a12": model.a12.tolist(),
            "a22": model.a22.tolist(),
        }
    if isinstance(model, SparseCodingModel):
        return {
            "type": "sparse_coding", "d": model.d, "m": model.m,
            "dictionary": model.dictionary.tolist(),
            "prior": [[float(a), float(p)] for a, p in zip(model.atoms, model.probs)],
            "tau": model.noise_sd, "Pi": model.support_bound,
        }
    raise TypeError(f"unsupported model type {type(model).__name__}")


def model_from_dict(doc):
    kind = doc.get("type")
    if kind == "ising":
        return IsingModel(np.array(doc["coupling"], dtype=float).reshape(doc["d"], doc["d"]))
    if kind == "block_ising":
        d, m = doc["d"], doc["m"]
        return BlockIsingModel(
            np.array(doc["a11"], dtype=float).reshape(d, d),
            np.array(doc["a12"], dtype=float).reshape(d, m),
            np.array(doc["a22"], dtype=float).reshape(m, m),
        )
    if kind == "sparse_coding":
        prior = np.array(doc["prior"], dtype=float).reshape(-1, 2)
        return SparseCodingModel(
            np.array(doc["dictionary"], dtype=float).reshape(doc["d"], doc["m"]),
            prior[:, 0], prior[:, 1], doc["tau"], doc.get("Pi"),
        )
    raise ParameterRange(f"unknown model type {kind!r}")


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
