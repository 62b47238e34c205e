"""Forward noising, score oracles and the exponential-integrator reverse sampler."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vidiff import models, rng as _rng
from vidiff import unroll, variational as vi
from vidiff.errors import NonFiniteScore, ParameterRange, ShapeMismatch
from vidiff.schedule import TimeGrid, noise_level

BLOCK_CHAINS = 4096


@dataclass(frozen=True)
class ScoreOracle:
    """Batched score ``fn(t, Z[, Theta]) -> S`` with rows as inputs.

    ``provenance`` is one of ``exact``, ``fixed-point``, ``unrolled``,
    ``trained``; ``m`` is the conditioning length (0 when unconditional).
    """

    fn: Callable
    provenance: str
    d: int
    m: int = 0

    def __call__(self, t, z, theta=None):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d:
            raise ShapeMismatch(f"oracle expects length {self.d}, got {z.shape[-1]}")
        if self.m:
            if theta is None:
                raise ShapeMismatch("conditional oracle needs theta")
            if np.shape(theta)[-1] != self.m:
                raise ShapeMismatch(f"theta must have length {self.m}")
            return self.fn(t, z, theta)
        return self.fn(t, z)


def exact_oracle(model, conditional=False) -> ScoreOracle:
    """Enumeration-based score. Block models give the marginal score of ``x``
    unless ``conditional`` is set."""
    if isinstance(model, models.IsingModel):
        return ScoreOracle(lambda t, z: models.exact_score(model, t, z), "exact", model.dim)
    if isinstance(model, models.BlockIsingModel):
        if conditional:
            return ScoreOracle(lambda t, z, th: models.exact_conditional_score(model, th, t, z),
                               "exact", model.d, model.m)
        return ScoreOracle(lambda t, z: models.exact_marginal_score(model, t, z), "exact", model.d)
    if isinstance(model, models.SparseCodingModel):
        return ScoreOracle(lambda t, z: models.sparse_exact_score(model, t, z), "exact", model.d)
    raise TypeError(f"unsupported model {type(model).__name__}")


def sparse_mean_field(model, t):
    """Default coupling for sparse coding: ``nu_t = mean diag(A^T A) / tau_bar^2``, ``K_t = nu_t I``.

    With equal column norms this removes the self-interaction from ``U`` and
    moves it into the scalar channel.
    """
    nl = noise_level(t)
    tau_bar2 = model.noise_sd ** 2 + nl.sigma2 / nl.lam ** 2
    nu = float(np.mean(np.sum(model.dictionary ** 2, axis=0))) / tau_bar2
    return nu, nu


def vi_oracle(model, k=None, conditional=False, tol=vi.DEFAULT_TOL) -> ScoreOracle:
    """Score through the converged variational fixed point.

    ``k`` is a fixed matrix/scalar, a callable ``t -> K`` (e.g. an SK
    correction), or ``None`` for zero (Ising) / the default sparse coupling.
    """
    def k_at(t):
        return k(t) if callable(k) else k

    if isinstance(model, models.IsingModel):
        def fn(t, z):
            nl = noise_level(t)
            m = vi.fixed_point_solve(vi.ising_spec(model.coupling, k_at(t), t, z), vi.TANH, tol=tol)
            return (nl.lam * m - z) / nl.sigma2
        return ScoreOracle(fn, "fixed-point", model.dim)
    if isinstance(model, models.BlockIsingModel):
        if conditional:
            def cfn(t, z, theta):
                nl = noise_level(t)
                spec = vi.conditional_spec(model.a11, model.a12, k_at(t), t, z, theta)
                return (nl.lam * vi.fixed_point_solve(spec, vi.TANH, tol=tol) - z) / nl.sigma2
            return ScoreOracle(cfn, "fixed-point", model.d, model.m)

        def mfn(t, z):
            nl = noise_level(t)
            w = vi.fixed_point_solve(vi.marginal_spec(model, k_at(t), t, z), vi.TANH, tol=tol)
            return (nl.lam * w[..., :model.d] - z) / nl.sigma2
        return ScoreOracle(mfn, "fixed-point", model.d)
    if isinstance(model, models.SparseCodingModel):
        def sfn(t, z):
            nl = noise_level(t)
            nu, k_default = sparse_mean_field(model, t)
            k_t = k_default if k is None else k_at(t)
            f = vi.posterior_scalar(model.atoms, model.probs, nu)
            e = vi.fixed_point_solve(vi.sparse_spec(model, k_t, t, z), f, tol=tol)
            var_z = model.noise_sd ** 2 * nl.lam ** 2 + nl.sigma2
            return (nl.lam * e @ model.dictionary.T - z) / var_z
        return ScoreOracle(sfn, "fixed-point", model.d)
    raise TypeError(f"unsupported model {type(model).__name__}")


def build_unrolled(model, t, L, zeta, k=None, conditional=False):
    """Unrolled network for ``model`` at time ``t``."""
    if isinstance(model, models.IsingModel):
        return unroll.unroll_ising(model.coupling, k, t, L, vi.build_pwl(vi.TANH, zeta))
    if isinstance(model, models.BlockIsingModel):
        pwl = vi.build_pwl(vi.TANH, zeta)
        if conditional:
            return unroll.unroll_conditional(model.a11, model.a12, k, t, L, pwl)
        return unroll.unroll_marginal(model, k, t, L, pwl)
    if isinstance(model, models.SparseCodingModel):
        nu, k_default = sparse_mean_field(model, t)
        pwl = vi.build_pwl(vi.posterior_scalar(model.atoms, model.probs, nu), zeta)
        return unroll.unroll_sparse(model, k_default if k is None else k, nu, t, L, pwl)
    raise TypeError(f"unsupported model {type(model).__name__}")


def unrolled_oracle(model, L, zeta, k=None, conditional=False) -> ScoreOracle:
    """Unrolled network rebuilt (and cached) for every queried time."""
    cache = {}

    def net(t):
        key = float(t)
        if key not in cache:
            cache[key] = build_unrolled(model, t, L, zeta, k, conditional)
        return cache[key]

    if conditional:
        return ScoreOracle(lambda t, z, th: unroll.resnet_forward(net(t), z, th),
                           "unrolled", model.d, model.m)
    return ScoreOracle(lambda t, z: unroll.resnet_forward(net(t), z), "unrolled", model.dim)


def network_oracle(nets, provenance="trained", truncation=None, time_tol=1e-9) -> ScoreOracle:
    """Score from fixed networks, one per time; each header must record ``t``.

    ``truncation`` is a callable ``t -> TruncationSpec`` or ``None``.
    """
    if isinstance(nets, unroll.ResNetWeights):
        nets = [nets]
    times = np.array([float(w.header["t"]) for w in nets])
    d, m = nets[0].d, nets[0].m

    def pick(t):
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > time_tol:
            raise ParameterRange(f"no network trained for t = {t}")
        return nets[i]

    def fn(t, z, theta=None):
        out = unroll.resnet_forward(pick(t), z, theta)
        if truncation is not None:
            out = unroll.truncate(truncation(t), out, z)
        return out

    if m:
        return ScoreOracle(fn, provenance, d, m)
    return ScoreOracle(lambda t, z: fn(t, z), provenance, d)


# --------------------------------------------------------------------------
# Forward process and sampler


def forward_noise(x, t, seed=None, g=None):
    """``z = lambda_t x + sigma_t g``; ``g`` is drawn from stream ``(seed, 0)`` unless given."""
    nl = noise_level(t)
    x = np.asarray(x, dtype=np.float64)
    if g is None:
        g = _rng.stream(seed, 0).standard_normal(x.shape)
    return nl.lam * x + nl.sigma * np.asarray(g, dtype=np.float64)


def _run_block(score, grid: TimeGrid, n, d, seed, block_id, first_chain, theta):
    gen = _rng.stream(seed, block_id)
    y = gen.standard_normal((n, d))
    for k, (tk, gamma) in enumerate(zip(grid.times[:-1], grid.gaps)):
        t_query = grid.T - tk
        s = score(t_query, y, theta) if score.m else score(t_query, y)
        bad = ~np.all(np.isfinite(s), axis=1)
        if bad.any():
            chains = tuple(int(first_chain + i) for i in np.flatnonzero(bad))
            raise NonFiniteScore(
                f"non-finite score at step k={k} (t={t_query:.6g}) for chains {chains[:10]}",
                chains=chains, t=t_query, k=k)
        eg = math.exp(gamma)
        y = eg * y + 2.0 * (eg - 1.0) * s + math.sqrt(math.expm1(2.0 * gamma)) * gen.standard_normal((n, d))
    return y


def ddpm_sample(score: ScoreOracle, grid: TimeGrid, n_chains, seed, theta=None,
                workers=1, block=BLOCK_CHAINS):
    """Reverse-time exponential-integrator sampler; returns ``Y_N`` per chain.

    Chains are processed in blocks of ``block``; block ``b`` draws all of its
    randomness from stream ``(seed, b)``, so results do not depend on
    ``workers``. ``theta`` is one conditioning vector or one row per chain.
    """
    if n_chains < 0:
        raise ParameterRange("n_chains must be nonnegative")
    d = score.d
    if score.m:
        if theta is None:
            raise ShapeMismatch("conditional sampling needs theta")
        theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), (n_chains, score.m))
    starts = list(range(0, n_chains, block))

    def job(i):
        s = starts[i]
        n = min(block, n_chains - s)
        th = theta[s:s + n] if theta is not None else None
        return _run_block(score, grid, n, d, seed, i, s, th)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(starts))))
    else:
        parts = [job(i) for i in range(len(starts))]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, d))


def round_spins(y):
    """Coordinatewise sign with ``sign(0) = +1``."""
    return np.where(np.asarray(y) >= 0, 1.0, -1.0)


def write_samples_csv(path, samples, rounded=False, meta=None):
    """One row per chain: ``chain, y_1..y_d`` and, if ``rounded``, ``r_1..r_d``.

    A sidecar ``<path>.meta.json`` records ``meta`` and the rounding convention.
    """
    samples = np.asarray(samples)
    d = samples.shape[1]
    head = ["chain"] + [f"y_{i + 1}" for i in range(d)]
    if rounded:
        head += [f"r_{i + 1}" for i in range(d)]
        signs = round_spins(samples).astype(int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i, row in enumerate(samples):
            vals = [i] + [repr(float(v)) for v in row]
            if rounded:
                vals += signs[i].tolist()
            w.writerow(vals)
    info = dict(meta or {})
    info["rounding"] = ("r_i = sign(y_i), sign(0) = +1; reporting convention only, "
                        "the sampler targets the noised law at the terminal gap") if rounded else None
    with open(f"{path}.meta.json", "w") as fh:
        json.dump(info, fh, indent=1)


def read_samples_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    cols = [i for i, h in enumerate(head) if h.startswith("y_")]
    return np.array([[float(r[i]) for i in cols] for r in rows[1:]]).reshape(len(rows) - 1, len(cols))
