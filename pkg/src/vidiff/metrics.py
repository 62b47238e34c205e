"""Score-error and distributional error measurements."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from vidiff import models, rng as _rng
from vidiff.errors import DimensionTooLarge, EmptySamples, ShapeMismatch
from vidiff.schedule import noise_level

MAX_TABLE_SPINS = 20
DEFAULT_PSEUDO_COUNT = 0.5


def draw_clean(model, n, seed):
    """``(x, theta)`` rows from the model; ``theta`` is ``None`` without latents."""
    if isinstance(model, models.SparseCodingModel):
        return models.sparse_sample(model, n, seed), None
    joint = models.sample(model, n, seed)
    if isinstance(model, models.BlockIsingModel):
        return joint[:, :model.d], joint[:, model.d:]
    return joint, None


def score_mse(candidate, reference, model, t, n_mc, seed, batch=8192):
    """Monte Carlo ``E ||s_hat(z) - s(z)||^2 / d`` over ``z ~ mu_t``.

    Returns ``(mean, standard error)``. Clean data come from stream
    ``(seed, 0)``, the noise from ``(seed, 1)``.
    """
    if candidate.d != reference.d or candidate.d != model.dim:
        raise ShapeMismatch("oracles and model disagree on dimension")
    x, theta = draw_clean(model, n_mc, seed)
    g = _rng.stream(seed, 1).standard_normal(x.shape)
    nl = noise_level(t)
    z = nl.lam * x + nl.sigma * g
    per = np.empty(n_mc)
    for s in range(0, n_mc, batch):
        zz = z[s:s + batch]
        th = None if theta is None else theta[s:s + batch]
        a = candidate(t, zz, th) if candidate.m else candidate(t, zz)
        b = reference(t, zz, th) if reference.m else reference(t, zz)
        per[s:s + batch] = np.sum((a - b) ** 2, axis=1) / model.dim
    se = float(per.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return float(per.mean()), se


# --------------------------------------------------------------------------
# Discrete distributions


def _counts(p: models.DiscreteDistribution, samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise EmptySamples("no samples to compare")
    if samples.shape[1] != p.dim:
        raise ShapeMismatch(f"samples have length {samples.shape[1]}, distribution {p.dim}")
    if p.dim > MAX_TABLE_SPINS:
        raise DimensionTooLarge(f"tables are limited to {MAX_TABLE_SPINS} spins")
    spins = np.where(samples >= 0, 1, -1)
    return np.bincount(models.config_index(spins), minlength=2 ** p.dim)


def _full_table(p: models.DiscreteDistribution):
    probs = np.zeros(2 ** p.dim)
    probs[models.config_index(p.support)] = p.probs
    return probs


def discrete_kl(p: models.DiscreteDistribution, samples, pseudo_count=DEFAULT_PSEUDO_COUNT):
    """``KL(p || q_hat)`` with ``q_hat = (counts + c) / (n + c S)`` over all ``S = 2^d`` states.

    Samples are rounded to spins by sign before counting.
    """
    if not pseudo_count > 0:
        raise ValueError("pseudo_count must be positive")
    counts = _counts(p, samples)
    n = counts.sum()
    q = (counts + pseudo_count) / (n + pseudo_count * counts.size)
    probs = _full_table(p)
    keep = probs > 0
    return max(0.0, float(np.sum(probs[keep] * np.log(probs[keep] / q[keep]))))


def tv(p: models.DiscreteDistribution, samples):
    """Total variation between ``p`` and the empirical spin frequencies."""
    counts = _counts(p, samples)
    return 0.5 * float(np.abs(_full_table(p) - counts / counts.sum()).sum())


def rounded_noised_distribution(model: models.IsingModel, t) -> models.DiscreteDistribution:
    """Law of ``sign(lambda_t x + sigma_t g)`` for ``x ~ mu``.

    Each coordinate flips independently given ``x``:
    ``P(s_i | x_i) = Phi(s_i x_i lambda_t / sigma_t)``.
    """
    nl = noise_level(t)
    dist = models.enumerate_distribution(model)
    d = dist.dim
    keep = ndtr(nl.lam / nl.sigma)
    channel = np.array([[keep, 1 - keep], [1 - keep, keep]])
    table = dist.probs.reshape((2,) * d)  # axis j indexes x_j, 0 -> -1, 1 -> +1
    for axis in range(d):
        table = np.moveaxis(np.tensordot(channel, table, axes=([1], [axis])), 0, axis)
    probs = table.reshape(-1)
    return models.DiscreteDistribution(dist.support, probs / probs.sum())


# --------------------------------------------------------------------------
# Continuous samples


def moments(samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise EmptySamples("no samples")
    return samples.mean(axis=0), np.cov(samples.T, ddof=1).reshape(samples.shape[1], -1)


def energy_distance(a, b, max_points=4000):
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` on the first ``max_points`` rows of each set."""
    a = np.asarray(a, dtype=np.float64)[:max_points]
    b = np.asarray(b, dtype=np.float64)[:max_points]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise EmptySamples("energy distance needs at least two samples per set")

    def mean_dist(x, y):
        sq = np.sum(x ** 2, 1)[:, None] + np.sum(y ** 2, 1)[None, :] - 2 * x @ y.T
        return np.sqrt(np.maximum(sq, 0.0))

    dab = mean_dist(a, b).mean()
    daa = mean_dist(a, a).sum() / (len(a) * (len(a) - 1))
    dbb = mean_dist(b, b).sum() / (len(b) * (len(b) - 1))
    return float(2 * dab - daa - dbb)


# --------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    score_mse_per_dim: float | None = None
    score_mse_stderr: float | None = None
    kl: float | None = None
    tv: float | None = None
    n_samples: int | None = None
    pseudo_count: float | None = None
    mean: list | None = None
    covariance: list | None = None
    energy_distance: float | None = None
    metadata: dict = field(default_factory=dict)

    def check(self):
        for name in ("score_mse_per_dim", "kl", "tv", "energy_distance"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} is not finite")
        if self.kl is not None and self.kl < 0:
            raise ValueError("KL must be nonnegative")
        if self.tv is not None and not 0 <= self.tv <= 1:
            raise ValueError("TV must lie in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_csv(self, path):
        flat = {k: v for k, v in self.to_dict().items() if not isinstance(v, (list, dict))}
        flat.update({f"meta_{k}": v for k, v in self.metadata.items()
                     if not isinstance(v, (list, dict))})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(flat))
            w.writerow(["" if v is None else v for v in flat.values()])
