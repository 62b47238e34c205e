"""Free energies, their fixed-point solvers and scalar denoisers.

Every variational objective handled here has a stationarity condition of the
form ``m = f(U m + h)`` where ``f`` is a nondecreasing scalar denoiser acting
coordinatewise. For the Ising free energies ``f = tanh`` and ``U = A - K``;
for sparse coding ``f = G'`` (the posterior mean of a scalar Gaussian channel)
and ``U = K - A^T A / tau_bar^2``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from vidiff.errors import (
    BoundaryArgument,
    ContractionViolation,
    NonConvergence,
    ParameterRange,
    ShapeMismatch,
)
from vidiff.schedule import noise_level

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_STEPS = 10_000
BISECTION_TOL = 1e-12


def op_norm(a):
    return float(np.linalg.norm(np.atleast_2d(a), 2)) if np.size(a) else 0.0


# --------------------------------------------------------------------------
# Energies


def binary_entropy(m):
    """``h_bin(m) = -[(1+m)/2 log((1+m)/2) + (1-m)/2 log((1-m)/2)]``."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(np.abs(m) >= 1):
        raise BoundaryArgument("binary entropy is evaluated on the open interval (-1, 1)")
    p, q = (1 + m) / 2, (1 - m) / 2
    return -(p * np.log(p) + q * np.log(q))


def naive_vb_energy(a, z, t, m):
    nl = noise_level(t)
    a, z, m = (np.asarray(v, dtype=np.float64) for v in (a, z, m))
    return float(-binary_entropy(m).sum() - 0.5 * m @ a @ m
                 - (nl.lam / nl.sigma2) * (z @ m))


def vi_energy(a, k, z, t, m):
    """Naive mean-field energy plus the quadratic correction ``<m, K m>/2``."""
    m = np.asarray(m, dtype=np.float64)
    return naive_vb_energy(a, z, t, m) + 0.5 * float(m @ np.asarray(k) @ m)


# --------------------------------------------------------------------------
# Scalar denoisers


@dataclass(frozen=True)
class ScalarDenoiser:
    """Nondecreasing scalar posterior-mean function.

    ``kind="tanh"`` is the +/-1 channel. ``kind="posterior"`` is
    ``G'(lam) = sum_b b w(b) / sum_b w(b)`` with
    ``w(b) = pi0(b) exp(lam b - b^2 nu / 2)``.
    """

    kind: str
    atoms: np.ndarray = field(default_factory=lambda: np.array([-1.0, 1.0]))
    probs: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    nu: float = 0.0

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=np.float64)
        if self.kind == "tanh":
            return np.tanh(lam)
        logits = (np.log(self.probs) - 0.5 * self.nu * self.atoms ** 2
                  + lam[..., None] * self.atoms)
        w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        return w @ self.atoms

    def derivative(self, lam):
        """``G''``, the posterior variance of the scalar channel."""
        lam = np.asarray(lam, dtype=np.float64)
        if self.kind == "tanh":
            return 1.0 - np.tanh(lam) ** 2
        logits = (np.log(self.probs) - 0.5 * self.nu * self.atoms ** 2
                  + lam[..., None] * self.atoms)
        w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        mean = w @ self.atoms
        return w @ self.atoms ** 2 - mean ** 2

    @property
    def range(self):
        """``(inf F, sup F)``: the extreme atoms."""
        if self.kind == "tanh":
            return -1.0, 1.0
        return float(self.atoms.min()), float(self.atoms.max())

    @property
    def bound(self):
        """Pi, the largest output magnitude."""
        lo, hi = self.range
        return max(abs(lo), abs(hi))

    def inverse(self, level, tol=BISECTION_TOL):
        """Solve ``F(w) = level`` for ``level`` strictly inside the range."""
        lo, hi = -1.0, 1.0
        while self(lo) >= level:
            lo *= 2.0
            if lo < -1e8:
                raise NonConvergence(f"no preimage found for level {level}")
        while self(hi) <= level:
            hi *= 2.0
            if hi > 1e8:
                raise NonConvergence(f"no preimage found for level {level}")
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self(mid) < level:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


TANH = ScalarDenoiser("tanh")


def posterior_scalar(atoms, probs, nu=0.0) -> ScalarDenoiser:
    """Scalar posterior mean ``G'`` for a finite prior and Tikhonov weight ``nu``."""
    atoms = np.ravel(np.asarray(atoms, dtype=np.float64))
    probs = np.ravel(np.asarray(probs, dtype=np.float64))
    if atoms.size == 0 or atoms.shape != probs.shape:
        raise ParameterRange("prior must be a nonempty list of (atom, probability)")
    keep = probs > 0
    if not keep.any():
        raise ParameterRange("prior has no mass")
    return ScalarDenoiser("posterior", atoms[keep], probs[keep] / probs[keep].sum(), float(nu))


@dataclass(frozen=True)
class PwlDenoiser:
    """``f(x) = a0 + sum_j a_j ReLU(x - w_j)``."""

    a0: float
    slopes: tuple
    knots: tuple
    zeta: float
    bound: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, self.a0)
        for a, w in zip(self.slopes, self.knots):
            out += a * np.maximum(x - w, 0.0)
        return out

    @property
    def n_knots(self):
        return len(self.knots)

    def to_dict(self):
        return {"a0": self.a0, "pairs": [[a, w] for a, w in zip(self.slopes, self.knots)],
                "zeta": self.zeta, "Pi": self.bound}

    @classmethod
    def from_dict(cls, doc):
        pairs = doc.get("pairs", [])
        return cls(float(doc["a0"]), tuple(float(p[0]) for p in pairs),
                   tuple(float(p[1]) for p in pairs), float(doc["zeta"]), float(doc["Pi"]))


def build_pwl(target: ScalarDenoiser, zeta) -> PwlDenoiser:
    """Piecewise-linear interpolation of ``target`` at equally spaced levels.

    With ``n = ceil(range / zeta)`` the breakpoints ``w_j`` solve
    ``F(w_j) = Pi_min + j * range / n`` for ``j = 1..n-1``; the interpolant is
    flat outside ``[w_1, w_{n-1}]``, so the sup error is at most ``range / n``.
    """
    if not zeta > 0:
        raise ParameterRange(f"zeta must be positive, got {zeta}")
    lo, hi = target.range
    width = hi - lo
    if width == 0:
        return PwlDenoiser(lo, (), (), float(zeta), target.bound)
    n = max(1, math.ceil(width / zeta - 1e-12))
    levels = [lo + j * width / n for j in range(1, n)]
    knots = [target.inverse(y) for y in levels]
    # slope on [w_j, w_{j+1}]; zero on the two unbounded pieces
    seg = [0.0]
    seg += [(levels[j + 1] - levels[j]) / (knots[j + 1] - knots[j]) for j in range(len(knots) - 1)]
    seg += [0.0]
    slopes = [seg[j + 1] - seg[j] for j in range(len(knots))]
    a0 = lo + width / n
    return PwlDenoiser(a0, tuple(slopes), tuple(knots), float(zeta), target.bound)


# --------------------------------------------------------------------------
# Fixed-point problems


@dataclass(frozen=True)
class FreeEnergySpec:
    """Fixed-point problem ``m = f(U m + h)``.

    ``field`` is a vector or a batch of row vectors (one problem per row).
    ``contraction_bound`` is the declared bound on ``||U||_op``.
    ``energy_kind`` says how to evaluate the objective along a solve:
    ``"binary"`` for the Ising-type energies, ``None`` when not tracked.
    """

    interaction: np.ndarray
    field: np.ndarray
    contraction_bound: float
    energy_kind: str | None = "binary"

    @property
    def dim(self):
        return self.interaction.shape[0]

    def energy(self, m):
        """Ising-type free energy ``sum -h_bin(m) - <m, U m>/2 - <h, m>``."""
        if self.energy_kind != "binary":
            return float("nan")
        m = np.asarray(m)
        if np.any(np.abs(m) >= 1):
            return float("nan")
        ent = binary_entropy(m).sum(axis=-1)
        quad = 0.5 * np.einsum("...i,ij,...j->...", m, self.interaction, m)
        lin = np.sum(self.field * m, axis=-1)
        return -ent - quad - lin


def _spec(u, h, bound, kind="binary"):
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1] or h.shape[-1] != u.shape[0]:
        raise ShapeMismatch(f"interaction {u.shape} and field {h.shape} disagree")
    if bound is None:
        bound = op_norm(u)
    return FreeEnergySpec(u, h, float(bound), kind)


def ising_spec(a, k, t, z, bound=None) -> FreeEnergySpec:
    """``U = A - K``, ``h = lambda_t z / sigma_t^2``."""
    nl = noise_level(t)
    a = np.asarray(a, dtype=np.float64)
    k = np.zeros_like(a) if k is None else np.asarray(k, dtype=np.float64)
    return _spec(a - k, (nl.lam / nl.sigma2) * np.asarray(z, dtype=np.float64), bound)


def conditional_spec(a11, a12, k, t, z, theta, bound=None) -> FreeEnergySpec:
    """Conditional Ising: the latent block enters the field as ``A12 theta``."""
    nl = noise_level(t)
    a11 = np.asarray(a11, dtype=np.float64)
    k = np.zeros_like(a11) if k is None else np.asarray(k, dtype=np.float64)
    h = (nl.lam / nl.sigma2) * np.asarray(z, dtype=np.float64) + np.asarray(theta) @ np.asarray(a12).T
    return _spec(a11 - k, h, bound)


def marginal_spec(block, k, t, z, bound=None) -> FreeEnergySpec:
    """Latent-variable Ising: solve over ``(x, theta)``, observe only ``x``."""
    nl = noise_level(t)
    a = block.joint_coupling()
    k = np.zeros_like(a) if k is None else np.asarray(k, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    pad = np.zeros(z.shape[:-1] + (block.m,))
    h = (nl.lam / nl.sigma2) * np.concatenate([z, pad], axis=-1)
    return _spec(a - k, h, bound)


def sparse_spec(model, k_t, t, z, bound=None) -> FreeEnergySpec:
    """Sparse coding: ``U = K_t - A^T A / tau_bar^2``, ``h = A^T (z / lambda_t) / tau_bar^2``."""
    nl = noise_level(t)
    tau_bar2 = model.noise_sd ** 2 + nl.sigma2 / nl.lam ** 2
    a = model.dictionary
    k_t = _as_matrix(k_t, model.m)
    u = k_t - a.T @ a / tau_bar2
    h = (np.asarray(z, dtype=np.float64) / nl.lam) @ a / tau_bar2
    return _spec(u, h, bound, kind=None)


def _as_matrix(k, size):
    if k is None:
        return np.zeros((size, size))
    k = np.asarray(k, dtype=np.float64)
    if k.ndim == 0:
        return float(k) * np.eye(size)
    return k


def _check_contraction(spec, f):
    pi = getattr(f, "bound", 1.0)
    if pi ** 2 * spec.contraction_bound >= 1:
        raise ContractionViolation(
            f"Pi^2 * A_norm = {pi ** 2 * spec.contraction_bound:.4g} must be < 1")
    return pi


def fixed_point_trace(spec: FreeEnergySpec, f, steps):
    """Iterates ``m^0 = 0, ..., m^steps`` of ``m <- f(U m + h)`` as one array."""
    _check_contraction(spec, f)
    m = np.zeros(np.shape(spec.field))
    out = [m]
    for _ in range(int(steps)):
        m = f(m @ spec.interaction.T + spec.field)
        out.append(m)
    return np.stack(out)


@dataclass
class SolveTrace:
    rows: list = field(default_factory=list)

    def add(self, it, residual, energy):
        self.rows.append((it, residual, energy))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual", "energy"])
            for it, res, en in self.rows:
                w.writerow([it, repr(float(res)), repr(float(en))])


def fixed_point_solve(spec: FreeEnergySpec, f, steps=None, tol=DEFAULT_TOL,
                      max_steps=DEFAULT_MAX_STEPS, trace: SolveTrace | None = None):
    """Picard iteration from ``m = 0``.

    With ``steps`` set, returns ``m^steps`` exactly. Otherwise iterates until
    the sup-norm residual ``||m - f(U m + h)||`` of the returned point is at
    most ``tol``. Energy increases are logged, not raised.
    """
    _check_contraction(spec, f)
    u, h = spec.interaction, spec.field
    m = np.zeros(np.shape(h))
    prev_energy = None
    limit = int(steps) if steps is not None else int(max_steps)
    for it in range(limit + 1):
        nxt = f(m @ u.T + h)
        residual = float(np.max(np.abs(nxt - m))) if m.size else 0.0
        if trace is not None or log.isEnabledFor(logging.DEBUG):
            energy = np.sum(spec.energy(m)) if spec.energy_kind == "binary" else float("nan")
            if trace is not None:
                trace.add(it, residual, energy)
            if prev_energy is not None and np.isfinite(energy) and energy > prev_energy + 1e-9:
                log.debug("free energy rose by %.3g at iteration %d", energy - prev_energy, it)
            prev_energy = energy
        if steps is not None:
            if it == limit:
                return m
        elif residual <= tol:
            return m
        m = nxt
    raise NonConvergence(f"no convergence to tol={tol} within {max_steps} steps")


# --------------------------------------------------------------------------
# Sherrington-Kirkpatrick replica-symmetric overlap


def gauss_hermite_normal(n):
    """Nodes and weights with ``E f(G) ~ sum w_i f(x_i)`` for ``G ~ N(0,1)``."""
    x, w = hermgauss(int(n))
    return math.sqrt(2.0) * x, w / math.sqrt(math.pi)


def sk_overlap(beta, t, quad_nodes=61, tol=1e-10, damping=0.5, max_steps=10_000):
    """Solve ``q = E tanh^2(b q + s + sqrt(b q + s) G)`` for ``b = beta^2``, ``s = snr``.

    Damped iteration from ``q = 0.5`` with Gauss-Hermite quadrature.
    """
    if not 0 <= beta <= 0.25:
        raise ParameterRange(f"beta must lie in [0, 1/4], got {beta}")
    nl = noise_level(t)
    x, w = gauss_hermite_normal(quad_nodes)
    b, s = beta ** 2, nl.snr

    def rhs(q):
        g = b * q + s
        return float(w @ np.tanh(g + math.sqrt(g) * x) ** 2)

    q = 0.5
    for _ in range(max_steps):
        r = rhs(q)
        if abs(r - q) <= tol:
            return r
        q = (1 - damping) * q + damping * r
    raise NonConvergence(f"SK overlap did not converge for beta={beta}, t={t}")


def sk_correction(beta, t, quad_nodes=61):
    """Onsager coefficient ``c_t = beta^2 (1 - q_t)``; use ``K = c_t I``."""
    return beta ** 2 * (1.0 - sk_overlap(beta, t, quad_nodes))
