"""ReLU residual networks and the explicit weights that unroll fixed-point solvers.

Network::

    u_0 = W_in [z; (theta;) 1]
    u_l = u_{l-1} + W1_l ReLU(W2_l u_{l-1}),   l = 1..L
    out = W_out u_L

Matrices are stored in the shapes they are applied with: ``W_in`` is
``D x (p+1)``, ``W1`` is ``D x M``, ``W2`` is ``M x D`` and ``W_out`` is
``d x D``. Inputs are rows; a batch ``Z`` of shape ``(n, p)`` is propagated as
``U @ W.T``.

The unrolled constructions keep a block of constant ones in the hidden state so
that biases and the knot offsets ``-w_j`` act through plain matrix products.
Identity and constant terms pass through the ReLU as differences of pairs:
``m = ReLU(m) - ReLU(-m)`` and ``1 = ReLU(1)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from vidiff.errors import ContractionViolation, ShapeMismatch, VidiffError
from vidiff.schedule import noise_level
from vidiff.variational import PwlDenoiser

POWER_TOL = 1e-10
POWER_MAX_ITER = 5000


@dataclass(frozen=True)
class ResNetWeights:
    """Weights of a ReLU ResNet plus a descriptive header.

    ``header`` carries ``kind``, ``d`` (output length), ``m`` (theta length,
    0 when unconditional), ``t``, ``zeta``, ``B`` and, for unrolled nets,
    ``ones`` = ``[start, stop]`` of the constant block in the hidden state.
    """

    w_in: np.ndarray
    w1: tuple
    w2: tuple
    w_out: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.w1) != len(self.w2):
            raise ShapeMismatch("W1 and W2 need one matrix per block")
        D = self.w_in.shape[0]
        for a, b in zip(self.w1, self.w2):
            if a.shape[0] != D or b.shape[1] != D or a.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"block shapes {a.shape}, {b.shape} do not fit width {D}")
        if self.w_out.shape[1] != D:
            raise ShapeMismatch(f"W_out has {self.w_out.shape[1]} columns, width is {D}")

    @property
    def d(self):
        return self.w_out.shape[0]

    @property
    def m(self):
        return int(self.header.get("m", 0))

    @property
    def D(self):
        return self.w_in.shape[0]

    @property
    def L(self):
        return len(self.w1)

    @property
    def M(self):
        return self.w1[0].shape[1] if self.w1 else int(self.header.get("M", 0))

    @property
    def n_inputs(self):
        """Length of the input without the trailing constant."""
        return self.w_in.shape[1] - 1

    def matrices(self):
        return [self.w_in, *self.w1, *self.w2, self.w_out]

    def with_matrices(self, mats):
        L = self.L
        return ResNetWeights(mats[0], tuple(mats[1:1 + L]), tuple(mats[1 + L:1 + 2 * L]),
                             mats[-1], dict(self.header))

    def to_dict(self):
        head = {"d": self.d, "m": self.m, "D": self.D, "L": self.L, "M": self.M}
        head.update({k: v for k, v in self.header.items() if k not in head})
        return {
            "header": head,
            "w_in": self.w_in.tolist(),
            "w1": [a.tolist() for a in self.w1],
            "w2": [b.tolist() for b in self.w2],
            "w_out": self.w_out.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        head = dict(doc["header"])
        D, M = head["D"], head["M"]
        w_in = np.array(doc["w_in"], dtype=np.float64).reshape(D, -1)
        w1 = tuple(np.array(a, dtype=np.float64).reshape(D, M) for a in doc["w1"])
        w2 = tuple(np.array(b, dtype=np.float64).reshape(M, D) for b in doc["w2"])
        w_out = np.array(doc["w_out"], dtype=np.float64).reshape(head["d"], D)
        return cls(w_in, w1, w2, w_out, head)


def save_weights(weights, path):
    """JSON with shortest round-trip float repr (at most 17 significant digits)."""
    with open(path, "w") as fh:
        json.dump(weights.to_dict(), fh)


def load_weights(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "nets" in doc:
        return [ResNetWeights.from_dict(d) for d in doc["nets"]]
    return ResNetWeights.from_dict(doc)


def save_weight_bundle(nets, path):
    """Several per-time networks in one file."""
    with open(path, "w") as fh:
        json.dump({"nets": [w.to_dict() for w in nets]}, fh)


def _input_rows(weights: ResNetWeights, z, theta):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    parts = [z]
    if weights.m:
        if theta is None:
            raise ShapeMismatch("this network needs a theta input")
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[1] != weights.m:
            raise ShapeMismatch(f"theta must have length {weights.m}")
        parts.append(np.broadcast_to(theta, (z.shape[0], weights.m)))
    parts.append(np.ones((z.shape[0], 1)))
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != weights.w_in.shape[1]:
        raise ShapeMismatch(
            f"input length {x.shape[1] - 1} does not match W_in ({weights.n_inputs})")
    return x, single


def resnet_forward(weights: ResNetWeights, z, theta=None, return_states=False):
    """Evaluate the network on one input or a batch of row inputs.

    When the header names a constant block, every hidden state is checked to
    carry exact ones there.
    """
    x, single = _input_rows(weights, z, theta)
    u = x @ weights.w_in.T
    ones = weights.header.get("ones")
    states = [u]
    for a, b in zip(weights.w1, weights.w2):
        u = u + np.maximum(u @ b.T, 0.0) @ a.T
        if ones is not None and not np.all(u[:, ones[0]:ones[1]] == 1.0):
            raise VidiffError("constant channel drifted from 1")
        if return_states:
            states.append(u)
    out = u @ weights.w_out.T
    if single:
        out = out[0]
        states = [s[0] for s in states]
    return (out, states) if return_states else out


# --------------------------------------------------------------------------
# Norms


def operator_norm(a, tol=POWER_TOL, max_iter=POWER_MAX_ITER, method="power"):
    """Largest singular value.

    ``method="power"`` runs power iteration on ``A^T A`` until the relative
    change of the estimate is below ``tol``, falling back to a dense SVD at the
    iteration cap. ``method="svd"`` uses the SVD directly.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return 0.0
    if method == "svd":
        return float(np.linalg.norm(a, 2))
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    v = np.random.default_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = gram @ v
        new = float(np.linalg.norm(w))
        if new == 0.0:
            break
        v = w / new
        if abs(new - est) <= tol * new:
            return math.sqrt(new)
        est = new
    return float(np.linalg.norm(a, 2))


def weight_norm(weights: ResNetWeights, method="power"):
    """``max_l(||W1_l|| + ||W2_l||)`` or the input/output norms, whichever is larger."""
    parts = [operator_norm(weights.w_in, method=method), operator_norm(weights.w_out, method=method)]
    parts += [operator_norm(a, method=method) + operator_norm(b, method=method)
              for a, b in zip(weights.w1, weights.w2)]
    return max(parts)


# --------------------------------------------------------------------------
# Unrolled constructions


def _unrolled_block(interaction, field_blocks, ones_at, pwl: PwlDenoiser, n, D):
    """Residual block implementing ``m <- f(U m + field)`` on the first ``n`` state entries.

    ``field_blocks`` lists ``(column offset, n x n matrix)`` pairs whose
    products with the state form the field. Hidden units come in groups of
    ``n``: one group per knot, then ``m``, ``-m``, ``1``, ``-1``.
    """
    k = pwl.n_knots
    M = (k + 4) * n
    eye = np.eye(n)
    w2 = np.zeros((M, D))
    w1 = np.zeros((D, M))
    for j, (a, w) in enumerate(zip(pwl.slopes, pwl.knots)):
        rows = slice(j * n, (j + 1) * n)
        w2[rows, :n] = interaction
        for col, mat in field_blocks:
            w2[rows, col:col + n] = mat
        w2[rows, ones_at:ones_at + n] = -w * eye
        w1[:n, rows] = a * eye
    groups = [(eye, 0, -eye), (-eye, 0, eye), (eye, ones_at, pwl.a0 * eye),
              (-eye, ones_at, -pwl.a0 * eye)]
    for g, (mat, col, out) in enumerate(groups):
        rows = slice((k + g) * n, (k + g + 1) * n)
        w2[rows, col:col + n] = mat
        w1[:n, rows] = out
    return w1, w2


def _check_contraction(u, pi=1.0):
    norm = operator_norm(u, method="svd")
    if pi ** 2 * norm >= 1:
        raise ContractionViolation(
            f"Pi^2 * ||U||_op = {pi ** 2 * norm:.4g} must be < 1 for the unrolled iteration")
    return norm


def _as_k(k, n):
    if k is None:
        return np.zeros((n, n))
    k = np.asarray(k, dtype=np.float64)
    return float(k) * np.eye(n) if k.ndim == 0 else k


def unroll_ising(a, k, t, L, pwl: PwlDenoiser) -> ResNetWeights:
    """Network equal to ``(lambda_t m^L(z) - z) / sigma_t^2`` for ``m <- f((A-K) m + lambda_t z / sigma_t^2)``.

    State ``[m; z / sigma_t^2; 1_d]``, width ``D = 3d``.
    """
    nl = noise_level(t)
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[0]
    u = a - _as_k(k, d)
    _check_contraction(u)
    D = 3 * d
    eye = np.eye(d)
    w_in = np.zeros((D, d + 1))
    w_in[d:2 * d, :d] = eye / nl.sigma2
    w_in[2 * d:, d] = 1.0
    w1, w2 = _unrolled_block(u, [(d, nl.lam * eye)], 2 * d, pwl, d, D)
    w_out = np.hstack([nl.lam / nl.sigma2 * eye, -eye, np.zeros((d, d))])
    header = {"kind": "ising", "m": 0, "t": float(t), "zeta": pwl.zeta,
              "B": bound_ising(d, t, pwl.zeta), "ones": [2 * d, 3 * d]}
    return ResNetWeights(w_in, (w1,) * L, (w2,) * L, w_out, header)


def unroll_marginal(block, k, t, L, pwl: PwlDenoiser) -> ResNetWeights:
    """Latent-variable Ising: iterate over ``(x, theta)`` jointly, output the ``x`` part.

    State ``[omega; [z; 0] / sigma_t^2; 1_{d+m}]``, width ``D = 3(d+m)``.
    """
    nl = noise_level(t)
    d, n = block.d, block.d + block.m
    u = block.joint_coupling() - _as_k(k, n)
    _check_contraction(u)
    D = 3 * n
    eye = np.eye(n)
    w_in = np.zeros((D, d + 1))
    w_in[n:n + d, :d] = np.eye(d) / nl.sigma2
    w_in[2 * n:, d] = 1.0
    w1, w2 = _unrolled_block(u, [(n, nl.lam * eye)], 2 * n, pwl, n, D)
    w_out = np.zeros((d, D))
    w_out[:, :d] = nl.lam / nl.sigma2 * np.eye(d)
    w_out[:, n:n + d] = -np.eye(d)
    header = {"kind": "marginal", "m": 0, "latent": block.m, "t": float(t), "zeta": pwl.zeta,
              "B": bound_marginal(d, block.m, t, pwl.zeta), "ones": [2 * n, 3 * n]}
    return ResNetWeights(w_in, (w1,) * L, (w2,) * L, w_out, header)


def unroll_conditional(a11, a12, k, t, L, pwl: PwlDenoiser) -> ResNetWeights:
    """Conditional Ising; the network input is ``[z; theta; 1]``.

    State ``[m; z / sigma_t^2; A12 theta; 1_d]``, width ``D = 4d``.
    """
    nl = noise_level(t)
    a11 = np.asarray(a11, dtype=np.float64)
    d = a11.shape[0]
    a12 = np.asarray(a12, dtype=np.float64).reshape(d, -1)
    m = a12.shape[1]
    u = a11 - _as_k(k, d)
    _check_contraction(u)
    D = 4 * d
    eye = np.eye(d)
    w_in = np.zeros((D, d + m + 1))
    w_in[d:2 * d, :d] = eye / nl.sigma2
    w_in[2 * d:3 * d, d:d + m] = a12
    w_in[3 * d:, d + m] = 1.0
    w1, w2 = _unrolled_block(u, [(d, nl.lam * eye), (2 * d, eye)], 3 * d, pwl, d, D)
    w_out = np.hstack([nl.lam / nl.sigma2 * eye, -eye, np.zeros((d, 2 * d))])
    header = {"kind": "conditional", "m": m, "t": float(t), "zeta": pwl.zeta,
              "B": bound_conditional(d, t, pwl.zeta, operator_norm(a12, method="svd")),
              "ones": [3 * d, 4 * d]}
    return ResNetWeights(w_in, (w1,) * L, (w2,) * L, w_out, header)


def sparse_interaction(model, k_t, t):
    """``U = K_t - A^T A / tau_bar^2`` and ``tau_bar^2 = tau^2 + sigma_t^2 / lambda_t^2``."""
    nl = noise_level(t)
    tau_bar2 = model.noise_sd ** 2 + nl.sigma2 / nl.lam ** 2
    a = model.dictionary
    return _as_k(k_t, model.m) - a.T @ a / tau_bar2, tau_bar2


def unroll_sparse(model, k_t, nu_t, t, L, pwl: PwlDenoiser) -> ResNetWeights:
    """Sparse-coding score through the posterior mean of ``theta``.

    Output ``(lambda_t A e^L(z / lambda_t) - z) / (tau^2 lambda_t^2 + sigma_t^2)``
    with ``e <- f(U e + A^T (z / lambda_t) / tau_bar^2)``. ``pwl`` approximates
    ``G'`` of the prior with Tikhonov weight ``nu_t`` (recorded in the header).
    State ``[e; A^T z / (lambda_t tau_bar^2); 1_m; z]``, width ``D = 3m + d``.
    """
    nl = noise_level(t)
    d, m = model.d, model.m
    a = model.dictionary
    u, tau_bar2 = sparse_interaction(model, k_t, t)
    u_norm = _check_contraction(u, pwl.bound)
    var_z = model.noise_sd ** 2 * nl.lam ** 2 + nl.sigma2
    D = 3 * m + d
    w_in = np.zeros((D, d + 1))
    w_in[m:2 * m, :d] = a.T / (tau_bar2 * nl.lam)
    w_in[2 * m:3 * m, d] = 1.0
    w_in[3 * m:, :d] = np.eye(d)
    w1, w2 = _unrolled_block(u, [(m, np.eye(m))], 2 * m, pwl, m, D)
    w_out = np.zeros((d, D))
    w_out[:, :m] = nl.lam * a / var_z
    w_out[:, 3 * m:] = -np.eye(d) / var_z
    header = {"kind": "sparse", "m": 0, "coeffs": m, "t": float(t), "zeta": pwl.zeta,
              "nu": float(nu_t), "Pi": pwl.bound,
              "B": bound_sparse(model, t, pwl, u_norm), "ones": [2 * m, 3 * m]}
    return ResNetWeights(w_in, (w1,) * L, (w2,) * L, w_out, header)


# --------------------------------------------------------------------------
# Norm bounds certified by the constructions


def _tanh_knot_terms(zeta):
    return math.ceil(2 / zeta) - 1, math.log(math.ceil(1 / zeta))


def bound_ising(d, t, zeta):
    k, w = _tanh_knot_terms(zeta)
    return k * (4 + w) + 8 + 1 / noise_level(t).sigma2 + math.sqrt(d)


def bound_marginal(d, m, t, zeta):
    k, w = _tanh_knot_terms(zeta)
    return k * (w + 4) + 8 + math.sqrt(d + m) + 1 / noise_level(t).sigma2


def bound_conditional(d, t, zeta, a12_norm):
    k, w = _tanh_knot_terms(zeta)
    return k * (w + 4 + a12_norm) + 8 + 1 / noise_level(t).sigma2 + a12_norm + math.sqrt(d)


def bound_sparse(model, t, pwl: PwlDenoiser, u_norm):
    """``u_norm`` bounds ``||U||_op``; the largest knot magnitude stands in for ``w_zeta``."""
    nl = noise_level(t)
    pi = pwl.bound
    tau_bar2 = model.noise_sd ** 2 + nl.sigma2 / nl.lam ** 2
    a_norm = operator_norm(model.dictionary, method="svd")
    k = math.ceil(2 * pi / pwl.zeta) - 1
    w_zeta = max((abs(w) for w in pwl.knots), default=0.0)
    return (k * (u_norm + 1 + 2 * pi ** 2 + w_zeta) + 2 * pi + 6
            + (a_norm + 1) / nl.sigma2 + a_norm / (tau_bar2 * nl.lam) + math.sqrt(model.m))


# --------------------------------------------------------------------------
# Truncation


@dataclass(frozen=True)
class TruncationSpec:
    """``P[f](z) = proj_R(f(z) + c z) - c z`` with ball radius ``R`` and shift ``c``."""

    kind: str
    radius: float
    shift: float

    def __post_init__(self):
        if not self.radius > 0:
            raise VidiffError("truncation radius must be positive")

    @classmethod
    def ising(cls, d, t):
        nl = noise_level(t)
        return cls("ising", nl.lam / nl.sigma2 * math.sqrt(d), 1 / nl.sigma2)

    @classmethod
    def sparse(cls, model, t):
        nl = noise_level(t)
        var_z = nl.sigma2 + model.noise_sd ** 2 * nl.lam ** 2
        a_norm = operator_norm(model.dictionary, method="svd")
        return cls("sparse", math.sqrt(model.m) * a_norm * model.support_bound * nl.lam / var_z,
                   1 / var_z)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "shift": self.shift}


def truncate(spec: TruncationSpec, f_value, z):
    """Project the implied denoiser term onto the ball; rows are independent inputs."""
    f_value = np.asarray(f_value, dtype=np.float64)
    v = f_value + spec.shift * np.asarray(z, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(r > spec.radius, spec.radius / np.where(r > 0, r, 1.0), 1.0)
    return v * scale - spec.shift * np.asarray(z, dtype=np.float64)
