"""Denoising score matching over ReLU ResNets with hand-written backpropagation.

The empirical risk at time ``t`` is::

    R(W) = 1/(n d) sum_i || g_i / sigma_t + P_t[ResN_W](lambda_t x_i + sigma_t g_i) ||^2

with an optional ball truncation ``P_t``. It is minimized by plain gradient
descent with a post-step rescaling onto ``|||W||| <= B``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from vidiff import rng as _rng
from vidiff.errors import Divergence, GradientCheck, ParameterRange, ShapeMismatch
from vidiff.schedule import noise_level
from vidiff.unroll import ResNetWeights, TruncationSpec, operator_norm

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
GRAD_CHECK_TOL = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    steps: int = 1000
    batch: int | None = None  # None: full batch
    bound: float = 50.0
    truncate: bool = True
    seed: int = 0
    init_scale: float = 1.0
    grad_check: bool = True
    norm_method: str = "svd"

    def __post_init__(self):
        if not (self.lr > 0 and self.bound > 0 and self.init_scale > 0):
            raise ParameterRange("lr, bound and init_scale must be positive")
        if self.steps < 0 or (self.batch is not None and self.batch <= 0):
            raise ParameterRange("steps must be >= 0 and batch positive")


@dataclass(frozen=True)
class Batch:
    """Clean points ``x``, frozen noise ``g`` and optional conditioning ``theta``."""

    x: np.ndarray
    g: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape != self.g.shape or self.x.shape[0] == 0:
            raise ShapeMismatch("x and g must be nonempty and of equal shape")

    def take(self, idx):
        return Batch(self.x[idx], self.g[idx], None if self.theta is None else self.theta[idx])


def _inputs(weights, z, theta):
    parts = [z]
    if weights.m:
        if theta is None or theta.shape[1] != weights.m:
            raise ShapeMismatch(f"theta of length {weights.m} required")
        parts.append(theta)
    parts.append(np.ones((z.shape[0], 1)))
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != weights.w_in.shape[1]:
        raise ShapeMismatch("input length does not match W_in")
    return x


def _forward(weights, batch: Batch, t, spec):
    nl = noise_level(t)
    z = nl.lam * batch.x + nl.sigma * batch.g
    inp = _inputs(weights, z, batch.theta)
    us, pres = [inp @ weights.w_in.T], []
    for a, b in zip(weights.w1, weights.w2):
        pre = us[-1] @ b.T
        pres.append(pre)
        us.append(us[-1] + np.maximum(pre, 0.0) @ a.T)
    f = us[-1] @ weights.w_out.T
    if spec is not None:
        v = f + spec.shift * z
        r = np.linalg.norm(v, axis=1)
        out = np.where((r > spec.radius)[:, None],
                       v * (spec.radius / np.where(r > 0, r, 1.0))[:, None], v) - spec.shift * z
    else:
        v = r = None
        out = f
    resid = batch.g / nl.sigma + out
    return dict(inp=inp, us=us, pres=pres, v=v, r=r, resid=resid)


def erm_loss(weights: ResNetWeights, batch: Batch, t, spec: TruncationSpec | None = None):
    """Mean over the batch of ``||g/sigma_t + P_t[ResN](z)||^2``, divided by ``d``."""
    res = _forward(weights, batch, t, spec)["resid"]
    return float(np.sum(res ** 2) / (res.shape[0] * res.shape[1]))


def per_sample_loss(weights, batch, t, spec=None):
    res = _forward(weights, batch, t, spec)["resid"]
    return np.sum(res ** 2, axis=1)


def erm_grad(weights: ResNetWeights, batch: Batch, t, spec: TruncationSpec | None = None):
    """Gradient of :func:`erm_loss`, returned as weights of the same shapes.

    Outside the ball the projection has Jacobian ``(R/r)(I - v v^T / r^2)``;
    on or inside the ball it is the identity.
    """
    return loss_and_grad(weights, batch, t, spec)[1]


def loss_and_grad(weights, batch, t, spec=None):
    st = _forward(weights, batch, t, spec)
    n, d = st["resid"].shape
    loss = float(np.sum(st["resid"] ** 2) / (n * d))
    dout = 2.0 * st["resid"] / (n * d)
    if spec is not None:
        v, r = st["v"], st["r"]
        out_ball = r > spec.radius
        if out_ball.any():
            vo, ro, go = v[out_ball], r[out_ball][:, None], dout[out_ball]
            vhat = vo / ro
            dout = dout.copy()
            dout[out_ball] = (spec.radius / ro) * (go - vhat * np.sum(vhat * go, axis=1, keepdims=True))
    us, pres = st["us"], st["pres"]
    g_out = dout.T @ us[-1]
    du = dout @ weights.w_out
    g1, g2 = [None] * weights.L, [None] * weights.L
    for l in range(weights.L - 1, -1, -1):
        h = np.maximum(pres[l], 0.0)
        g1[l] = du.T @ h
        dpre = (du @ weights.w1[l]) * (pres[l] > 0)
        g2[l] = dpre.T @ us[l]
        du = du + dpre @ weights.w2[l]
    g_in = du.T @ st["inp"]
    return loss, ResNetWeights(g_in, tuple(g1), tuple(g2), g_out, dict(weights.header))


def smooth_rows(weights, batch, t, spec=None, margin=1e-3):
    """Indices of rows whose loss is smooth within ``margin`` of ``weights``:
    no ReLU pre-activation and no truncation radius lies that close."""
    st = _forward(weights, batch, t, spec)
    keep = np.ones(batch.x.shape[0], dtype=bool)
    for pre in st["pres"]:
        keep &= np.min(np.abs(pre), axis=1, initial=np.inf) >= margin
    if spec is not None:
        keep &= np.abs(st["r"] - spec.radius) >= margin * spec.radius
    return np.flatnonzero(keep)


def finite_difference_check(weights, batch, t, spec=None, n_coords=20, h=1e-5, seed=0):
    """Largest relative error of :func:`erm_grad` against central differences
    at ``n_coords`` random weight coordinates.

    Rows sitting next to a ReLU kink or the truncation sphere are dropped
    first, since a step of ``h`` could cross the kink there. The denominator is
    floored at ``1e-3 * max|grad|`` so entries at round-off scale do not count.
    """
    rows = smooth_rows(weights, batch, t, spec)
    if rows.size:
        batch = batch.take(rows)
    gen = _rng.stream(seed, 7)
    mats = [m.copy() for m in weights.matrices()]
    grads = erm_grad(weights, batch, t, spec).matrices()
    sizes = np.array([m.size for m in mats])
    floor = max(1e-3 * max(float(np.max(np.abs(g))) for g in grads), 1e-12)
    worst = 0.0
    for _ in range(n_coords):
        which = int(gen.choice(len(mats), p=sizes / sizes.sum()))
        idx = np.unravel_index(int(gen.integers(mats[which].size)), mats[which].shape)
        base = mats[which][idx]
        mats[which][idx] = base + h
        up = erm_loss(weights.with_matrices(mats), batch, t, spec)
        mats[which][idx] = base - h
        down = erm_loss(weights.with_matrices(mats), batch, t, spec)
        mats[which][idx] = base
        fd = (up - down) / (2 * h)
        an = grads[which][idx]
        scale = max(abs(fd), abs(an), floor)
        worst = max(worst, abs(fd - an) / scale)
    return worst


def project_norm(weights: ResNetWeights, bound, method="svd"):
    """Rescale each term of ``|||W|||`` that exceeds ``bound`` down to ``bound``."""
    w_in, w_out = weights.w_in, weights.w_out
    n_in = operator_norm(w_in, method=method)
    if n_in > bound:
        w_in = w_in * (bound / n_in)
    n_out = operator_norm(w_out, method=method)
    if n_out > bound:
        w_out = w_out * (bound / n_out)
    w1, w2 = list(weights.w1), list(weights.w2)
    for l, (a, b) in enumerate(zip(w1, w2)):
        s = operator_norm(a, method=method) + operator_norm(b, method=method)
        if s > bound:
            w1[l], w2[l] = a * (bound / s), b * (bound / s)
    return ResNetWeights(w_in, tuple(w1), tuple(w2), w_out, dict(weights.header))


def init_weights(d, n_inputs, D, L, M, scale, seed, m=0):
    """IID ``Uniform(-1, 1) * scale / sqrt(D)`` entries from stream ``(seed, 2)``."""
    gen = _rng.stream(seed, 2)
    c = scale / math.sqrt(D)

    def u(*shape):
        return gen.uniform(-1.0, 1.0, size=shape) * c

    w_in = u(D, n_inputs + 1)
    w1 = tuple(u(D, M) for _ in range(L))
    w2 = tuple(u(M, D) for _ in range(L))
    return ResNetWeights(w_in, w1, w2, u(d, D), {"m": m})


def make_batch(x, seed, theta=None):
    """Freeze the noise: ``g`` is drawn once from stream ``(seed, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    g = _rng.stream(seed, 1).standard_normal(x.shape)
    return Batch(x, g, None if theta is None else np.asarray(theta, dtype=np.float64))


@dataclass
class TrainResult:
    weights: ResNetWeights
    losses: list
    grad_check_error: float | None

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(float(v))])


def train_score(data: Batch, t, dims, config: TrainConfig, init: ResNetWeights | None = None,
                spec: TruncationSpec | None = None) -> TrainResult:
    """Gradient descent on the empirical risk from ``init`` or a random start.

    ``dims = (D, L, M)``. ``spec`` is the truncation used when
    ``config.truncate`` is set (defaults to the Ising ball for ``d``).
    """
    d = data.x.shape[1]
    m = 0 if data.theta is None else data.theta.shape[1]
    if config.truncate and spec is None:
        spec = TruncationSpec.ising(d, t)
    if not config.truncate:
        spec = None
    if init is None:
        D, L, M = dims
        weights = init_weights(d, d + m, D, L, M, config.init_scale, config.seed, m)
    else:
        weights = init
    weights = ResNetWeights(weights.w_in, weights.w1, weights.w2, weights.w_out,
                            {**weights.header, "t": float(t), "B": config.bound, "m": m,
                             "kind": "trained"})
    weights.header.pop("ones", None)
    check = None
    if config.grad_check:
        probe = data.take(np.arange(min(64, data.x.shape[0])))
        check = finite_difference_check(weights, probe, t, spec, seed=config.seed)
        if check > GRAD_CHECK_TOL:
            raise GradientCheck(f"gradient check failed: relative error {check:.3g}")
    gen = _rng.stream(config.seed, 3)
    n = data.x.shape[0]
    losses = []
    for step in range(config.steps):
        batch = data if config.batch is None or config.batch >= n else \
            data.take(gen.choice(n, size=config.batch, replace=False))
        loss, grad = loss_and_grad(weights, batch, t, spec)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise Divergence(f"loss {loss:.4g} at step {step}")
        losses.append(loss)
        mats = [w - config.lr * g for w, g in zip(weights.matrices(), grad.matrices())]
        weights = project_norm(weights.with_matrices(mats), config.bound, config.norm_method)
    if config.steps:
        losses.append(erm_loss(weights, data, t, spec))
    return TrainResult(weights, losses, check)
