"""Noise levels of the OU forward process and reverse-time grids."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from vidiff.errors import NonpositiveTime, ParameterRange


@dataclass(frozen=True)
class NoiseLevel:
    t: float
    lam: float
    sigma2: float

    @property
    def sigma(self):
        return math.sqrt(self.sigma2)

    @property
    def snr(self):
        """``lambda_t^2 / sigma_t^2``."""
        return self.lam ** 2 / self.sigma2


def noise_level(t) -> NoiseLevel:
    """``(lambda_t, sigma_t^2) = (exp(-t), 1 - exp(-2t))``."""
    t = float(t)
    if not t > 0:
        raise NonpositiveTime(f"t must be positive, got {t}")
    return NoiseLevel(t, math.exp(-t), -math.expm1(-2.0 * t))


@dataclass(frozen=True)
class TimeGrid:
    """Forward-time grid ``0 = t_0 < ... < t_N = T - delta``.

    ``kind`` is ``"two-phase"`` or ``"uniform"``. For the uniform grid
    ``kappa`` is the common step and ``n0`` equals ``n``.
    """

    kind: str
    kappa: float
    n0: int
    n: int
    T: float
    delta: float
    times: tuple
    gaps: tuple

    def __post_init__(self):
        self.validate()

    def validate(self, tol=1e-12):
        times = np.asarray(self.times)
        gaps = np.asarray(self.gaps)
        if times.size != self.n + 1 or gaps.size != self.n:
            raise ParameterRange("grid has inconsistent lengths")
        if times[0] != 0.0:
            raise ParameterRange("grid must start at t_0 = 0")
        if np.any(np.abs(np.diff(times) - gaps) > tol):
            raise ParameterRange("gaps disagree with consecutive time differences")
        if abs(gaps.sum() - times[-1]) > tol:
            raise ParameterRange("gaps do not sum to t_N")
        if abs(times[-1] - (self.T - self.delta)) > tol:
            raise ParameterRange("t_N != T - delta")
        if np.any(gaps <= 0) or np.any(np.diff(times) <= 0):
            raise ParameterRange("grid times must strictly increase")
        if self.kind == "two-phase":
            k = self.kappa
            if abs(times[self.n0] - (self.T - 1.0)) > tol:
                raise ParameterRange("t_N0 != T - 1")
            if abs(self.delta - (1 + k) ** (self.n0 - self.n)) > tol:
                raise ParameterRange("delta != (1 + kappa)^(N0 - N)")
            room = k * np.minimum(1.0, self.T - times[1:])
            if np.any(gaps > room + tol):
                raise ParameterRange("gamma_k > kappa * min(1, T - t_{k+1})")

    @property
    def reverse_times(self):
        """Times ``T - t_k`` at which the sampler queries the score, k < N."""
        return tuple(self.T - t for t in self.times[:-1])

    def to_dict(self):
        return {
            "kind": self.kind, "kappa": self.kappa, "n0": self.n0, "n": self.n,
            "T": self.T, "delta": self.delta,
            "times": list(self.times), "gaps": list(self.gaps),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["kind"], doc["kappa"], doc["n0"], doc["n"], doc["T"],
                   doc["delta"], tuple(doc["times"]), tuple(doc["gaps"]))


def two_phase_grid(kappa, n0, n) -> TimeGrid:
    """Uniform steps of length ``kappa`` then geometrically shrinking steps.

    ``T = n0 * kappa + 1`` and ``delta = (1 + kappa)^(n0 - n)``.
    """
    if not 0 < kappa < 1:
        raise ParameterRange(f"kappa must lie in (0, 1), got {kappa}")
    if not (int(n0) == n0 and int(n) == n and 0 < n0 < n):
        raise ParameterRange(f"need integers 0 < n0 < n, got n0={n0}, n={n}")
    n0, n = int(n0), int(n)
    T = n0 * kappa + 1.0
    times = [k * kappa for k in range(n0 + 1)]
    times += [T - (1 + kappa) ** (-k) for k in range(1, n - n0 + 1)]
    gaps = [kappa] * n0
    gaps += [kappa / (1 + kappa) ** (k + 1) for k in range(n - n0)]
    return TimeGrid("two-phase", float(kappa), n0, n, T,
                    (1 + kappa) ** (n0 - n), tuple(times), tuple(gaps))


def two_phase_for_delta(kappa, horizon, delta):
    """Two-phase grid with ``T`` and ``delta`` as close as possible to targets.

    ``n0 = round((horizon - 1) / kappa)`` and ``n - n0`` is the integer nearest
    to ``log(1/delta) / log(1 + kappa)``.
    """
    n0 = max(1, int(round((horizon - 1.0) / kappa)))
    tail = max(1, int(round(math.log(1.0 / delta) / math.log1p(kappa))))
    return two_phase_grid(kappa, n0, n0 + tail)


def uniform_grid(T, n, delta) -> TimeGrid:
    """``n`` equal steps from 0 to ``T - delta``; for discretization ablations."""
    if not (T > 0 and 0 < delta < T and int(n) == n and n > 0):
        raise ParameterRange("need T > delta > 0 and a positive integer n")
    n = int(n)
    step = (T - delta) / n
    times = tuple(k * step for k in range(n)) + (T - delta,)
    gaps = tuple(np.diff(times))
    return TimeGrid("uniform", step, n, n, float(T), float(delta), times, gaps)
