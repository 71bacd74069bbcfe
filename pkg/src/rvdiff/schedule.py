"""Continuous-time variance-preserving noise schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rvdiff.errors import UsageError


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine schedule parameterized by log-SNR.

    ``logsnr(t) = -2 log tan(pi t / 2)``, clipped so that alpha stays in
    ``[clamp, 1 - clamp]``. Then ``alpha^2 = sigmoid(logsnr)`` and
    ``sigma^2 = sigmoid(-logsnr)``.
    """

    clamp: float = 1e-4
    kind: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.clamp < 0.5:
            raise UsageError("schedule clamp must lie in (0, 0.5)")

    @property
    def logsnr_max(self) -> float:
        return _logit((1.0 - self.clamp) ** 2)

    @property
    def logsnr_min(self) -> float:
        return _logit(self.clamp**2)

    def logsnr(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            lam = -2.0 * np.log(np.tan(0.5 * math.pi * t))
        return np.clip(lam, self.logsnr_min, self.logsnr_max)

    def alpha_sigma(self, t):
        """(alpha_t, sigma_t); scalars in, floats out."""
        lam = self.logsnr(t)
        alpha = np.sqrt(1.0 / (1.0 + np.exp(-lam)))
        sigma = np.sqrt(1.0 / (1.0 + np.exp(lam)))
        if alpha.ndim == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def to_json(self) -> dict:
        return {"kind": self.kind, "clamp": self.clamp}
