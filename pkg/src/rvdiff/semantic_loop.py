"""Progressive semantic smoothing and the confidence-gated mode controller."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from rvdiff.errors import UsageError
from rvdiff.modes import Mode


@dataclass(frozen=True)
class LoopConfig:
    confidence_threshold: float = 0.8
    closed_loop_enabled: bool = True
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise UsageError("confidence_threshold must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError("alpha must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"confidence_threshold": self.confidence_threshold,
                "closed_loop_enabled": self.closed_loop_enabled, "alpha": self.alpha}


@dataclass(frozen=True)
class EmaTrace:
    """Smoothed per-pixel class probabilities, shape (H, W, C)."""

    alpha: float
    probs: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.probs is not None

    def argmax(self) -> np.ndarray:
        if self.probs is None:
            raise UsageError("EMA trace is not initialized")
        return np.argmax(self.probs, axis=-1)


def ema_update(trace: EmaTrace, y_hat_probs: np.ndarray) -> EmaTrace:
    """First call copies ``y_hat_probs``; later calls blend ``alpha*new + (1-alpha)*old``."""
    y = np.asarray(y_hat_probs, dtype=np.float64)
    if trace.probs is None:
        return EmaTrace(trace.alpha, y.copy())
    if y.shape != trace.probs.shape:
        raise UsageError(f"shape mismatch: {y.shape} vs {trace.probs.shape}")
    a = trace.alpha
    return EmaTrace(a, a * y + (1.0 - a) * trace.probs)


def confidence_fraction(trace: EmaTrace, delta: float) -> float:
    """Share of pixels whose top class probability is strictly above ``delta``."""
    if trace.probs is None:
        raise UsageError("EMA trace is not initialized")
    conf = trace.probs.max(axis=-1)
    return float(np.count_nonzero(conf > delta)) / conf.size


@dataclass(frozen=True)
class ControllerState:
    triggered: bool = False
    next_mode: Mode = Mode.UNCONDITIONAL


def controller_step(state: ControllerState, trace: EmaTrace, config: LoopConfig):
    """Pick the mode for the next sampling step.

    Untriggered runs stay unconditional until more than ``delta`` of the
    pixels are more than ``delta`` confident; that step is conditional and
    modes then alternate for the rest of the run.
    """
    if not state.triggered:
        delta = config.confidence_threshold
        if (config.closed_loop_enabled and trace.initialized
                and confidence_fraction(trace, delta) > delta):
            return ControllerState(True, Mode.UNCONDITIONAL), Mode.CONDITIONAL
        return state, Mode.UNCONDITIONAL
    mode = state.next_mode
    nxt = Mode.UNCONDITIONAL if mode is Mode.CONDITIONAL else Mode.CONDITIONAL
    return ControllerState(True, nxt), mode
