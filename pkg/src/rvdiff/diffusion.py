"""Training and sampling for the joint scene/semantics diffusion model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from rvdiff.codec import (
    Palette, RangeScene, SemanticMap, SensorConfig, encode_condition, zero_condition,
)
from rvdiff.denoiser import Adam, Denoiser, ToyDenoiser, log_softmax, softmax
from rvdiff.errors import UsageError
from rvdiff.modes import Mode
from rvdiff.schedule import CosineSchedule
from rvdiff.semantic_loop import (
    ControllerState, EmaTrace, LoopConfig, confidence_fraction, controller_step, ema_update,
)


def forward_noise(x0, t, eps, sched: CosineSchedule) -> np.ndarray:
    """x_t = alpha_t * x0 + sigma_t * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise UsageError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    alpha, sigma = sched.alpha_sigma(t)
    return alpha * x0 + sigma * eps


# ---------------------------------------------------------------------------
# losses


def _mse(eps_hat, eps):
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise UsageError(f"shape mismatch: {eps_hat.shape} vs {eps.shape}")
    return float(np.mean((eps_hat - eps) ** 2))


def _cross_entropy(logits, y):
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    if logits.shape[:-1] != y.shape:
        raise UsageError("logits and labels differ in spatial shape")
    if np.any(y < 0) or np.any(y >= logits.shape[-1]):
        raise UsageError("label outside the logit range")
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, y[..., None], axis=-1)
    return float(-np.mean(picked))


def loss_unconditional(eps_hat, eps, y_hat_logits, y):
    """``(total, noise_part, sem_part)``: MSE plus mean per-pixel cross-entropy (nats)."""
    noise = _mse(eps_hat, eps)
    sem = _cross_entropy(y_hat_logits, y)
    return noise + sem, noise, sem


def loss_conditional(eps_hat, eps) -> float:
    return _mse(eps_hat, eps)


def loss_gradients(out, eps, y, mode: Mode):
    """dL/d(eps_hat) and dL/d(logits) for the loss of ``mode``."""
    d_eps = 2.0 * (out.eps_hat - eps) / eps.size
    d_logits = np.zeros_like(out.sem_logits)
    if mode is Mode.UNCONDITIONAL:
        onehot = np.eye(out.sem_logits.shape[-1])[y]
        d_logits = (softmax(out.sem_logits) - onehot) / y.size
    return d_eps, d_logits


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    cond_ratio: float = 0.5
    learning_rate: float = 1e-4
    steps: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    unlabeled_fraction: float = 0.0
    hidden: int = 16
    n_buckets: int = 32
    fourier: bool = False

    def __post_init__(self):
        if not 0.0 <= self.cond_ratio <= 1.0:
            raise UsageError("cond_ratio must lie in [0, 1]")
        if not 0.0 <= self.unlabeled_fraction <= 1.0:
            raise UsageError("unlabeled_fraction must lie in [0, 1]")
        if self.steps < 0 or self.learning_rate <= 0:
            raise UsageError("steps must be >= 0 and learning_rate > 0")


@dataclass(frozen=True)
class TrainSample:
    x0: np.ndarray  # (H, W, 2)
    semantics: Optional[SemanticMap] = None


@dataclass(frozen=True)
class StepResult:
    mode: Mode
    loss: float
    noise_loss: float
    sem_loss: float
    t: float
    psi: float

    def to_json(self, step: int) -> dict:
        a, b = self.mode.switches
        return {"step": step, "mode": self.mode.label, "a": a, "b": b, "t": self.t,
                "psi": self.psi, "loss": self.loss, "noise_loss": self.noise_loss,
                "sem_loss": self.sem_loss}


def choose_mode(psi: float, cond_ratio: float, labeled: bool) -> Mode:
    if not labeled:
        return Mode.NON_LABELED
    return Mode.CONDITIONAL if psi <= cond_ratio else Mode.UNCONDITIONAL


def training_step(sample: TrainSample, model: ToyDenoiser, optimizer: Adam,
                  config: TrainConfig, rng: np.random.Generator,
                  sched: Optional[CosineSchedule] = None,
                  force_mode: Optional[Mode] = None) -> StepResult:
    """One optimizer update in a mode drawn from psi ~ U(0, 1)."""
    sched = sched or CosineSchedule()
    labeled = sample.semantics is not None
    psi = float(rng.random())
    t = float(rng.random())
    eps = rng.standard_normal(sample.x0.shape)
    mode = choose_mode(psi, config.cond_ratio, labeled)
    if force_mode is not None:
        if force_mode is not Mode.NON_LABELED and not labeled:
            raise UsageError(f"{force_mode.label} mode needs a labeled sample")
        mode = force_mode

    shape = sample.x0.shape[:2]
    if mode is Mode.CONDITIONAL:
        cond = encode_condition(sample.semantics, True).channels
    else:
        cond = zero_condition(shape).channels
    x_t = forward_noise(sample.x0, t, eps, sched)
    out, cache = model.forward(x_t, cond, t)

    if mode is Mode.UNCONDITIONAL:
        y = sample.semantics.class_ids
        total, noise, sem = loss_unconditional(out.eps_hat, eps, out.sem_logits, y)
    else:
        y = None
        noise = loss_conditional(out.eps_hat, eps)
        total, sem = noise, 0.0
    d_eps, d_logits = loss_gradients(out, eps, y, mode)
    optimizer.step(model.backward(cache, d_eps, d_logits))
    model.step += 1
    return StepResult(mode, total, noise, sem, t, psi)


def probe_loss(model: Denoiser, samples: Sequence[TrainSample], sched=None,
               n_t: int = 8, seed: int = 12345, conditional: bool = False) -> dict:
    """Loss on a fixed grid of t and fixed noise, for before/after comparisons.

    Labeled samples score the unconditional loss (or the conditional one
    when ``conditional``); unlabeled samples score the noise MSE.
    """
    sched = sched or CosineSchedule()
    rng = np.random.default_rng(seed)
    ts = (np.arange(n_t) + 0.5) / n_t
    totals, noises, sems = [], [], []
    for s in samples:
        for t in ts:
            eps = rng.standard_normal(s.x0.shape)
            x_t = forward_noise(s.x0, t, eps, sched)
            if conditional and s.semantics is not None:
                cond = encode_condition(s.semantics, True).channels
            else:
                cond = zero_condition(s.x0.shape[:2]).channels
            out = model(x_t, cond, float(t))
            if s.semantics is not None and not conditional:
                tot, n, se = loss_unconditional(out.eps_hat, eps, out.sem_logits,
                                                s.semantics.class_ids)
            else:
                n = loss_conditional(out.eps_hat, eps)
                tot, se = n, 0.0
            totals.append(tot)
            noises.append(n)
            sems.append(se)
    return {"total": float(np.mean(totals)), "noise": float(np.mean(noises)),
            "sem": float(np.mean(sems))}


def train(samples: Sequence[TrainSample], model: ToyDenoiser, config: TrainConfig,
          sched: Optional[CosineSchedule] = None,
          on_step: Optional[Callable[[int, StepResult], None]] = None) -> list:
    """Run ``config.steps`` updates, picking a sample uniformly each step."""
    if not samples:
        raise UsageError("training corpus is empty")
    sched = sched or CosineSchedule()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    results = []
    for step in range(config.steps):
        sample = samples[int(rng.integers(len(samples)))] if len(samples) > 1 else samples[0]
        res = training_step(sample, model, opt, config, rng, sched)
        results.append(res)
        if on_step is not None:
            on_step(step, res)
    return results


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 256
    method: str = "deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise UsageError("nfe must be >= 1")
        if self.method not in ("deterministic", "ancestral"):
            raise UsageError(f"unknown sampler method {self.method!r}")

    def to_json(self) -> dict:
        return {"nfe": self.nfe, "method": self.method, "seed": self.seed}


def sample_step(x_t, t_hi: float, t_lo: float, eps_hat, eta, sched: CosineSchedule,
                method: str = "deterministic") -> np.ndarray:
    """Move from time ``t_hi`` to ``t_lo`` given the model's noise estimate.

    The clean estimate ``(x_t - sigma eps_hat) / alpha`` is clamped to
    [-1, 1]. Stepping to ``t_lo == 0`` returns it directly. Otherwise
    ``deterministic`` takes a DDIM step and ``ancestral`` draws from the DDPM
    posterior, with ``eta`` as its standard normal noise.
    """
    if not 0.0 <= t_lo < t_hi <= 1.0:
        raise UsageError(f"need 0 <= t_lo < t_hi <= 1, got {t_lo}, {t_hi}")
    x_t = np.asarray(x_t, dtype=np.float64)
    a_t, s_t = sched.alpha_sigma(t_hi)
    x0_hat = np.clip((x_t - s_t * eps_hat) / a_t, -1.0, 1.0)
    if t_lo == 0.0:
        return x0_hat
    a_s, s_s = sched.alpha_sigma(t_lo)
    if method == "deterministic":
        eps_c = (x_t - a_t * x0_hat) / s_t
        return a_s * x0_hat + s_s * eps_c
    if method != "ancestral":
        raise UsageError(f"unknown sampler method {method!r}")
    a_ts = a_t / a_s
    var_ts = max(s_t**2 - a_ts**2 * s_s**2, 0.0)
    mean = (a_ts * s_s**2 / s_t**2) * x_t + (a_s * var_ts / s_t**2) * x0_hat
    if eta is None:
        return mean
    return mean + np.sqrt(var_ts * s_s**2 / s_t**2) * np.asarray(eta, dtype=np.float64)


@dataclass
class Generation:
    scene: RangeScene
    semantics: SemanticMap
    trace: list = field(default_factory=list)
    x: Optional[np.ndarray] = None


def time_grid(nfe: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, nfe + 1)


def generate(denoiser: Denoiser, sensor: SensorConfig, palette: Palette,
             sampler: SamplerConfig, loop: LoopConfig,
             rng: Optional[np.random.Generator] = None,
             sched: Optional[CosineSchedule] = None) -> Generation:
    """Sample a scene and its smoothed semantic map with closed-loop conditioning."""
    if denoiser.num_classes != palette.num_classes:
        raise UsageError(f"denoiser predicts {denoiser.num_classes} classes, "
                         f"palette has {palette.num_classes}")
    sched = sched or CosineSchedule()
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    shape = sensor.shape
    x = rng.standard_normal((*shape, 2))
    ts = time_grid(sampler.nfe)
    trace = EmaTrace(loop.alpha)
    state = ControllerState()
    zero = zero_condition(shape).channels
    records = []
    for k in range(sampler.nfe):
        t_hi, t_lo = float(ts[k]), float(ts[k + 1])
        state, mode = controller_step(state, trace, loop)
        if mode is Mode.UNCONDITIONAL:
            out = denoiser(x, zero, t_hi)
            trace = ema_update(trace, softmax(out.sem_logits))
        else:
            cond = encode_condition(SemanticMap(trace.argmax(), palette), True).channels
            out = denoiser(x, cond, t_hi)
        eta = None
        if sampler.method == "ancestral" and t_lo > 0.0:
            eta = rng.standard_normal(x.shape)
        x = sample_step(x, t_hi, t_lo, out.eps_hat, eta, sched, sampler.method)
        records.append({
            "step": k,
            "t": t_hi,
            "mode": mode.label,
            "triggered": state.triggered,
            "fraction": confidence_fraction(trace, loop.confidence_threshold),
        })
    scene = RangeScene.from_tensor(x, sensor)
    return Generation(scene, SemanticMap(trace.argmax(), palette), records, x)
