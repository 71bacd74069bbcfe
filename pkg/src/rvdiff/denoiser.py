"""Denoisers sharing one I/O contract.

A denoiser is called as ``model(x_t, condition, t)`` with ``x_t`` of shape
(H, W, 2), ``condition`` of shape (H, W, 4) and scalar ``t`` in [0, 1]. It
returns a :class:`DenoiserOutput` carrying the predicted noise and per-pixel
class logits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from rvdiff.codec import SemanticMap, SensorConfig
from rvdiff.errors import DomainError, FormatError, UsageError
from rvdiff.formats import atomic_write_bytes
from rvdiff.schedule import CosineSchedule


@dataclass(frozen=True)
class DenoiserOutput:
    eps_hat: np.ndarray  # (H, W, 2)
    sem_logits: np.ndarray  # (H, W, C)


class Denoiser(Protocol):
    num_classes: int

    def __call__(self, x_t: np.ndarray, condition: np.ndarray, t: float) -> DenoiserOutput: ...


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class OracleDenoiser:
    """Knows the clean scene, so its noise estimate is exact for any x_t."""

    def __init__(self, x0: np.ndarray, semantics: SemanticMap,
                 schedule: Optional[CosineSchedule] = None, logit_scale: float = 20.0):
        x0 = np.asarray(x0, dtype=np.float64)
        if np.any(np.abs(x0) > 1):
            raise DomainError("memorized scene must lie in [-1, 1]")
        if x0.shape[:2] != semantics.shape:
            raise UsageError("scene and semantics differ in shape")
        self.x0 = x0
        self.semantics = semantics
        self.schedule = schedule or CosineSchedule()
        self.logit_scale = logit_scale
        self.num_classes = semantics.num_classes
        self._logits = logit_scale * semantics.one_hot()

    def __call__(self, x_t, condition, t) -> DenoiserOutput:
        alpha, sigma = self.schedule.alpha_sigma(t)
        if sigma <= 0:
            raise DomainError("oracle undefined where sigma_t = 0")
        eps = (np.asarray(x_t, dtype=np.float64) - alpha * self.x0) / sigma
        return DenoiserOutput(eps, self._logits.copy())


# ---------------------------------------------------------------------------
# toy per-pixel network


def fourier_coords(sensor: SensorConfig, n_freq: int = 8) -> np.ndarray:
    """(H, W, 4 * n_freq) sin/cos features of azimuth and elevation."""
    az = sensor.column_azimuths()
    el = sensor.row_elevations()
    el = (el - sensor.elevation_min) / (sensor.elevation_max - sensor.elevation_min)
    el = el * 2.0 * math.pi - math.pi
    k = 2.0 ** np.arange(n_freq)
    fa = np.concatenate([np.sin(az[:, None] * k), np.cos(az[:, None] * k)], axis=1)
    fe = np.concatenate([np.sin(el[:, None] * k), np.cos(el[:, None] * k)], axis=1)
    h, w = sensor.shape
    return np.concatenate([np.broadcast_to(fe[:, None, :], (h, w, fe.shape[1])),
                           np.broadcast_to(fa[None, :, :], (h, w, fa.shape[1]))], axis=-1)


PARAM_ORDER = ("w1", "w2", "emb")


@dataclass
class ToyCache:
    inputs: np.ndarray  # (P, in)
    hidden: np.ndarray  # (P, hidden), post-tanh
    bucket: int
    shape: tuple


def toy_forward(params: dict, inputs: np.ndarray, bucket: int):
    """Per-pixel MLP. ``inputs`` is (P, in); returns ``(out (P, 2+C), cache)``."""
    w1, w2, emb = params["w1"], params["w2"], params["emb"]
    if inputs.shape[1] != w1.shape[1]:
        raise UsageError(f"input has {inputs.shape[1]} channels, network expects {w1.shape[1]}")
    h = np.tanh(inputs @ w1.T + emb[bucket])
    return h @ w2.T, ToyCache(inputs, h, bucket, ())


def toy_backward(params: dict, cache: ToyCache, upstream: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(out)."""
    w2 = params["w2"]
    d_w2 = upstream.T @ cache.hidden
    d_pre = (upstream @ w2) * (1.0 - cache.hidden**2)
    d_w1 = d_pre.T @ cache.inputs
    d_emb = np.zeros_like(params["emb"])
    d_emb[cache.bucket] = d_pre.sum(axis=0)
    return {"w1": d_w1, "w2": d_w2, "emb": d_emb}


class ToyDenoiser:
    """Two-layer per-pixel network with a learned embedding per time bucket.

    ``h = tanh(W1 [x_t, condition, coords] + emb[bucket(t)])`` and
    ``[eps_hat, logits] = W2 h``. There is no spatial mixing.
    """

    def __init__(self, num_classes: int, hidden: int = 16, n_buckets: int = 32,
                 sensor: Optional[SensorConfig] = None, fourier: bool = False,
                 seed: int = 0, params: Optional[dict] = None):
        if fourier and sensor is None:
            raise UsageError("Fourier coordinate features need a sensor")
        self.num_classes = num_classes
        self.hidden = hidden
        self.n_buckets = n_buckets
        self.sensor = sensor
        self.fourier = fourier
        self.seed = seed
        self.step = 0
        self._coords = fourier_coords(sensor) if fourier else None
        n_in = 2 + 4 + (self._coords.shape[-1] if fourier else 0)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "w1": rng.standard_normal((hidden, n_in)) / math.sqrt(n_in),
                "w2": 0.1 * rng.standard_normal((2 + num_classes, hidden)) / math.sqrt(hidden),
                "emb": 0.1 * rng.standard_normal((n_buckets, hidden)),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_ORDER}
        expect = {"w1": (hidden, n_in), "w2": (2 + num_classes, hidden), "emb": (n_buckets, hidden)}
        for k, shp in expect.items():
            if self.params[k].shape != shp:
                raise UsageError(f"parameter {k} has shape {self.params[k].shape}, expected {shp}")

    @property
    def n_inputs(self) -> int:
        return self.params["w1"].shape[1]

    def bucket(self, t: float) -> int:
        return min(int(t * self.n_buckets), self.n_buckets - 1)

    def _inputs(self, x_t, condition):
        x_t = np.asarray(x_t, dtype=np.float64)
        condition = np.asarray(condition, dtype=np.float64)
        if x_t.shape[-1] != 2 or condition.shape != (*x_t.shape[:2], 4):
            raise UsageError("expected x_t (H, W, 2) and condition (H, W, 4)")
        parts = [x_t, condition]
        if self._coords is not None:
            if self._coords.shape[:2] != x_t.shape[:2]:
                raise UsageError("input resolution does not match the sensor")
            parts.append(self._coords)
        feats = np.concatenate(parts, axis=-1)
        return feats.reshape(-1, feats.shape[-1])

    def forward(self, x_t, condition, t):
        """Output plus the cache needed by :meth:`backward`."""
        h, w = np.shape(x_t)[:2]
        out, cache = toy_forward(self.params, self._inputs(x_t, condition), self.bucket(t))
        cache.shape = (h, w)
        out = out.reshape(h, w, -1)
        return DenoiserOutput(out[..., :2], out[..., 2:]), cache

    def __call__(self, x_t, condition, t) -> DenoiserOutput:
        return self.forward(x_t, condition, t)[0]

    def backward(self, cache: ToyCache, d_eps: np.ndarray, d_logits: np.ndarray) -> dict:
        up = np.concatenate([d_eps, d_logits], axis=-1).reshape(-1, 2 + self.num_classes)
        return toy_backward(self.params, cache, up)

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "n_buckets": self.n_buckets,
            "fourier": self.fourier,
            "sensor": self.sensor.to_json() if self.sensor is not None else None,
        }


class Adam:
    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            self.params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints: uint32 header length | JSON header | float32 LE parameters

CKPT_FORMAT = "rvdiff-toy-v1"


def save_checkpoint(path, model: ToyDenoiser, extra: Optional[dict] = None) -> None:
    header = {
        "format": CKPT_FORMAT,
        "order": list(PARAM_ORDER),
        "shapes": {k: list(model.params[k].shape) for k in PARAM_ORDER},
        "seed": model.seed,
        "step": model.step,
        "model": model.config(),
    }
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(model.params[k], dtype="<f4").tobytes() for k in PARAM_ORDER)
    atomic_write_bytes(path, struct.pack("<I", len(hbytes)) + hbytes + body)


def load_checkpoint(path):
    """Return ``(ToyDenoiser, header)``."""
    data = Path(path).read_bytes()
    try:
        (n,) = struct.unpack_from("<I", data)
        header = json.loads(data[4:4 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format") != CKPT_FORMAT:
        raise FormatError(f"{path}: not an rvdiff checkpoint")
    body = data[4 + n:]
    expect = sum(int(np.prod(header["shapes"][k])) for k in header["order"])
    if len(body) != 4 * expect:
        raise FormatError(f"{path}: parameter payload is {len(body)} bytes, "
                          f"header implies {4 * expect}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    params, off = {}, 0
    for k in header["order"]:
        shp = tuple(header["shapes"][k])
        size = int(np.prod(shp))
        params[k] = flat[off:off + size].reshape(shp).copy()
        off += size
    cfg = header["model"]
    sensor = SensorConfig(**cfg["sensor"]) if cfg.get("sensor") else None
    model = ToyDenoiser(cfg["num_classes"], cfg["hidden"], cfg["n_buckets"], sensor,
                        cfg["fourier"], header["seed"], params)
    model.step = header["step"]
    return model, header
