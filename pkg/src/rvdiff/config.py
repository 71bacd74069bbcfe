"""Run configuration: one JSON document with per-section defaults and overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from rvdiff.codec import SENSOR_PROFILES, Palette, SensorConfig, load_palette
from rvdiff.diffusion import SamplerConfig, TrainConfig
from rvdiff.errors import UsageError
from rvdiff.metrics import MetricsConfig
from rvdiff.schedule import CosineSchedule
from rvdiff.semantic_loop import LoopConfig
from rvdiff.synth import WorldSpec

DEFAULTS = {
    "sensor": {"profile": "desk"},
    "schedule": {"kind": "cosine", "clamp": 1e-4},
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)},
    "sampler": {f.name: f.default for f in dataclasses.fields(SamplerConfig)},
    "loop": {f.name: f.default for f in dataclasses.fields(LoopConfig)},
    "metrics": {"bev_bounds": [-50.0, 50.0, -50.0, 50.0], "bev_bins": 16,
                "feature_bins": 32, "psd_tol": 1e-8},
    "synth": {"n": 8, "seed": 0, "shift": 2.0, "scale": 0.1, "world": None},
    "palette": None,
}

SENSOR_KEYS = {"profile"} | {f.name for f in dataclasses.fields(SensorConfig)}


@dataclass(frozen=True)
class RunConfig:
    sensor: SensorConfig
    schedule: CosineSchedule
    train: TrainConfig
    sampler: SamplerConfig
    loop: LoopConfig
    metrics: MetricsConfig
    synth: dict
    world: WorldSpec
    palette: Palette
    raw: dict

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    allowed = SENSOR_KEYS if path == "sensor." else set(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in allowed:
            raise UsageError(f"unknown config key {where!r}")
        if key not in base:
            out[key] = copy.deepcopy(val)
        elif isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    """Turn ``["train.steps=10", ...]`` into a nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {item!r} conflicts with another override")
        node[parts[-1]] = _parse_value(val)
    return out


def _sensor_from(d: dict) -> SensorConfig:
    unknown = set(d) - SENSOR_KEYS
    if unknown:
        raise UsageError(f"unknown sensor keys: {sorted(unknown)}")
    fields = dict(d)
    profile = fields.pop("profile", None)
    if profile is not None:
        if profile not in SENSOR_PROFILES:
            raise UsageError(f"unknown sensor profile {profile!r}; "
                             f"choose from {sorted(SENSOR_PROFILES)}")
        base = SENSOR_PROFILES[profile].to_json()
        base.update(fields)
        fields = base
    try:
        return SensorConfig(**fields)
    except TypeError as exc:
        raise UsageError(f"sensor config: {exc}") from exc


def build(raw: dict) -> RunConfig:
    try:
        if raw["schedule"]["kind"] != "cosine":
            raise UsageError(f"unsupported schedule kind {raw['schedule']['kind']!r}")
        world = WorldSpec.from_json(raw["synth"]["world"]) if raw["synth"]["world"] else WorldSpec()
        m = raw["metrics"]
        return RunConfig(
            sensor=_sensor_from(raw["sensor"]),
            schedule=CosineSchedule(clamp=float(raw["schedule"]["clamp"])),
            train=TrainConfig(**raw["train"]),
            sampler=SamplerConfig(**raw["sampler"]),
            loop=LoopConfig(**raw["loop"]),
            metrics=MetricsConfig(tuple(float(v) for v in m["bev_bounds"]), int(m["bev_bins"]),
                                  int(m["feature_bins"]), float(m["psd_tol"])),
            synth=raw["synth"],
            world=world,
            palette=load_palette(raw["palette"]),
            raw=raw,
        )
    except (TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def load_config(path: Optional[str | Path] = None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``--set`` style overrides."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        raw = _merge(raw, data)
    if overrides:
        raw = _merge(raw, parse_overrides(overrides))
    return build(raw)
