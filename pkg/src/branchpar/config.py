"""Flat key-value run configuration.

Files hold ``section.key = value`` lines, one per line, with ``#``
comments. Sections are ``model`` (stack dims), ``layout`` (rank grid),
``device`` (cost-model constants) and ``run`` (seed, precision, step
count). Unknown or repeated keys are rejected rather than ignored so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .costmodel import DeviceModel
from .errors import ConfigError
from .evoformer import EvoConfig
from .schedules import ParallelLayout

_MODEL_INT_KEYS = ("s", "r", "c_m", "c_z", "h", "c_opm", "t_factor", "n_blocks")
_REQUIRED_MODEL_KEYS = ("s", "r", "c_m", "c_z", "h")
_LAYOUT_KEYS = ("dp", "bp", "dap")
_DEVICE_KEYS = ("compute_rate", "link_bandwidth", "link_latency",
                "launch_overhead", "non_evoformer_time", "recycle_factor",
                "bwd_flop_factor")
_PRECISIONS = ("f64", "f32")


@dataclass(frozen=True)
class RunConfig:
    model: EvoConfig
    layout: ParallelLayout
    device: DeviceModel
    seed: int = 32
    precision: str = "f64"
    steps: int = 10

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def with_overrides(self, seed=None, precision=None) -> "RunConfig":
        out = self
        if seed is not None:
            out = dataclasses.replace(out, seed=seed)
        if precision is not None:
            out = dataclasses.replace(out, precision=precision)
        if out.precision not in _PRECISIONS:
            raise ConfigError(f"precision must be one of {_PRECISIONS}, "
                              f"got {out.precision!r}")
        width = 4 if out.precision == "f32" else 8
        return dataclasses.replace(
            out, device=dataclasses.replace(out.device, precision_bytes=width))


def _parse_lines(text: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in pairs:
            raise ConfigError(f"line {lineno}: repeated key {key!r}")
        pairs[key] = value
    return pairs


def _typed(key: str, value: str, kind):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} "
                          f"as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    pairs = _parse_lines(text)

    model_kw = {}
    layout_kw = {}
    device_kw = {}
    seed, precision, steps = 32, "f64", 10
    for key, value in pairs.items():
        section, _, field = key.partition(".")
        if section == "model" and field in _MODEL_INT_KEYS:
            model_kw[field] = _typed(key, value, int)
        elif key == "model.variant":
            model_kw["variant"] = value
        elif section == "layout" and field in _LAYOUT_KEYS:
            layout_kw[field] = _typed(key, value, int)
        elif section == "device" and field in _DEVICE_KEYS:
            device_kw[field] = _typed(key, value, float)
        elif key == "run.seed":
            seed = _typed(key, value, int)
        elif key == "run.steps":
            steps = _typed(key, value, int)
        elif key == "run.precision":
            precision = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    missing = [k for k in _REQUIRED_MODEL_KEYS if k not in model_kw]
    if missing:
        raise ConfigError("missing required model keys: "
                          + ", ".join(f"model.{k}" for k in missing))

    rc = RunConfig(model=EvoConfig(**model_kw),
                   layout=ParallelLayout(**layout_kw),
                   device=DeviceModel(**device_kw),
                   seed=seed, precision=precision, steps=steps)
    return rc.with_overrides()


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    return parse_config(text)
