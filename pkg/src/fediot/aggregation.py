"""Aggregation rules that combine client models into one global model.

Plain averaging is the baseline. Coordinate-wise median and trimmed mean
drop extreme values per coordinate, and resampling re-draws the set of
models before any rule runs. All rules are order-independent and operate
coordinate by coordinate on the flat parameter vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .neuralnet import ModelParameters

AGGREGATION_RULES = ("avg", "med", "tm")

# Rejection-sampling guard: one output slot may never need this many draws.
MAX_RESAMPLE_DRAWS = 10**6


@dataclass(frozen=True)
class AggregationSpec:
    """Server-side aggregation choice.

    rule 'avg' averages, 'med' takes the coordinate-wise median, 'tm' trims
    trim_c values at each end per coordinate before averaging. resample_s
    above 0 applies s-resampling first; it only changes behaviour when the
    following rule is robust, since resampling preserves the plain average.
    """

    rule: str
    trim_c: int = 0
    resample_s: int = 0

    def __post_init__(self) -> None:
        if self.rule not in AGGREGATION_RULES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}")
        if self.rule == "tm" and self.trim_c < 1:
            raise ConfigError("trimmed mean needs trim_c >= 1")
        if self.rule != "tm" and self.trim_c:
            raise ConfigError(f"trim_c only applies to rule 'tm', got rule {self.rule!r}")
        if self.resample_s < 0:
            raise ConfigError(f"resample_s must be >= 0, got {self.resample_s}")

    def describe(self) -> str:
        name = {"avg": "AVG", "med": "MED", "tm": f"TM({self.trim_c})"}[self.rule]
        if self.resample_s:
            name = f"{self.resample_s}-RS+{name}"
        return name


def _stack(models: list[ModelParameters]) -> np.ndarray:
    if not models:
        raise ConfigError("cannot aggregate zero models")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise SchemaError(f"architecture mismatch: {m.arch} != {arch}")
    return np.stack([m.flat for m in models])


def average(models: list[ModelParameters]) -> ModelParameters:
    """Coordinate-wise mean of the client models."""
    stacked = _stack(models)
    return ModelParameters(models[0].arch, stacked.mean(axis=0))


def coordinate_median(models: list[ModelParameters]) -> ModelParameters:
    """Coordinate-wise median; an even count averages the two middle values."""
    stacked = _stack(models)
    return ModelParameters(models[0].arch, np.median(stacked, axis=0))


def trimmed_mean(models: list[ModelParameters], trim_c: int) -> ModelParameters:
    """Mean after removing the trim_c largest and smallest values per coordinate."""
    stacked = _stack(models)
    k = stacked.shape[0]
    if trim_c < 1:
        raise ConfigError(f"trim_c must be >= 1, got {trim_c}")
    if k - 2 * trim_c < 1:
        raise ConfigError(f"trimming {trim_c} per side leaves no model out of {k}")
    trimmed = np.sort(stacked, axis=0)[trim_c : k - trim_c]
    return ModelParameters(models[0].arch, trimmed.mean(axis=0))


def s_resample(
    models: list[ModelParameters], s: int, rng: np.random.Generator
) -> list[ModelParameters]:
    """Redraw K models, each the mean of s draws, no input used more than s times.

    Every output slot draws uniformly with rejection until it finds a model
    used fewer than s times, so across all K outputs each input is used
    exactly s times. Averaging the outputs therefore reproduces the plain
    average of the inputs; the redraw only dilutes minority outliers before
    a robust rule runs.
    """
    stacked = _stack(models)
    k = stacked.shape[0]
    if s < 1:
        raise ConfigError(f"resample_s must be >= 1, got {s}")
    usage = np.zeros(k, dtype=np.int64)
    outputs = []
    for _ in range(k):
        chosen = np.empty(s, dtype=np.intp)
        for slot in range(s):
            for _ in range(MAX_RESAMPLE_DRAWS):
                j = int(rng.integers(0, k))
                if usage[j] < s:
                    usage[j] += 1
                    chosen[slot] = j
                    break
            else:
                raise RuntimeError(
                    f"resampling drew {MAX_RESAMPLE_DRAWS} times without finding a free model"
                )
        outputs.append(ModelParameters(models[0].arch, stacked[chosen].mean(axis=0)))
    return outputs


def aggregate(
    models: list[ModelParameters],
    spec: AggregationSpec,
    rng: np.random.Generator | None = None,
) -> ModelParameters:
    """Apply one aggregation spec: optional resampling, then the rule."""
    if spec.resample_s:
        if rng is None:
            raise ConfigError("resampling needs a seeded random generator")
        models = s_resample(models, spec.resample_s, rng)
    if spec.rule == "avg":
        return average(models)
    if spec.rule == "med":
        return coordinate_median(models)
    return trimmed_mean(models, spec.trim_c)
