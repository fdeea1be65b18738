"""Variance fractal dimension trajectory (VFDT) of sampled signals.

For one window the dimension is ``D = 2 - ln(var(dx)) / (2 ln(lag))`` where
``dx`` are the increments ``x[j + lag] - x[j]`` inside the window. The
trajectory slides that window along the signal with a fixed offset.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyTraceError, ValidationError
from .signal_core import IqFrame

FEATURE_LENGTH = 1024


@dataclass(frozen=True)
class VfdtConfig:
    window_len: int = 256
    window_offset: int = 64
    increment_lag: int = 4
    variance_floor: float = 1e-12

    def __post_init__(self):
        w, s, lag = self.window_len, self.window_offset, self.increment_lag
        if not 1 <= s <= w:
            raise ValidationError(f"window_offset must be in [1, window_len], got {s}")
        if not 2 <= lag < w or w - lag < 2:
            raise ValidationError(
                f"increment_lag must satisfy 2 <= lag and window_len - lag >= 2, got lag={lag}, W={w}"
            )
        if not self.variance_floor > 0:
            raise ValidationError("variance_floor must be positive")

    def trace_length(self, source_len: int) -> int:
        if source_len < self.window_len:
            return 0
        return (source_len - self.window_len) // self.window_offset + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "VfdtConfig":
        known = {"window_len", "window_offset", "increment_lag", "variance_floor"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown VfdtConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "VfdtConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class VfdtTrace:
    values: np.ndarray
    config: VfdtConfig
    source_len: int

    def __len__(self) -> int:
        return self.values.size


def _dimension(variance, lag: int, floor: float):
    # natural log; the base cancels in the ratio
    d = 2.0 - np.log(np.maximum(variance, floor)) / (2.0 * math.log(lag))
    return np.clip(d, 1.0, 2.0)


def window_dimension(window, lag: int, floor: float = 1e-12) -> float:
    """Variance fractal dimension of a single window, clamped to [1, 2]."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("window must be one-dimensional")
    if lag < 2:
        raise ValidationError("increment lag must be >= 2 (log(1) = 0 in the denominator)")
    if x.size - lag < 2:
        raise ValidationError("window too short: need at least two increments")
    increments = x[lag:] - x[:-lag]
    return float(_dimension(np.var(increments, ddof=1), lag, floor))


def vfdt(signal, config: VfdtConfig = VfdtConfig()) -> VfdtTrace:
    """Slide :func:`window_dimension` over ``signal``.

    Only full windows are used; a trailing partial window is discarded.

    Raises:
        EmptyTraceError: ``signal`` is shorter than one window.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("signal must be one-dimensional")
    n = config.trace_length(x.size)
    if n == 0:
        raise EmptyTraceError(f"signal of {x.size} samples is shorter than window_len={config.window_len}")
    lag = config.increment_lag
    increments = x[lag:] - x[:-lag]
    # window i owns increments [i*S, i*S + W - lag)
    per_window = sliding_window_view(increments, config.window_len - lag)[:: config.window_offset][:n]
    values = _dimension(np.var(per_window, axis=1, ddof=1), lag, config.variance_floor)
    return VfdtTrace(values, config, x.size)


def fit_length(values: np.ndarray, length: int) -> np.ndarray:
    """Truncate from the end, or pad by repeating the last value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyTraceError("cannot resize an empty trace")
    if values.size >= length:
        return values[:length].copy()
    return np.concatenate([values, np.full(length - values.size, values[-1])])


def feature_matrix(frame: IqFrame, config: VfdtConfig = VfdtConfig(), length: int = FEATURE_LENGTH) -> np.ndarray:
    """2 x ``length`` matrix: VFDT of the I rail on row 0, of the Q rail on row 1."""
    if length < 1:
        raise ValidationError("feature length must be positive")
    rows = [fit_length(vfdt(rail, config).values, length) for rail in (frame.i_samples, frame.q_samples)]
    return np.stack(rows)
