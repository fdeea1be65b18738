"""IQ sample containers, cf32 file I/O and burst extraction from captures."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, FormatError, MetadataError, ValidationError

#: Length of the rectangular moving-average window used by the power gate.
POWER_WINDOW = 64


@dataclass(frozen=True, eq=False)
class CaptureStream:
    """A continuous complex baseband capture."""

    samples: np.ndarray
    sample_rate_hz: float
    source_label: Optional[str] = None
    domain_label: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if not np.iscomplexobj(samples):
            samples = samples.astype(np.complex128)
        if samples.ndim != 1 or samples.size < 1:
            raise ValidationError("stream needs a 1-D vector of at least one sample")
        if not np.all(np.isfinite(samples)):
            raise DataError("stream contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    def with_samples(self, samples: np.ndarray) -> "CaptureStream":
        """Copy of this stream carrying new samples and the same metadata."""
        return CaptureStream(samples, self.sample_rate_hz, self.source_label, self.domain_label)


@dataclass(frozen=True, eq=False)
class IqFrame:
    """One transmission split into its in-phase and quadrature rails."""

    i_samples: np.ndarray
    q_samples: np.ndarray
    sample_rate_hz: float
    source_label: Optional[str] = None
    domain_label: Optional[str] = None

    def __post_init__(self):
        i = np.asarray(self.i_samples, dtype=np.float64)
        q = np.asarray(self.q_samples, dtype=np.float64)
        if i.ndim != 1 or q.ndim != 1 or i.size != q.size or i.size < 1:
            raise ValidationError("I and Q must be 1-D vectors of identical, non-zero length")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(q))):
            raise DataError("frame contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "i_samples", i)
        object.__setattr__(self, "q_samples", q)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.i_samples.size

    @classmethod
    def from_complex(cls, samples, sample_rate_hz, source_label=None, domain_label=None) -> "IqFrame":
        samples = np.asarray(samples)
        return cls(samples.real, samples.imag, sample_rate_hz, source_label, domain_label)

    @property
    def samples(self) -> np.ndarray:
        """The frame re-interleaved as a complex vector."""
        return self.i_samples + 1j * self.q_samples

    def to_stream(self) -> CaptureStream:
        return CaptureStream(self.samples, self.sample_rate_hz, self.source_label, self.domain_label)

    def equals(self, other: "IqFrame") -> bool:
        """Sample-exact comparison, including labels and sample rate."""
        return (
            np.array_equal(self.i_samples, other.i_samples)
            and np.array_equal(self.q_samples, other.q_samples)
            and self.sample_rate_hz == other.sample_rate_hz
            and self.source_label == other.source_label
            and self.domain_label == other.domain_label
        )


def _sidecar_path(path) -> Path:
    return Path(str(os.fspath(path)) + ".json")


def write_cf32(stream: CaptureStream, path) -> None:
    """Write ``stream`` as interleaved little-endian float32 I/Q plus a JSON sidecar.

    Samples are cast to single precision, so only streams that are already
    complex64-representable survive a round trip bit-exactly.
    """
    path = Path(path)
    interleaved = np.empty(2 * len(stream), dtype="<f4")
    interleaved[0::2] = stream.samples.real
    interleaved[1::2] = stream.samples.imag
    path.write_bytes(interleaved.tobytes())
    meta = {"sample_rate_hz": stream.sample_rate_hz}
    if stream.source_label is not None:
        meta["source_label"] = stream.source_label
    if stream.domain_label is not None:
        meta["domain_label"] = stream.domain_label
    _sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def _read_sidecar(path: Path) -> dict:
    sidecar = _sidecar_path(path)
    try:
        meta = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise MetadataError(f"missing sidecar {sidecar}") from None
    except json.JSONDecodeError as exc:
        raise MetadataError(f"sidecar {sidecar} is not valid JSON: {exc}") from None
    if not isinstance(meta, dict):
        raise MetadataError(f"sidecar {sidecar} must hold a JSON object")
    rate = meta.get("sample_rate_hz")
    if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not np.isfinite(rate) or rate <= 0:
        raise MetadataError(f"sidecar {sidecar} needs a positive numeric sample_rate_hz")
    for key in ("source_label", "domain_label"):
        if meta.get(key) is not None and not isinstance(meta[key], str):
            raise MetadataError(f"sidecar field {key!r} must be a string")
    return meta


def read_cf32(path) -> CaptureStream:
    """Read an interleaved float32 I/Q file and its JSON sidecar.

    Raises:
        FormatError: the file is empty or its size is not a multiple of 8 bytes.
        MetadataError: the sidecar is missing or lacks a valid sample rate.
        DataError: the samples contain NaN or infinity.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % 8:
        raise FormatError(f"{path}: {len(raw)} bytes is not a positive multiple of 8")
    meta = _read_sidecar(path)
    values = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite sample values")
    samples = np.empty(values.size // 2, dtype=np.complex64)
    samples.real = values[0::2]
    samples.imag = values[1::2]
    return CaptureStream(
        samples,
        float(meta["sample_rate_hz"]),
        meta.get("source_label"),
        meta.get("domain_label"),
    )


def moving_average_power(samples: np.ndarray, window: int = POWER_WINDOW) -> np.ndarray:
    """Centred moving average of |s|^2.

    Near the edges the mean is taken over the in-range samples only, so a
    frame cut out of a capture is scored the same way whether or not it is
    surrounded by silence.
    """
    power = np.abs(samples) ** 2
    kernel = np.ones(window)
    total = np.convolve(power, kernel, mode="same")
    count = np.convolve(np.ones_like(power), kernel, mode="same")
    return total / count


def _gate_runs(avg_power: np.ndarray, rise: float, fall: float) -> list[tuple[int, int]]:
    runs = []
    on = False
    start = 0
    # hysteresis: switch on above `rise`, off below `fall`
    above = avg_power > rise
    below = avg_power < fall
    n = avg_power.size
    k = 0
    while k < n:
        if not on:
            hits = np.flatnonzero(above[k:])
            if hits.size == 0:
                break
            start = k + int(hits[0])
            on = True
            k = start
        else:
            hits = np.flatnonzero(below[k:])
            stop = n if hits.size == 0 else k + int(hits[0])
            runs.append((start, stop))
            on = False
            k = stop
    return runs


def detect_bursts(
    stream: CaptureStream, power_threshold: float, min_frame_len: int, max_frame_len: int
) -> list[tuple[int, int]]:
    """Half-open sample spans of the bursts that :func:`extract_frames` would return."""
    if not power_threshold > 0:
        raise ValidationError("power_threshold must be positive")
    if not 1 <= min_frame_len <= max_frame_len:
        raise ValidationError("need 1 <= min_frame_len <= max_frame_len")
    avg = moving_average_power(stream.samples)
    spans = []
    for start, stop in _gate_runs(avg, power_threshold, power_threshold / 2):
        if stop - start < min_frame_len:
            continue
        spans.append((start, min(stop, start + max_frame_len)))
    return spans


def extract_frames(
    stream: CaptureStream, power_threshold: float, min_frame_len: int, max_frame_len: int
) -> list[IqFrame]:
    """Cut a bursty capture into transmission frames.

    A 64-sample moving-average power gate switches on when the average
    exceeds ``power_threshold`` and off when it drops below half of it.
    Runs shorter than ``min_frame_len`` are dropped; longer runs are cut to
    ``max_frame_len``. Frames keep the stream's labels and are returned in
    stream order. No frames is a valid result.
    """
    return [
        IqFrame.from_complex(
            stream.samples[start:stop],
            stream.sample_rate_hz,
            stream.source_label,
            stream.domain_label,
        )
        for start, stop in detect_bursts(stream, power_threshold, min_frame_len, max_frame_len)
    ]
