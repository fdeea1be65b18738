"""Hardware-impaired transmitter models.

A synthetic device is a 4-QAM modulator followed by a chain of impairment
stages (IQ imbalance, cubic PA, carrier frequency offset, phase noise, DC
offset). Every stage is exactly the identity at its neutral parameter.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ValidationError
from .signal_core import CaptureStream, IqFrame

#: Corner frequency of the low-pass filter shaping the phase-noise frequency process.
PHASE_NOISE_CUTOFF_HZ = 100.0

DEFAULT_CHAIN = ("iq_imbalance", "pa", "cfo", "phase_noise", "dc")


@dataclass(frozen=True)
class ModulationConfig:
    scheme: str = "4-QAM"
    samples_per_symbol: int = 8
    symbol_energy: float = 1.0

    def __post_init__(self):
        if self.scheme != "4-QAM":
            raise ValidationError(f"unsupported modulation scheme {self.scheme!r}")
        if self.samples_per_symbol < 1:
            raise ValidationError("samples_per_symbol must be >= 1")
        if not self.symbol_energy > 0:
            raise ValidationError("symbol_energy must be positive")


@dataclass(frozen=True)
class DeviceProfile:
    """Impairment parameters of one synthetic transmitter.

    ``iip3_dbm = inf`` denotes an ideal (linear) amplifier.
    """

    device_id: str
    iip3_dbm: float = math.inf
    iq_amp_imbalance_db: float = 0.0
    iq_phase_imbalance_deg: float = 0.0
    phase_noise_fmax_hz: float = 0.0
    cfo_hz: float = 0.0
    dc_offset: complex = 0j
    seed: int = 0

    def __post_init__(self):
        if not (10.0 <= self.iip3_dbm <= 50.0 or self.iip3_dbm == math.inf):
            raise ValidationError(f"iip3_dbm out of [10, 50]: {self.iip3_dbm}")
        if not 0.0 <= self.iq_amp_imbalance_db <= 10.0:
            raise ValidationError(f"iq_amp_imbalance_db out of [0, 10]: {self.iq_amp_imbalance_db}")
        if not 0.0 <= self.phase_noise_fmax_hz <= 100.0:
            raise ValidationError(f"phase_noise_fmax_hz out of [0, 100]: {self.phase_noise_fmax_hz}")
        for name in ("iq_phase_imbalance_deg", "cfo_hz"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        object.__setattr__(self, "dc_offset", complex(self.dc_offset))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["iip3_dbm"] = None if math.isinf(self.iip3_dbm) else self.iip3_dbm
        data["dc_offset"] = [self.dc_offset.real, self.dc_offset.imag]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceProfile":
        data = dict(data)
        if data.get("iip3_dbm") is None:
            data["iip3_dbm"] = math.inf
        dc = data.get("dc_offset", 0j)
        if isinstance(dc, (list, tuple)):
            dc = complex(dc[0], dc[1])
        data["dc_offset"] = dc
        return cls(**data)


def save_population(profiles: Sequence[DeviceProfile], path) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_dict() for p in profiles], fh, indent=2)
        fh.write("\n")


def load_population(path) -> list[DeviceProfile]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError("a population file must hold a JSON array of profiles")
    return [DeviceProfile.from_dict(item) for item in data]


def qam4_modulate(bits, cfg: ModulationConfig = ModulationConfig(), sample_rate_hz: float = 1e6) -> CaptureStream:
    """Gray-mapped 4-QAM with a rectangular pulse.

    Bit pairs map 00 -> (+,+), 01 -> (-,+), 11 -> (-,-), 10 -> (+,-), scaled
    to ``cfg.symbol_energy``; each symbol is held for ``samples_per_symbol``
    samples.
    """
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.size == 0 or bits.size % 2:
        raise ValidationError("need a non-empty bit vector of even length")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValidationError("bits must be 0 or 1")
    pairs = bits.reshape(-1, 2).astype(np.float64)
    scale = math.sqrt(cfg.symbol_energy / 2.0)
    symbols = scale * ((1.0 - 2.0 * pairs[:, 1]) + 1j * (1.0 - 2.0 * pairs[:, 0]))
    return CaptureStream(np.repeat(symbols, cfg.samples_per_symbol), sample_rate_hz)


def pa_cubic_coefficient(iip3_dbm: float) -> float:
    """Third-order coefficient for a unit-gain cubic PA with the given IIP3 (1 ohm)."""
    if math.isinf(iip3_dbm):
        return 0.0
    amp_sq = 2.0 * 10.0 ** ((iip3_dbm - 30.0) / 10.0)
    return 4.0 / (3.0 * amp_sq)


def pa_cubic(x: CaptureStream, iip3_dbm: float, saturate: bool = False) -> CaptureStream:
    """Memoryless cubic amplifier ``y = x - c3 x |x|^2``.

    With ``saturate`` the output magnitude is held at the polynomial's peak
    for inputs beyond the turning point ``|x|^2 = 1 / (3 c3)`` instead of
    folding back.
    """
    c3 = pa_cubic_coefficient(iip3_dbm)
    if c3 == 0.0:
        return x.with_samples(x.samples.copy())
    s = x.samples
    mag_sq = np.abs(s) ** 2
    y = s - c3 * s * mag_sq
    if saturate:
        turn_sq = 1.0 / (3.0 * c3)
        over = mag_sq > turn_sq
        if np.any(over):
            peak = (2.0 / 3.0) * math.sqrt(turn_sq)
            y = np.where(over, peak * s / np.sqrt(np.where(over, mag_sq, 1.0)), y)
    return x.with_samples(y)


def iq_imbalance(x: CaptureStream, amp_db: float, phase_deg: float) -> CaptureStream:
    """Split-gain IQ mismatch: ``I' = gI I``, ``Q' = gQ (Q cos p + I sin p)``.

    The gains are ``10^(+-amp_db/40)`` so the I:Q amplitude ratio is ``amp_db``.
    """
    if amp_db == 0 and phase_deg == 0:
        return x.with_samples(x.samples.copy())
    gain_i = 10.0 ** (amp_db / 40.0)
    gain_q = 10.0 ** (-amp_db / 40.0)
    phi = math.radians(phase_deg)
    i, q = x.samples.real, x.samples.imag
    return x.with_samples(gain_i * i + 1j * gain_q * (q * math.cos(phi) + i * math.sin(phi)))


def frequency_noise(n: int, fmax_hz: float, cutoff_hz: float, sample_rate_hz: float, rng) -> np.ndarray:
    """Low-passed Gaussian frequency deviation (Hz) with peak magnitude ``fmax_hz``."""
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ValidationError(f"cutoff_hz must lie in (0, fs/2), got {cutoff_hz}")
    raw = rng.standard_normal(n)
    pole = math.exp(-2.0 * math.pi * cutoff_hz / sample_rate_hz)
    shaped = lfilter([1.0 - pole], [1.0, -pole], raw)
    peak = np.max(np.abs(shaped))
    if peak == 0:
        return np.zeros(n)
    return shaped * (fmax_hz / peak)


def phase_noise(
    x: CaptureStream, fmax_hz: float, cutoff_hz: float = PHASE_NOISE_CUTOFF_HZ, rng=None
) -> CaptureStream:
    """Rotate ``x`` by the integral of a filtered-Gaussian frequency process.

    The frequency deviation is scaled so its largest excursion equals
    ``fmax_hz``; ``fmax_hz = 0`` returns the input unchanged.
    """
    if fmax_hz < 0:
        raise ValidationError("fmax_hz must be non-negative")
    if fmax_hz == 0:
        return x.with_samples(x.samples.copy())
    rng = np.random.default_rng() if rng is None else rng
    fs = x.sample_rate_hz
    freq = frequency_noise(len(x), fmax_hz, cutoff_hz, fs, rng)
    phase = np.cumsum(2.0 * math.pi * freq / fs)
    return x.with_samples(x.samples * np.exp(1j * phase))


def apply_cfo(x: CaptureStream, cfo_hz: float) -> CaptureStream:
    """Carrier frequency offset: ``y[n] = x[n] exp(j 2 pi cfo n / fs)``."""
    fs = x.sample_rate_hz
    if not abs(cfo_hz) < fs / 2:
        raise ValidationError(f"|cfo_hz| must be below fs/2 = {fs / 2}")
    if cfo_hz == 0:
        return x.with_samples(x.samples.copy())
    n = np.arange(len(x))
    return x.with_samples(x.samples * np.exp(2j * math.pi * cfo_hz * n / fs))


def add_dc_offset(x: CaptureStream, dc: complex) -> CaptureStream:
    if dc == 0:
        return x.with_samples(x.samples.copy())
    return x.with_samples(x.samples + dc)


def payload_seed(bits) -> int:
    """Stable 64-bit digest of a bit vector."""
    packed = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()
    return int.from_bytes(hashlib.sha256(packed).digest()[:8], "little")


def random_payload(n_bits: int, rng) -> np.ndarray:
    return rng.integers(0, 2, size=n_bits, dtype=np.uint8)


def transmit(
    profile: DeviceProfile,
    payload_bits,
    cfg: ModulationConfig = ModulationConfig(),
    sample_rate_hz: float = 1e6,
    chain: Sequence[str] = DEFAULT_CHAIN,
    pa_saturate: bool = False,
) -> IqFrame:
    """Modulate ``payload_bits`` and pass them through the device's impairments.

    Phase noise draws from a generator seeded by ``(profile.seed, payload)``
    so a frame depends only on its inputs, never on call order.
    """
    if abs(profile.cfo_hz) > sample_rate_hz / 10:
        raise ValidationError(f"|cfo_hz| must not exceed fs/10 = {sample_rate_hz / 10}")
    unknown = set(chain) - set(DEFAULT_CHAIN)
    if unknown:
        raise ValidationError(f"unknown impairment stages {sorted(unknown)}")
    rng = np.random.default_rng([profile.seed & 0xFFFFFFFFFFFFFFFF, payload_seed(payload_bits)])
    stream = qam4_modulate(payload_bits, cfg, sample_rate_hz)
    for stage in chain:
        if stage == "iq_imbalance":
            stream = iq_imbalance(stream, profile.iq_amp_imbalance_db, profile.iq_phase_imbalance_deg)
        elif stage == "pa":
            stream = pa_cubic(stream, profile.iip3_dbm, saturate=pa_saturate)
        elif stage == "cfo":
            stream = apply_cfo(stream, profile.cfo_hz)
        elif stage == "phase_noise":
            stream = phase_noise(stream, profile.phase_noise_fmax_hz, PHASE_NOISE_CUTOFF_HZ, rng)
        elif stage == "dc":
            stream = add_dc_offset(stream, profile.dc_offset)
    return IqFrame.from_complex(stream.samples, sample_rate_hz, source_label=profile.device_id)
