"""Synthetic propagation domains ("locations") applied between transmitter and receiver."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, ValidationError
from .signal_core import IqFrame

MAX_TAPS = 8


@dataclass(frozen=True)
class ChannelProfile:
    """Flat complex gain, a short multipath FIR and receiver-referred AWGN.

    ``snr_db = inf`` disables the noise.
    """

    domain_id: str
    snr_db: float = math.inf
    flat_gain: complex = 1 + 0j
    multipath_taps: tuple = (1 + 0j,)
    seed: int = 0

    def __post_init__(self):
        taps = tuple(complex(t) for t in self.multipath_taps)
        if not 1 <= len(taps) <= MAX_TAPS:
            raise ValidationError(f"need 1..{MAX_TAPS} multipath taps, got {len(taps)}")
        if taps[0] == 0:
            raise ValidationError("the first multipath tap must be non-zero")
        if not (-10.0 <= self.snr_db <= 60.0 or self.snr_db == math.inf):
            raise ValidationError(f"snr_db out of [-10, 60]: {self.snr_db}")
        if complex(self.flat_gain) == 0:
            raise ValidationError("flat_gain must be non-zero")
        object.__setattr__(self, "multipath_taps", taps)
        object.__setattr__(self, "flat_gain", complex(self.flat_gain))

    @property
    def is_identity(self) -> bool:
        return self.snr_db == math.inf and self.flat_gain == 1 and self.multipath_taps == (1 + 0j,)

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "flat_gain": [self.flat_gain.real, self.flat_gain.imag],
            "multipath_taps": [[t.real, t.imag] for t in self.multipath_taps],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelProfile":
        def as_complex(v):
            return complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)

        snr = data.get("snr_db")
        return cls(
            domain_id=str(data["domain_id"]),
            snr_db=math.inf if snr is None else float(snr),
            flat_gain=as_complex(data.get("flat_gain", [1.0, 0.0])),
            multipath_taps=tuple(as_complex(t) for t in data.get("multipath_taps", [[1.0, 0.0]])),
            seed=int(data.get("seed", 0)),
        )


def apply_channel(frame: IqFrame, profile: ChannelProfile, rng=None) -> IqFrame:
    """Propagate ``frame`` through ``profile``.

    The FIR output is truncated to the input length. Noise is rescaled so the
    realised signal-to-noise ratio over the frame equals ``snr_db``.

    Raises:
        DataError: the frame carries no power, so no SNR can be set.
    """
    x = frame.samples
    if profile.is_identity:
        y = x.copy()
    else:
        y = lfilter(np.asarray(profile.multipath_taps), [1.0], profile.flat_gain * x)
        if profile.snr_db != math.inf:
            rng = np.random.default_rng(profile.seed) if rng is None else rng
            signal_power = float(np.mean(np.abs(y) ** 2))
            if signal_power == 0:
                raise DataError("zero-power frame: cannot scale noise to an SNR")
            noise = rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size)
            target = signal_power / 10.0 ** (profile.snr_db / 10.0)
            noise *= math.sqrt(target / np.mean(np.abs(noise) ** 2))
            y = y + noise
    return IqFrame.from_complex(y, frame.sample_rate_hz, frame.source_label, profile.domain_id)


def load_domains(path) -> list[ChannelProfile]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError("a domain file must hold a JSON array of channel profiles")
    domains = [ChannelProfile.from_dict(item) for item in data]
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ValidationError("domain ids must be unique")
    return domains


def save_domains(domains, path) -> None:
    with open(path, "w") as fh:
        json.dump([d.to_dict() for d in domains], fh, indent=2)
        fh.write("\n")


def standard_domains() -> list[ChannelProfile]:
    """The five shipped domains D1, D2, D3, R1, R2 (``domains/standard5.json``)."""
    ref = resources.files("vfdt_fingerprint").joinpath("domains/standard5.json")
    with resources.as_file(ref) as path:
        return load_domains(path)
