"""Synthetic testbed: device populations, datasets and the two headline experiments."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .channel import ChannelProfile, apply_channel, load_domains, standard_domains
from .classifier import CnnConfig, LabeledExample, TrainConfig, evaluate, train
from .errors import CapacityError, ValidationError
from .impairments import DeviceProfile, ModulationConfig, random_payload, transmit
from .signal_core import IqFrame
from .vfdt import FEATURE_LENGTH, VfdtConfig, feature_matrix, vfdt

log = logging.getLogger(__name__)

REPRESENTATIONS = ("raw_iq", "vfdt")
PAYLOAD_BITS = 16000
SAMPLE_RATE_HZ = 1e6
MAX_POPULATION = 10_000

#: Uniform ranges for synthetic devices: (low, high).
PARAMETER_RANGES = {
    "iip3_dbm": (20.0, 40.0),
    "iq_amp_imbalance_db": (0.0, 8.0),
    "iq_phase_imbalance_deg": (0.0, 3.0),
    "phase_noise_fmax_hz": (10.0, 50.0),
    "cfo_hz": (-1.5e3, 1.5e3),
    "dc_offset_mag": (0.0, 0.05),
}

#: RMS the received frame is scaled to before the VFDT is taken.
VFDT_REFERENCE_RMS = 2.0 * math.sqrt(2.0)


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps(parts, default=str).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _too_close(a: np.ndarray, b: np.ndarray, tol: float = 0.05) -> bool:
    return bool(np.all(np.abs(a - b) < tol))


def generate_population(n: int, seed: int = 0) -> list[DeviceProfile]:
    """Draw ``n`` synthetic devices uniformly from :data:`PARAMETER_RANGES`.

    A candidate within 5% of range of an existing device on every parameter
    at once is rejected and redrawn.

    Raises:
        ValidationError: ``n < 2``.
        CapacityError: ``n`` exceeds :data:`MAX_POPULATION`.
    """
    if n < 2:
        raise ValidationError("a population needs at least two devices")
    if n > MAX_POPULATION:
        raise CapacityError(f"at most {MAX_POPULATION} devices can be kept separated")
    rng = np.random.default_rng(seed)
    keys = list(PARAMETER_RANGES)
    lows = np.array([PARAMETER_RANGES[k][0] for k in keys])
    spans = np.array([PARAMETER_RANGES[k][1] - PARAMETER_RANGES[k][0] for k in keys])
    accepted: list[np.ndarray] = []
    profiles = []
    while len(profiles) < n:
        unit = rng.random(len(keys))
        dc_phase = rng.uniform(-math.pi, math.pi)
        device_seed = int(rng.integers(0, 2**63 - 1))
        if any(_too_close(unit, other) for other in accepted):
            continue
        accepted.append(unit)
        v = dict(zip(keys, lows + unit * spans))
        profiles.append(
            DeviceProfile(
                device_id=f"dev{len(profiles):03d}",
                iip3_dbm=float(v["iip3_dbm"]),
                iq_amp_imbalance_db=float(v["iq_amp_imbalance_db"]),
                iq_phase_imbalance_deg=float(v["iq_phase_imbalance_deg"]),
                phase_noise_fmax_hz=float(v["phase_noise_fmax_hz"]),
                cfo_hz=float(v["cfo_hz"]),
                dc_offset=complex(v["dc_offset_mag"] * np.exp(1j * dc_phase)),
                seed=device_seed,
            )
        )
    return profiles


def normalize_power(samples: np.ndarray, rms: float = 1.0) -> np.ndarray:
    power = np.mean(np.abs(samples) ** 2)
    if power == 0:
        raise ValidationError("cannot normalise a zero-power frame")
    return samples * (rms / math.sqrt(power))


def raw_iq_features(frame: IqFrame, length: int = FEATURE_LENGTH) -> np.ndarray:
    """First ``length`` samples at unit average power, I on row 0 and Q on row 1."""
    if len(frame) < length:
        raise ValidationError(f"frame of {len(frame)} samples is shorter than {length}")
    s = normalize_power(frame.samples[:length])
    return np.stack([s.real, s.imag])


def vfdt_features(frame: IqFrame, config: VfdtConfig = VfdtConfig(), length: int = FEATURE_LENGTH) -> np.ndarray:
    """Paired I/Q VFDT of the frame after scaling it to :data:`VFDT_REFERENCE_RMS`."""
    s = normalize_power(frame.samples, VFDT_REFERENCE_RMS)
    return feature_matrix(IqFrame.from_complex(s, frame.sample_rate_hz), config, length)


def extract_features(frame: IqFrame, representation: str, vfdt_cfg: VfdtConfig = VfdtConfig()) -> np.ndarray:
    if representation == "raw_iq":
        return raw_iq_features(frame)
    if representation == "vfdt":
        return vfdt_features(frame, vfdt_cfg)
    raise ValidationError(f"unknown representation {representation!r}")


def received_frame(
    device: DeviceProfile,
    domain: ChannelProfile,
    frame_index: int,
    seed: int,
    mod_cfg: ModulationConfig = ModulationConfig(),
) -> IqFrame:
    """One transmission of ``device`` observed through ``domain``.

    Payload and channel noise are drawn from seeds derived from the device,
    domain, frame index and experiment seed, so the realisation does not
    depend on the representation or on generation order.
    """
    payload_rng = np.random.default_rng(_derive_seed("payload", seed, device.device_id, domain.domain_id, frame_index))
    bits = random_payload(PAYLOAD_BITS, payload_rng)
    frame = transmit(device, bits, mod_cfg, SAMPLE_RATE_HZ, pa_saturate=True)
    noise_rng = np.random.default_rng(
        _derive_seed("channel", seed, domain.seed, device.device_id, domain.domain_id, frame_index)
    )
    return apply_channel(frame, domain, noise_rng)


def build_dataset(
    population: Sequence[DeviceProfile],
    domains: Sequence[ChannelProfile],
    frames_per_device: int,
    representation,
    vfdt_cfg: VfdtConfig = VfdtConfig(),
    seed: int = 0,
) -> list[LabeledExample] | dict[str, list[LabeledExample]]:
    """Generate ``frames_per_device`` labelled examples per (device, domain).

    ``representation`` is ``"raw_iq"``, ``"vfdt"``, or a sequence of both, in
    which case a dict keyed by representation is returned and every
    representation is computed from the very same received frames.
    """
    if not population or not domains:
        raise ValidationError("population and domains must be non-empty")
    if frames_per_device < 1:
        raise ValidationError("frames_per_device must be >= 1")
    reps = [representation] if isinstance(representation, str) else list(representation)
    for r in reps:
        if r not in REPRESENTATIONS:
            raise ValidationError(f"unknown representation {r!r}")
    out: dict[str, list[LabeledExample]] = {r: [] for r in reps}
    for label, device in enumerate(population):
        for domain in domains:
            for k in range(frames_per_device):
                frame = received_frame(device, domain, k, seed)
                for r in reps:
                    feats = extract_features(frame, r, vfdt_cfg).astype(np.float32)
                    out[r].append(LabeledExample(feats, label, domain.domain_id))
    return out[reps[0]] if isinstance(representation, str) else out


# -- separability sweeps ------------------------------------------------------------------

#: The five levels each impairment is swept over when varied alone.
SWEEP_LEVELS = {
    "iip3_dbm": (20.0, 25.0, 30.0, 35.0, 40.0),
    "iq_amp_imbalance_db": (0.0, 2.0, 4.0, 6.0, 8.0),
    "phase_noise_fmax_hz": (10.0, 20.0, 30.0, 40.0, 50.0),
}


@dataclass(frozen=True)
class SweepSetup:
    """Observation conditions for the single-impairment sweeps.

    The estimator is scale dependent and only sees phase noise through sample
    pairs that share a symbol, so the sweep runs slowly sampled, long symbols
    at a fixed receive gain with no power normalisation. The defaults put all
    three sweeps inside the [1, 2] clamp range at once.
    """

    sample_rate_hz: float = 256.0
    samples_per_symbol: int = 32
    rx_gain: float = 8.0
    vfdt_config: VfdtConfig = VfdtConfig(window_len=8192, window_offset=2048, increment_lag=8)
    payload_bits: int = PAYLOAD_BITS


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    levels: tuple
    means: tuple
    stds: tuple

    @property
    def separations(self) -> tuple:
        """Adjacent-level mean gaps in units of the pooled standard deviation."""
        out = []
        for k in range(len(self.levels) - 1):
            pooled = math.sqrt((self.stds[k] ** 2 + self.stds[k + 1] ** 2) / 2)
            gap = abs(self.means[k + 1] - self.means[k])
            out.append(math.inf if pooled == 0 and gap > 0 else gap / pooled if pooled else 0.0)
        return tuple(out)

    @property
    def strictly_monotone(self) -> bool:
        d = np.diff(self.means)
        return bool(np.all(d > 0) or np.all(d < 0))

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "levels": list(self.levels),
            "means": list(self.means),
            "stds": list(self.stds),
            "separations": list(self.separations),
            "strictly_monotone": self.strictly_monotone,
        }


def separability_sweep(
    parameter: str,
    levels: Optional[Sequence[float]] = None,
    n_streams: int = 3,
    seed: int = 0,
    setup: SweepSetup = SweepSetup(),
) -> SweepResult:
    """Sweep one impairment with all others off and summarise the I-rail VFDT.

    Each stream (payload and device seed) is shared by every level, so level
    differences come from the impairment alone. Trace values of all streams
    at a level are pooled into one band.
    """
    if parameter not in SWEEP_LEVELS:
        raise ValidationError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_LEVELS)}")
    levels = tuple(float(v) for v in (SWEEP_LEVELS[parameter] if levels is None else levels))
    if len(levels) < 2 or n_streams < 1:
        raise ValidationError("a sweep needs at least two levels and one stream")
    mod = ModulationConfig(samples_per_symbol=setup.samples_per_symbol)
    bands: dict[float, list[np.ndarray]] = {v: [] for v in levels}
    for k in range(n_streams):
        bits = random_payload(setup.payload_bits, np.random.default_rng(_derive_seed("sweep", seed, k)))
        device_seed = _derive_seed("sweep-device", seed, k)
        for v in levels:
            device = DeviceProfile(f"{parameter}={v}", seed=device_seed, **{parameter: v})
            frame = transmit(device, bits, mod, setup.sample_rate_hz, pa_saturate=True)
            bands[v].append(vfdt(setup.rx_gain * frame.i_samples, setup.vfdt_config).values)
    pooled = [np.concatenate(bands[v]) for v in levels]
    return SweepResult(
        parameter,
        levels,
        tuple(float(b.mean()) for b in pooled),
        tuple(float(b.std(ddof=1)) for b in pooled),
    )


# -- experiments --------------------------------------------------------------------------


def _as_tuple(value, kind=str) -> tuple:
    if isinstance(value, (str, int)):
        value = [value]
    return tuple(kind(v) for v in value)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything that determines an experiment's outcome.

    ``seed`` drives population and data generation; the network's
    initialisation and shuffling seeds live in ``cnn_config`` and
    ``train_config``. ``domains_file = None`` selects the shipped domains.
    """

    population_size: int = 10
    frames_per_device_per_domain: int = 200
    train_domains: tuple = ("D1",)
    test_domains: tuple = ("D1", "D2", "D3", "R1", "R2")
    representations: tuple = REPRESENTATIONS
    device_subset_sizes: Optional[tuple] = None
    seed: int = 0
    vfdt_config: VfdtConfig = VfdtConfig()
    cnn_config: CnnConfig = CnnConfig()
    train_config: TrainConfig = TrainConfig()
    domains_file: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "train_domains", _as_tuple(self.train_domains))
        object.__setattr__(self, "test_domains", _as_tuple(self.test_domains))
        object.__setattr__(self, "representations", _as_tuple(self.representations))
        if self.device_subset_sizes is not None:
            object.__setattr__(self, "device_subset_sizes", _as_tuple(self.device_subset_sizes, int))
        if self.population_size < 2:
            raise ValidationError("population_size must be >= 2")
        if self.frames_per_device_per_domain < 1:
            raise ValidationError("frames_per_device_per_domain must be >= 1")
        if not self.train_domains or not self.test_domains:
            raise ValidationError("train_domains and test_domains must be non-empty")
        for r in self.representations:
            if r not in REPRESENTATIONS:
                raise ValidationError(f"unknown representation {r!r}")
        if not self.representations:
            raise ValidationError("at least one representation is required")
        sizes = self.device_subset_sizes
        if sizes is not None:
            if not sizes or min(sizes) < 2 or max(sizes) > self.population_size:
                raise ValidationError("device subset sizes must lie in [2, population_size]")
            if list(sizes) != sorted(set(sizes)):
                raise ValidationError("device subset sizes must be strictly ascending")

    def domains(self) -> list[ChannelProfile]:
        """Load the domain set and check the requested ids against it."""
        domains = standard_domains() if self.domains_file is None else load_domains(self.domains_file)
        known = {d.domain_id for d in domains}
        missing = sorted(set(self.train_domains + self.test_domains) - known)
        if missing:
            raise ValidationError(f"domains {missing} are not in the loaded domain set {sorted(known)}")
        return domains

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "frames_per_device_per_domain": self.frames_per_device_per_domain,
            "train_domains": list(self.train_domains),
            "test_domains": list(self.test_domains),
            "representations": list(self.representations),
            "device_subset_sizes": None if self.device_subset_sizes is None else list(self.device_subset_sizes),
            "seed": self.seed,
            "vfdt_config": asdict(self.vfdt_config),
            "cnn_config": self.cnn_config.to_dict(),
            "train_config": asdict(self.train_config),
            "domains_file": self.domains_file,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        """Build a spec from JSON-like data; ``representation`` is accepted as an alias."""
        data = dict(data)
        if "representation" in data:
            if "representations" in data:
                raise ValidationError("give either representation or representations, not both")
            data["representations"] = data.pop("representation")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown ExperimentSpec fields: {sorted(unknown)}")
        try:
            if "vfdt_config" in data:
                data["vfdt_config"] = VfdtConfig.from_dict(data["vfdt_config"])
            if "cnn_config" in data:
                data["cnn_config"] = CnnConfig.from_dict(data["cnn_config"])
            if "train_config" in data:
                data["train_config"] = TrainConfig(**data["train_config"])
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"malformed experiment spec: {exc}") from exc

    @classmethod
    def from_json_file(cls, path) -> "ExperimentSpec":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: an experiment spec must be a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class CellRecord:
    train_domains: tuple
    test_domain: str
    representation: str
    n_devices: int
    accuracy: float
    confusion: np.ndarray
    history: tuple
    n_examples: int

    def to_dict(self) -> dict:
        return {
            "train_domains": list(self.train_domains),
            "test_domain": self.test_domain,
            "representation": self.representation,
            "n_devices": self.n_devices,
            "n_examples": self.n_examples,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "history": [dict(h) for h in self.history],
        }


@dataclass
class ExperimentReport:
    experiment: str
    spec: ExperimentSpec
    cells: list
    wall_time_s: float = 0.0

    def cell(self, representation: str, test_domain: str, n_devices: Optional[int] = None) -> CellRecord:
        for c in self.cells:
            if c.representation == representation and c.test_domain == test_domain:
                if n_devices is None or c.n_devices == n_devices:
                    return c
        raise KeyError((representation, test_domain, n_devices))

    def accuracy(self, representation: str, test_domain: str, n_devices: Optional[int] = None) -> float:
        return self.cell(representation, test_domain, n_devices).accuracy

    def to_dict(self, include_wall_time: bool = True) -> dict:
        metadata = {
            "toolkit_version": __version__,
            "seeds": {
                "data": self.spec.seed,
                "init": self.spec.cnn_config.seed,
                "train": self.spec.train_config.seed,
            },
        }
        if include_wall_time:
            metadata["wall_time_s"] = self.wall_time_s
        return {
            "experiment": self.experiment,
            "metadata": metadata,
            "spec": self.spec.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
        }

    def to_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_time), indent=2, sort_keys=True) + "\n"

    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["representation", "train_domains", "test_domain", "n_devices", "n_examples", "accuracy"])
        for c in self.cells:
            w.writerow([c.representation, "+".join(c.train_domains), c.test_domain, c.n_devices, c.n_examples, repr(c.accuracy)])
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        """Write ``report.json``, ``accuracy.csv`` and one confusion CSV per cell."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json", out / "accuracy.csv"]
        written[0].write_text(self.to_json())
        written[1].write_text(self.accuracy_csv())
        for c in self.cells:
            path = out / f"confusion_{c.representation}_{c.test_domain}_n{c.n_devices}.csv"
            np.savetxt(path, c.confusion, fmt="%d", delimiter=",")
            written.append(path)
        return written


def build_all_datasets(spec: ExperimentSpec, population=None, log_progress=None) -> dict[str, list[LabeledExample]]:
    """Datasets for every representation over the union of train and test domains."""
    domains = spec.domains()
    needed = [d for d in domains if d.domain_id in set(spec.train_domains + spec.test_domains)]
    if population is None:
        population = generate_population(spec.population_size, spec.seed)
    if log_progress:
        log_progress(f"generating {len(population)} devices x {len(needed)} domains x {spec.frames_per_device_per_domain} frames")
    return build_dataset(
        population, needed, spec.frames_per_device_per_domain, spec.representations, spec.vfdt_config, spec.seed
    )


def _train_and_score(spec, examples, representation, n_devices, log_progress=None) -> list[CellRecord]:
    train_set = [ex for ex in examples if ex.domain_label in spec.train_domains]
    cnn_cfg = replace(spec.cnn_config, num_classes=n_devices)
    if log_progress:
        log_progress(f"training {representation} on {'+'.join(spec.train_domains)} with {n_devices} devices")
    model, history = train(train_set, cnn_cfg, spec.train_config)
    held_out = set(model.test_indices)
    cells = []
    for domain in spec.test_domains:
        if domain in spec.train_domains:
            # seen domains are scored on the held-out split only
            test = [ex for k, ex in enumerate(train_set) if k in held_out and ex.domain_label == domain]
        else:
            test = [ex for ex in examples if ex.domain_label == domain]
        accuracy, confusion = evaluate(model, test, n_devices)
        cells.append(
            CellRecord(spec.train_domains, domain, representation, n_devices, accuracy, confusion, tuple(history), len(test))
        )
    return cells


def run_domain_adaptation(spec: ExperimentSpec, datasets=None, log_progress=None) -> ExperimentReport:
    """Train one model per representation on ``train_domains``; score each test domain.

    ``datasets`` (from :func:`build_all_datasets`) may be passed to reuse
    generated data across scenarios that share a seed and population.
    """
    start = time.perf_counter()
    spec.domains()
    if datasets is None:
        datasets = build_all_datasets(spec, log_progress=log_progress)
    cells = []
    for rep in spec.representations:
        cells.extend(_train_and_score(spec, datasets[rep], rep, spec.population_size, log_progress))
    return ExperimentReport("domain_adaptation", spec, cells, time.perf_counter() - start)


def run_scalability(spec: ExperimentSpec, datasets=None, log_progress=None) -> ExperimentReport:
    """Repeat the experiment on nested device subsets.

    The subset of size ``n`` is the first ``n`` devices of the population, so
    smaller subsets are prefixes of larger ones.
    """
    if not spec.device_subset_sizes:
        raise ValidationError("run_scalability needs device_subset_sizes")
    start = time.perf_counter()
    spec.domains()
    if datasets is None:
        datasets = build_all_datasets(spec, log_progress=log_progress)
    cells = []
    for n in spec.device_subset_sizes:
        for rep in spec.representations:
            subset = [ex for ex in datasets[rep] if ex.device_label < n]
            cells.extend(_train_and_score(spec, subset, rep, n, log_progress))
    return ExperimentReport("scalability", spec, cells, time.perf_counter() - start)
