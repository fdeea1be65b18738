import json
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import ks_2samp

from vfdt_fingerprint.channel import standard_domains
from vfdt_fingerprint.classifier import TrainConfig
from vfdt_fingerprint.errors import CapacityError, ValidationError
from vfdt_fingerprint.harness import (
    PARAMETER_RANGES,
    SWEEP_LEVELS,
    ExperimentSpec,
    build_dataset,
    generate_population,
    raw_iq_features,
    received_frame,
    run_domain_adaptation,
    run_scalability,
    separability_sweep,
)

DOMAINS = {d.domain_id: d for d in standard_domains()}


def _unit_params(profile):
    vals = {
        "iip3_dbm": profile.iip3_dbm,
        "iq_amp_imbalance_db": profile.iq_amp_imbalance_db,
        "iq_phase_imbalance_deg": profile.iq_phase_imbalance_deg,
        "phase_noise_fmax_hz": profile.phase_noise_fmax_hz,
        "cfo_hz": profile.cfo_hz,
        "dc_offset_mag": abs(profile.dc_offset),
    }
    return np.array([(vals[k] - lo) / (hi - lo) for k, (lo, hi) in PARAMETER_RANGES.items()])


def test_population_in_range_and_distinct():
    pop = generate_population(30, seed=7)
    assert len(pop) == 30
    assert len({p.device_id for p in pop}) == 30
    units = np.array([_unit_params(p) for p in pop])
    assert np.all((units >= -1e-9) & (units <= 1 + 1e-9))
    for i in range(30):
        for j in range(i):
            assert not np.all(np.abs(units[i] - units[j]) < 0.05)


def test_population_deterministic():
    assert generate_population(30, 7) == generate_population(30, 7)
    assert generate_population(30, 7) != generate_population(30, 8)


def test_population_size_limits():
    with pytest.raises(ValidationError):
        generate_population(1)
    with pytest.raises(CapacityError):
        generate_population(10_001)


def test_dataset_counts_and_shapes():
    pop = generate_population(10, 0)
    data = build_dataset(pop, [DOMAINS["D1"], DOMAINS["D2"]], 50, "raw_iq", seed=0)
    assert len(data) == 1000
    counts = Counter((ex.device_label, ex.domain_label) for ex in data)
    assert set(counts.values()) == {50}
    assert all(ex.features.shape == (2, 1024) and np.all(np.isfinite(ex.features)) for ex in data)


def test_representations_are_paired_on_identical_frames():
    pop = generate_population(2, 1)
    both = build_dataset(pop, [DOMAINS["D3"]], 2, ("raw_iq", "vfdt"), seed=5)
    vf = build_dataset(pop, [DOMAINS["D3"]], 2, "vfdt", seed=5)
    raw = build_dataset(pop, [DOMAINS["D3"]], 2, "raw_iq", seed=5)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(both["vfdt"], vf))
    assert all(np.array_equal(a.features, b.features) for a, b in zip(both["raw_iq"], raw))
    assert all(np.all((ex.features >= 1) & (ex.features <= 2)) for ex in vf)


def test_raw_iq_is_unit_power_prefix():
    frame = received_frame(generate_population(2, 0)[0], DOMAINS["D2"], 0, 0)
    feats = raw_iq_features(frame)
    assert np.mean(feats[0] ** 2 + feats[1] ** 2) == pytest.approx(1.0)
    ratio = (feats[0] + 1j * feats[1]) / frame.samples[:1024]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


def test_domain_shift_hits_raw_iq_harder_than_vfdt():
    device = generate_population(2, 0)[:1]
    data = build_dataset(device, [DOMAINS["D1"], DOMAINS["D3"]], 10, ("raw_iq", "vfdt"), seed=0)

    def pooled(rep, domain, fn):
        return np.concatenate([fn(ex.features) for ex in data[rep] if ex.domain_label == domain])

    amp = lambda f: np.hypot(f[0], f[1])  # noqa: E731
    ks_raw = ks_2samp(pooled("raw_iq", "D1", amp), pooled("raw_iq", "D3", amp)).statistic
    ks_vfdt = ks_2samp(pooled("vfdt", "D1", np.ravel), pooled("vfdt", "D3", np.ravel)).statistic
    assert ks_raw > 0.2
    assert ks_vfdt < ks_raw


def test_build_dataset_validates():
    pop = generate_population(2, 0)
    with pytest.raises(ValidationError):
        build_dataset([], [DOMAINS["D1"]], 1, "vfdt")
    with pytest.raises(ValidationError):
        build_dataset(pop, [DOMAINS["D1"]], 1, "spectrogram")


# -- sweeps -------------------------------------------------------------------------------


@pytest.mark.parametrize("parameter", sorted(SWEEP_LEVELS))
def test_sweeps_are_monotone_and_separated(parameter):
    result = separability_sweep(parameter, seed=3)
    assert result.strictly_monotone
    assert min(result.separations) >= 1.0
    assert json.loads(json.dumps(result.to_dict()))["parameter"] == parameter


def test_sweep_rejects_unknown_parameter():
    with pytest.raises(ValidationError):
        separability_sweep("cfo_hz")


# -- experiment spec ----------------------------------------------------------------------

TINY = ExperimentSpec(
    population_size=3,
    frames_per_device_per_domain=6,
    train_domains=("D1",),
    test_domains=("D1", "D3"),
    train_config=TrainConfig(epochs=1, batch_size=8),
)


def test_spec_round_trip_and_alias():
    spec = replace(TINY, device_subset_sizes=(2, 3))
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    assert ExperimentSpec.from_dict({"representation": "vfdt"}).representations == ("vfdt",)


@pytest.mark.parametrize(
    "data",
    [
        {"population_size": 1},
        {"representation": "fft"},
        {"device_subset_sizes": [20, 15], "population_size": 30},
        {"device_subset_sizes": [40], "population_size": 30},
        {"nonsense": 1},
        {"train_config": {"epochs": 0}},
        {"train_config": {"epoch": 3}},
    ],
)
def test_spec_invariants(data):
    with pytest.raises(ValidationError):
        ExperimentSpec.from_dict(data)


def test_spec_rejects_unknown_domains():
    with pytest.raises(ValidationError):
        replace(TINY, test_domains=("D9",)).domains()


def test_spec_from_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text("[1, 2]")
    with pytest.raises(ValidationError):
        ExperimentSpec.from_json_file(path)
    path.write_text(json.dumps(TINY.to_dict()))
    assert ExperimentSpec.from_json_file(path) == TINY


# -- experiments --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_report():
    return run_domain_adaptation(TINY)


def test_domain_adaptation_cells(tiny_report):
    assert len(tiny_report.cells) == 2 * 2
    for c in tiny_report.cells:
        assert 0.0 <= c.accuracy <= 1.0
        assert c.accuracy == np.trace(c.confusion) / c.confusion.sum()
        assert c.n_devices == 3 and len(c.history) == 1
    # seen domain is scored on the held-out slice only; unseen on everything
    assert tiny_report.cell("vfdt", "D1").n_examples == 3 * 1
    assert tiny_report.cell("vfdt", "D3").n_examples == 3 * 6


def test_report_outputs(tiny_report, tmp_path):
    files = tiny_report.write(tmp_path)
    names = sorted(p.name for p in files)
    assert "report.json" in names and "accuracy.csv" in names
    assert len([n for n in names if n.startswith("confusion_")]) == 4
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["metadata"]["toolkit_version"]
    assert "wall_time_s" in report["metadata"]
    assert "wall_time_s" not in json.loads(tiny_report.to_json(include_wall_time=False))["metadata"]
    lines = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert lines[0].startswith("representation,") and len(lines) == 5
    conf = np.loadtxt(tmp_path / "confusion_vfdt_D3_n3.csv", delimiter=",")
    assert conf.sum() == 18


def test_domain_adaptation_is_reproducible(tiny_report):
    again = run_domain_adaptation(TINY)
    assert again.to_json(include_wall_time=False) == tiny_report.to_json(include_wall_time=False)


def test_scalability_nested_subsets():
    spec = replace(TINY, population_size=4, device_subset_sizes=(2, 4), representations=("vfdt",), test_domains=("D1",))
    report = run_scalability(spec)
    assert [c.n_devices for c in report.cells] == [2, 4]
    assert report.cells[0].confusion.shape == (2, 2)
    assert len(report.cells) == len(spec.device_subset_sizes) * len(spec.test_domains)


def test_scalability_needs_sizes():
    with pytest.raises(ValidationError):
        run_scalability(TINY)


def test_wall_time_recorded(tiny_report):
    assert tiny_report.wall_time_s > 0 and math.isfinite(tiny_report.wall_time_s)
