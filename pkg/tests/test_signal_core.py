import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfdt_fingerprint.errors import DataError, FormatError, MetadataError, ValidationError
from vfdt_fingerprint.signal_core import (
    CaptureStream,
    IqFrame,
    detect_bursts,
    extract_frames,
    read_cf32,
    write_cf32,
)


def _write_raw(path, floats, meta=None):
    path.write_bytes(np.asarray(floats, dtype="<f4").tobytes())
    if meta is not None:
        (path.parent / (path.name + ".json")).write_text(json.dumps(meta))


def test_read_cf32_byte_layout(tmp_path):
    path = tmp_path / "two.cf32"
    _write_raw(path, [1.0, 0.0, 0.0, 1.0], {"sample_rate_hz": 1e6})
    stream = read_cf32(path)
    assert len(stream) == 2
    assert stream.samples[0] == 1 + 0j
    assert stream.samples[1] == 0 + 1j
    assert stream.sample_rate_hz == 1e6


def test_read_cf32_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.cf32"
    _write_raw(path, [], {"sample_rate_hz": 1e6})
    with pytest.raises(FormatError):
        read_cf32(path)


def test_read_cf32_rejects_partial_sample(tmp_path):
    path = tmp_path / "odd.cf32"
    _write_raw(path, [1.0, 2.0, 3.0], {"sample_rate_hz": 1e6})
    with pytest.raises(FormatError):
        read_cf32(path)


@pytest.mark.parametrize(
    "sidecar",
    [None, "not json", {"rate": 1e6}, {"sample_rate_hz": -5}, {"sample_rate_hz": "fast"}, [1, 2]],
)
def test_read_cf32_metadata_errors(tmp_path, sidecar):
    path = tmp_path / "x.cf32"
    _write_raw(path, [1.0, 0.0])
    if sidecar is not None:
        text = sidecar if isinstance(sidecar, str) else json.dumps(sidecar)
        (tmp_path / "x.cf32.json").write_text(text)
    with pytest.raises(MetadataError):
        read_cf32(path)


def test_read_cf32_rejects_nan(tmp_path):
    path = tmp_path / "nan.cf32"
    _write_raw(path, [1.0, np.nan], {"sample_rate_hz": 1e6})
    with pytest.raises(DataError):
        read_cf32(path)


def test_write_cf32_layout_and_sidecar(tmp_path):
    path = tmp_path / "out.cf32"
    write_cf32(CaptureStream(np.array([1 + 2j, -3 + 0.5j]), 45e6), path)
    assert path.stat().st_size == 16
    assert np.frombuffer(path.read_bytes(), dtype="<f4").tolist() == [1.0, 2.0, -3.0, 0.5]
    assert json.loads((tmp_path / "out.cf32.json").read_text()) == {"sample_rate_hz": 45000000.0}


def test_cf32_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    samples = (rng.standard_normal(1024) + 1j * rng.standard_normal(1024)).astype(np.complex64)
    path = tmp_path / "rt.cf32"
    write_cf32(CaptureStream(samples, 2e6, source_label="dev007", domain_label="D2"), path)
    back = read_cf32(path)
    assert back.samples.view(np.uint32).tolist() == samples.view(np.uint32).tolist()
    assert (back.sample_rate_hz, back.source_label, back.domain_label) == (2e6, "dev007", "D2")


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(i_samples=[1.0, 2.0], q_samples=[1.0]),
        dict(i_samples=[], q_samples=[]),
        dict(i_samples=[np.nan], q_samples=[0.0]),
        dict(i_samples=[1.0], q_samples=[0.0], sample_rate_hz=0.0),
    ],
)
def test_iq_frame_invariants(kwargs):
    kwargs.setdefault("sample_rate_hz", 1e6)
    with pytest.raises((ValidationError, DataError)):
        IqFrame(**kwargs)


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=64))
def test_split_merge_round_trip(pairs):
    frame = IqFrame([p[0] for p in pairs], [p[1] for p in pairs], 1e6, "a", "b")
    again = IqFrame.from_complex(frame.samples, frame.sample_rate_hz, "a", "b")
    assert again.equals(frame)


def _bursty_stream(starts, lengths, total, amplitude=1.0, seed=0):
    rng = np.random.default_rng(seed)
    s = np.zeros(total, dtype=np.complex128)
    for start, n in zip(starts, lengths):
        phase = rng.uniform(0, 2 * np.pi, n)
        s[start : start + n] = amplitude * np.exp(1j * phase)
    return CaptureStream(s, 1e6)


def test_extract_single_burst():
    s = np.concatenate([np.zeros(1000), np.ones(2000), np.zeros(1000)])
    frames = extract_frames(CaptureStream(s, 1e6), 0.5, 100, 4000)
    assert len(frames) == 1
    assert abs(len(frames[0]) - 2000) <= 64


def test_extract_all_zero_stream():
    assert extract_frames(CaptureStream(np.zeros(5000), 1e6), 0.5, 100, 4000) == []


def test_extract_recovers_ten_bursts():
    rng = np.random.default_rng(3)
    lengths = rng.integers(800, 3000, size=10)
    gaps = rng.integers(500, 2000, size=10)
    starts = np.cumsum(gaps + np.concatenate([[0], lengths[:-1]]))
    stream = _bursty_stream(starts, lengths, int(starts[-1] + lengths[-1] + 1000), seed=4)
    spans = detect_bursts(stream, 0.5, 100, 10_000)
    assert len(spans) == 10
    assert np.all(np.abs(np.array([a for a, _ in spans]) - starts) <= 64)
    assert len(extract_frames(stream, 0.5, 100, 10_000)) == 10


def test_extract_drops_short_and_truncates_long():
    stream = _bursty_stream([1000, 3000], [150, 5000], 9000)
    frames = extract_frames(stream, 0.5, 300, 4000)
    assert len(frames) == 1
    assert len(frames[0]) == 4000


def test_extract_keeps_labels_and_order():
    stream = _bursty_stream([500, 4000], [1000, 1500], 7000)
    stream = CaptureStream(stream.samples, 1e6, "dev1", "D3")
    frames = extract_frames(stream, 0.5, 100, 4000)
    assert [abs(len(f) - n) <= 64 for f, n in zip(frames, [1000, 1500])] == [True, True]
    assert all(f.source_label == "dev1" and f.domain_label == "D3" for f in frames)


@pytest.mark.parametrize("args", [(0.0, 10, 20), (0.5, 0, 20), (0.5, 30, 20)])
def test_extract_validates_arguments(args):
    with pytest.raises(ValidationError):
        extract_frames(CaptureStream(np.ones(100), 1e6), *args)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_extract_is_idempotent_on_its_output(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    lengths = rng.integers(200, 1500, size=n)
    starts = np.cumsum(rng.integers(300, 900, size=n) + np.concatenate([[0], lengths[:-1]]))
    stream = _bursty_stream(starts, lengths, int(starts[-1] + lengths[-1] + 400), seed=seed)
    noisy = stream.with_samples(stream.samples + 0.05 * (rng.standard_normal(len(stream)) + 1j * rng.standard_normal(len(stream))))
    for frame in extract_frames(noisy, 0.5, 100, 5000):
        again = extract_frames(frame.to_stream(), 0.5, 100, 5000)
        assert len(again) == 1
        assert again[0].equals(frame)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_frame_count_invariant_under_scaling(scale, seed):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(200, 1200, size=4)
    starts = np.cumsum(rng.integers(300, 900, size=4) + np.concatenate([[0], lengths[:-1]]))
    stream = _bursty_stream(starts, lengths, int(starts[-1] + lengths[-1] + 500), seed=seed)
    base = len(extract_frames(stream, 0.5, 100, 5000))
    scaled = len(extract_frames(stream.with_samples(stream.samples * scale), 0.5 * scale**2, 100, 5000))
    assert scaled == base == 4
