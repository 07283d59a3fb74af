import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslsv.audio_io import Waveform
from sslsv.features import (
    FeatureMatrix,
    SpectrogramConfig,
    hz_to_mel,
    instance_mvn,
    log_mel,
    mel_filterbank,
    num_frames,
    stft_power,
)

from oracles import dft_power

CFG = SpectrogramConfig()


def test_frame_count_two_seconds():
    assert (32000 - 400) // 160 + 1 == 198
    assert stft_power(np.zeros(32000)).shape == (198, 257)


@given(st.integers(400, 5000))
def test_frame_count_formula(n):
    assert stft_power(np.zeros(n)).shape[0] == num_frames(n, CFG) == (n - 400) // 160 + 1


def test_matches_direct_dft(rng):
    x = rng.normal(size=4000)
    ref = dft_power(x)
    out = stft_power(x)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) < 1e-8


def test_sine_peak_bin():
    x = np.sin(2 * np.pi * 1000 * np.arange(32000) / 16000)
    expected = round(1000 * 512 / 16000)
    assert expected == 32
    assert np.all(stft_power(x).argmax(axis=1) == expected)
    assert np.all(dft_power(x[:4000]).argmax(axis=1) == expected)


def test_zero_input():
    assert not stft_power(np.zeros(1000)).any()
    np.testing.assert_allclose(log_mel(np.zeros(1000)).values, np.log(1e-10))


def test_too_short():
    with pytest.raises(ValueError):
        stft_power(np.zeros(399))


def test_mel_scale():
    assert hz_to_mel(0.0) == 0.0
    assert abs(hz_to_mel(1000.0) - 2595 * np.log10(1 + 1000 / 700)) < 1e-12
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.1


def test_filterbank_shape_and_triangles():
    fb = mel_filterbank(CFG)
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0)
    peaks = fb.argmax(axis=1)
    assert np.all(np.diff(peaks) >= 0)
    for row in fb:
        support = np.flatnonzero(row)
        assert np.all(np.diff(support) == 1)  # contiguous
        vals = row[support]
        top = int(np.argmax(vals))
        assert np.all(np.diff(vals[: top + 1]) >= 0) and np.all(np.diff(vals[top:]) <= 0)


def test_filterbank_too_many_mels():
    with pytest.raises(ValueError):
        mel_filterbank(SpectrogramConfig(n_mels=400))


def test_log_mel_shape_and_gain_shift(rng):
    x = rng.uniform(-0.2, 0.2, 32000)
    a = log_mel(Waveform(x))
    assert a.values.shape == (198, 40) and not a.normalized
    b = log_mel(Waveform(2 * x))
    np.testing.assert_allclose(b.values - a.values, np.log(4), atol=1e-6)


def test_mvn_examples():
    f = instance_mvn(FeatureMatrix(np.array([[1.0, 5.0], [3.0, 5.0]])))
    np.testing.assert_allclose(f.values[:, 0], [-1, 1], atol=1e-7)
    np.testing.assert_array_equal(f.values[:, 1], [0, 0])
    assert f.normalized


def test_mvn_statistics_and_idempotence(rng):
    f = instance_mvn(log_mel(Waveform(rng.uniform(-0.5, 0.5, 32000))))
    assert np.all(np.abs(f.values.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(f.values.std(axis=0) - 1) < 1e-4)
    np.testing.assert_allclose(instance_mvn(f).values, f.values, atol=1e-6)


def test_mvn_needs_two_frames():
    with pytest.raises(ValueError):
        instance_mvn(FeatureMatrix(np.zeros((1, 40))))


def test_deterministic(rng):
    x = rng.uniform(-0.5, 0.5, 8000)
    assert np.array_equal(log_mel(x).values, log_mel(x.copy()).values)
