import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile
from scipy.signal import get_window

from mkws.audio import (
    AudioBuffer,
    FrontendConfig,
    compute_spectrogram,
    frame_stream,
    hz_to_mel,
    load_audio,
    log_mel_frames,
    mel_center_frequencies,
    save_audio,
    to_int16,
)
from mkws.audio import _filterbank
from mkws.errors import AudioFormatError, ShapeError

CFG = FrontendConfig()


def reference_log_mel(x, cfg):
    """Frame-by-frame route: explicit loop, scipy window, filterbank built from the mel formula."""
    win = get_window("hann", cfg.window_len, fftbins=True)
    n_fft = 512
    freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    lo, hi = 2595 * np.log10(1 + cfg.mel_low_hz / 700), 2595 * np.log10(1 + cfg.mel_high_hz / 700)
    edges = 700 * (10 ** (np.linspace(lo, hi, cfg.num_mel_bins + 2) / 2595) - 1)
    fb = np.zeros((len(freqs), cfg.num_mel_bins))
    for m in range(cfg.num_mel_bins):
        for k, f in enumerate(freqs):
            if edges[m] < f <= edges[m + 1]:
                fb[k, m] = (f - edges[m]) / (edges[m + 1] - edges[m])
            elif edges[m + 1] < f < edges[m + 2]:
                fb[k, m] = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
    rows = []
    for start in range(0, len(x) - cfg.window_len + 1, cfg.hop_len):
        frame = x[start : start + cfg.window_len] * win
        mag = np.abs(np.fft.rfft(frame, n_fft))
        rows.append(np.log(mag @ fb + cfg.log_floor))
    return np.array(rows)


def test_one_second_gives_49_by_40():
    spec = compute_spectrogram(AudioBuffer(np.zeros(16000)), CFG)
    assert spec.shape == (49, 40)
    assert spec.values.dtype == np.float32


def test_silence_is_log_floor_everywhere():
    spec = compute_spectrogram(AudioBuffer(np.zeros(16000)), CFG)
    assert np.all(spec.values == np.float32(np.log(1e-6)))


def test_matches_frame_loop_reference():
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 4000)
    got = log_mel_frames(x, CFG)
    np.testing.assert_allclose(got, reference_log_mel(x, CFG), atol=1e-4)


def test_sine_peaks_in_nearest_mel_bin():
    t = np.arange(16000) / 16000
    spec = log_mel_frames(0.5 * np.sin(2 * np.pi * 1000 * t), CFG)
    # oracle: direct DFT peak frequency, then the filter whose center is nearest
    frame = 0.5 * np.sin(2 * np.pi * 1000 * t[:480]) * get_window("hann", 480)
    peak_hz = np.argmax(np.abs(np.fft.rfft(frame, 512))) * 16000 / 512
    expected = int(np.argmin(np.abs(mel_center_frequencies(CFG) - peak_hz)))
    assert set(np.argmax(spec, axis=1).tolist()) == {expected}


def test_htk_mel_scale_and_unit_peak_filters():
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)
    fb = _filterbank(CFG)
    assert fb.shape == (257, 40)
    assert np.all(fb >= 0) and np.all(fb.max(axis=0) <= 1.0)
    assert np.all(fb.max(axis=0) > 0.5)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(480, 6000), win=st.sampled_from([20.0, 25.0, 30.0]), hop=st.sampled_from([10.0, 20.0]))
def test_shape_law(n, win, hop):
    cfg = FrontendConfig(window_ms=win, hop_ms=hop)
    if n < cfg.window_len:
        return
    out = log_mel_frames(np.ones(n) * 0.1, cfg)
    assert out.shape[0] == (n - cfg.window_len) // cfg.hop_len + 1 == cfg.num_frames(n)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1.0, 20.0))
def test_scaling_up_never_lowers_energy(seed, c):
    x = np.random.default_rng(seed).uniform(-0.05, 0.05, 1600)
    assert np.all(log_mel_frames(c * x, CFG) >= log_mel_frames(x, CFG))


def test_deterministic():
    x = np.random.default_rng(3).normal(0, 0.1, 16000)
    assert np.array_equal(log_mel_frames(x, CFG), log_mel_frames(x, CFG))


def test_short_buffer_rejected():
    with pytest.raises(ShapeError):
        compute_spectrogram(AudioBuffer(np.zeros(100)), CFG)


@pytest.mark.parametrize("kwargs", [dict(window_ms=10, hop_ms=20), dict(num_mel_bins=1), dict(mel_high_hz=9000),
                                    dict(log_floor=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        FrontendConfig(**kwargs)


def test_buffer_invariants():
    with pytest.raises(ShapeError):
        AudioBuffer(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(4), 0)


# -- WAV I/O -----------------------------------------------------------------


def test_silence_wav_loads_as_zeros(tmp_path):
    wavfile.write(tmp_path / "s.wav", 16000, np.zeros(16000, np.int16))
    buf = load_audio(tmp_path / "s.wav")
    assert len(buf) == 16000 and not buf.samples.any()


def test_full_scale_mapping():
    assert to_int16(np.array([1.0, -1.0])).tolist() == [32767, -32768]


def test_save_zeros_writes_zero_data(tmp_path):
    save_audio(AudioBuffer(np.zeros(50)), tmp_path / "z.wav")
    with wave.open(str(tmp_path / "z.wav")) as w:
        assert w.getsampwidth() == 2 and w.getframerate() == 16000
        assert w.readframes(50) == b"\x00" * 100


def test_round_trip_is_sample_identical_for_int16(tmp_path):
    data = np.random.default_rng(1).integers(-32768, 32767, 16000).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, data)
    first = load_audio(tmp_path / "a.wav")
    save_audio(first, tmp_path / "b.wav")
    assert np.array_equal(load_audio(tmp_path / "b.wav").samples, first.samples)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_quantization_bound(tmp_path_factory, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, 500).astype(np.float32)
    path = tmp_path_factory.mktemp("q") / "x.wav"
    save_audio(AudioBuffer(x), path)
    assert np.max(np.abs(load_audio(path).samples - x)) <= 2.0**-15


def test_resample_8k_doubles_length(tmp_path):
    data = np.random.default_rng(2).integers(-20000, 20000, 8000).astype(np.int16)
    wavfile.write(tmp_path / "n.wav", 8000, data)
    buf = load_audio(tmp_path / "n.wav")
    assert len(buf) == 16000
    src = data / 32768.0
    oracle = np.interp(np.arange(16000) / 2.0, np.arange(8000), src)
    np.testing.assert_allclose(buf.samples, oracle, atol=1e-6)


def test_float_and_stereo_inputs(tmp_path):
    stereo = np.stack([np.full(100, 0.5), np.full(100, -0.1)], axis=1).astype(np.float32)
    wavfile.write(tmp_path / "st.wav", 16000, stereo)
    np.testing.assert_allclose(load_audio(tmp_path / "st.wav").samples, 0.2, atol=1e-7)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_audio(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(AudioFormatError):
        load_audio(tmp_path / "junk.wav")
    wavfile.write(tmp_path / "empty.wav", 16000, np.zeros(0, np.int16))
    with pytest.raises(AudioFormatError):
        load_audio(tmp_path / "empty.wav")


# -- framing ------------------------------------------------------------------


def test_frame_stream_arithmetic():
    windows = list(frame_stream(AudioBuffer(np.arange(32000) / 32000), 1.0, 0.5))
    assert [t for t, _ in windows] == [0.0, 0.5, 1.0]
    assert all(len(w) == 16000 for _, w in windows)


def test_frame_stream_single_window():
    assert [t for t, _ in frame_stream(AudioBuffer(np.zeros(16000)))] == [0.0]


def test_ten_minutes_gives_29951_windows():
    from mkws.audio import num_stream_windows

    assert num_stream_windows(600 * 16000, 16000, 320) == 29951


def test_frame_stream_tiles_prefix():
    x = np.random.default_rng(0).normal(size=50000).astype(np.float32)
    parts = [w.samples for _, w in frame_stream(AudioBuffer(x), 1.0, 1.0)]
    assert np.array_equal(np.concatenate(parts), x[: 16000 * len(parts)])


def test_frame_stream_errors():
    with pytest.raises(ValueError):
        list(frame_stream(AudioBuffer(np.zeros(16000)), 1.0, 0.0))
    with pytest.raises(ShapeError):
        list(frame_stream(AudioBuffer(np.zeros(100)), 1.0, 0.02))
