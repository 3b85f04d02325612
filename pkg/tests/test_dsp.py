import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmotion.dsp import (MelConfig, MelSpectrogram, Waveform, crop_offsets, griffin_lim, hz_to_mel,
                              invert_mel, istft, log_mel_energies, mel_filterbank, melspectrogram,
                              sliding_crops, stft)
from speechmotion.errors import BadConfig, DegenerateNormalization, InputTooShort, MissingMetadata
from speechmotion.metrics import corr2d

SR = 10_000


def harmonic_tone(n=21_000, f0=150.0, sr=SR):
    t = np.arange(n) / sr
    vib = 1.0 + 0.05 * np.sin(2 * np.pi * 2.0 * t)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * 1.3 * t) ** 2
    x = sum(np.sin(2 * np.pi * k * f0 * np.cumsum(vib) / sr) / k for k in range(1, 7))
    return Waveform(0.3 * env * x, sr)


def naive_stft(x, n_fft, hop):
    # direct O(n^2) DFT of every reflect-padded Hann frame
    half = n_fft // 2
    xp = np.pad(x, half, mode="reflect")
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    cols = [basis @ (xp[t * hop:t * hop + n_fft] * win) for t in range(1 + x.size // hop)]
    return np.stack(cols, axis=1)


def naive_ola(bins, n_fft, hop, length):
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    total = n_fft + hop * (bins.shape[1] - 1)
    y, wss = np.zeros(total), np.zeros(total)
    for t in range(bins.shape[1]):
        frame = np.fft.irfft(bins[:, t], n=n_fft)
        for i in range(n_fft):
            y[t * hop + i] += frame[i] * win[i]
            wss[t * hop + i] += win[i] ** 2
    y = np.where(wss > 1e-10, y / np.where(wss > 1e-10, wss, 1), 0)
    return y[n_fft // 2:n_fft // 2 + length]


# -- stft / istft -----------------------------------------------------------

def test_stft_of_zero_signal_is_exactly_zero():
    s = stft(Waveform(np.zeros(4096), SR), 512, 128)
    assert np.all(s.bins == 0)


def test_stft_matches_naive_dft():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(700)
    s = stft(Waveform(x, SR), 128, 32)
    np.testing.assert_allclose(s.bins, naive_stft(x, 128, 32), atol=1e-10)


def test_bin_centered_sinusoid_peaks_at_its_bin():
    n_fft, k = 256, 19
    x = np.sin(2 * np.pi * k * np.arange(4096) / n_fft)
    s = stft(Waveform(x, SR), n_fft, 64)
    interior = np.abs(s.bins[:, 4:-4])
    assert np.all(np.argmax(interior, axis=0) == k)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_fft=st.sampled_from([64, 256, 1024]))
def test_cola_round_trip_interior(seed, n_fft):
    x = np.random.default_rng(seed).standard_normal(n_fft * 6)
    hop = n_fft // 4
    y = istft(stft(Waveform(x, SR), n_fft, hop), length=x.size).samples
    inner = slice(n_fft, x.size - n_fft)
    assert np.max(np.abs(y[inner] - x[inner])) <= 1e-10


def test_round_trip_at_default_hop_is_exact_too():
    x = np.random.default_rng(0).standard_normal(21_000)
    y = istft(stft(Waveform(x, SR), 1024, 328), length=x.size).samples
    assert np.max(np.abs(y[1024:-1024] - x[1024:-1024])) <= 1e-10


def test_istft_of_zero_spectrogram_is_zero():
    s = stft(Waveform(np.zeros(2048), SR), 256, 64)
    assert np.all(istft(s).samples == 0)


def test_istft_matches_naive_overlap_add_on_chirp():
    t = np.arange(3000) / SR
    x = np.sin(2 * np.pi * (100 + 1500 * t) * t)
    s = stft(Waveform(x, SR), 256, 64)
    np.testing.assert_allclose(istft(s, length=x.size).samples, naive_ola(s.bins, 256, 64, x.size), atol=1e-12)


def test_stft_errors():
    with pytest.raises(InputTooShort):
        stft(Waveform(np.ones(100), SR), 256, 64)
    with pytest.raises(BadConfig):
        stft(Waveform(np.ones(1000), SR), 300, 75)


def test_istft_rejects_non_invertible_hop():
    s = stft(Waveform(np.ones(2048), SR), 256, 256)
    with pytest.raises(BadConfig):
        istft(s)


# -- filterbank -------------------------------------------------------------

def test_mel_formula_points():
    assert hz_to_mel(0.0) == 0.0
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-12)
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.005)


def _assert_filterbank_invariants(fb, n_fft, sr, fmin, fmax):
    w = fb.weights
    assert np.all(w >= 0)
    np.testing.assert_array_equal(w.max(axis=1), np.ones(w.shape[0]))
    for row in w:
        nz = np.flatnonzero(row)
        seg = row[nz[0]:nz[-1] + 1]
        peak = int(np.argmax(seg))
        assert np.all(np.diff(seg[:peak + 1]) >= 0) and np.all(np.diff(seg[peak:]) <= 0)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    inside = (freqs > fmin) & (freqs < fmax)
    assert np.all(w[:, inside].sum(axis=0) > 0)


def test_default_filterbank_invariants():
    fb = mel_filterbank(64, 1024, 10_000, 40, 1000)
    assert fb.weights.shape == (64, 513)
    _assert_filterbank_invariants(fb, 1024, 10_000, 40, 1000)


@settings(max_examples=30, deadline=None)
@given(n_mels=st.integers(2, 40), fmin=st.floats(0, 500), span=st.floats(1500, 4000))
def test_filterbank_invariants_property(n_mels, fmin, span):
    fmax = min(fmin + span, 5000.0)
    fb = mel_filterbank(n_mels, 2048, 10_000, fmin, fmax)
    _assert_filterbank_invariants(fb, 2048, 10_000, fmin, fmax)


def test_filterbank_rejects_fmax_above_nyquist():
    with pytest.raises(BadConfig):
        mel_filterbank(64, 1024, 10_000, 40, 6000)


# -- melspectrogram ---------------------------------------------------------

def test_default_crop_gives_64_by_64():
    m = melspectrogram(harmonic_tone())
    assert m.shape == (64, 64)
    assert m.values.min() == 0.0 and m.values.max() == 1.0
    lo, hi = m.norm
    np.testing.assert_allclose(m.log_energies(), log_mel_energies(harmonic_tone()), atol=1e-12)


def test_zero_signal_is_degenerate():
    with pytest.raises(DegenerateNormalization):
        melspectrogram(Waveform(np.zeros(21_000), SR))


def test_noise_power_increases_total_mel_energy():
    tone = harmonic_tone().samples
    noise = np.random.default_rng(0).standard_normal(tone.size)
    totals = [np.exp(log_mel_energies(Waveform(tone + a * noise, SR))).sum() for a in (0.01, 0.05, 0.2)]
    assert totals[0] < totals[1] < totals[2]


def test_melspectrogram_is_bit_deterministic():
    a, b = melspectrogram(harmonic_tone()), melspectrogram(harmonic_tone())
    assert a.values.tobytes() == b.values.tobytes() and a.norm == b.norm


def test_short_crop_is_rejected():
    with pytest.raises(InputTooShort):
        melspectrogram(Waveform(np.random.default_rng(0).standard_normal(15_000), SR))


# -- inversion --------------------------------------------------------------

def test_mel_round_trip_on_harmonic_tone():
    m = melspectrogram(harmonic_tone())
    back = melspectrogram(invert_mel(m, iterations=60, seed=0))
    assert corr2d(m, back) >= 0.95


def test_inverted_length_maps_back_to_n_time_frames():
    m = melspectrogram(harmonic_tone())
    w = invert_mel(m, iterations=2)
    assert len(w) == 328 * 63
    assert melspectrogram(w).shape == (64, 64)


def test_zero_iterations_is_deterministic_given_seed():
    m = melspectrogram(harmonic_tone())
    a, b = invert_mel(m, iterations=0, seed=4), invert_mel(m, iterations=0, seed=4)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, invert_mel(m, iterations=0, seed=5).samples)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_griffin_lim_residual_non_increasing_on_random_mel(seed):
    rng = np.random.default_rng(seed)
    m = MelSpectrogram(rng.random((64, 64)), (-12.0, 2.0), MelConfig())
    _, res = invert_mel(m, iterations=25, seed=seed, return_residuals=True)
    assert len(res) == 26
    assert np.all(np.diff(res) <= 1e-9)


def test_griffin_lim_rejects_negative_iterations():
    with pytest.raises(BadConfig):
        griffin_lim(np.ones((65, 10)), 128, 32, iterations=-1)


def test_inversion_needs_normalization_record():
    with pytest.raises(MissingMetadata):
        invert_mel(MelSpectrogram(np.zeros((64, 64))))


# -- crops ------------------------------------------------------------------

def test_crop_offsets_examples():
    offs = crop_offsets(24_175, 21_000, 100)
    assert len(offs) == 100 and offs[0] == 0 and offs[-1] == 3175
    assert crop_offsets(21_832, 21_000, 3) == [0, 416, 832]
    assert crop_offsets(21_000, 21_000, 5) == [0] * 5


def test_crops_are_exact_slices():
    x = np.random.default_rng(1).standard_normal(24_000)
    crops = sliding_crops(Waveform(x, SR), 21_000, 4)
    assert all(len(c) == 21_000 for c in crops)
    assert np.array_equal(crops[-1].samples, x[-21_000:])
    assert np.array_equal(crops[0].samples, x[:21_000])


@given(n=st.integers(10, 5000), frac=st.floats(0.05, 1.0), count=st.integers(1, 60))
def test_crop_offsets_property(n, frac, count):
    crop = max(1, int(n * frac))
    offs = crop_offsets(n, crop, count)
    assert len(offs) == count and offs[0] == 0
    assert all(b >= a for a, b in zip(offs, offs[1:]))
    if count > 1:
        assert offs[-1] + crop == n


def test_crop_errors():
    with pytest.raises(InputTooShort):
        sliding_crops(Waveform(np.ones(100), SR), 200, 2)
    with pytest.raises(BadConfig):
        crop_offsets(100, 50, 0)


def test_waveform_validation():
    with pytest.raises(BadConfig):
        Waveform(np.array([0.0, np.nan]), SR)
    with pytest.raises(BadConfig):
        Waveform(np.array([]), SR)
