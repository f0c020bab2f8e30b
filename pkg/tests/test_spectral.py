import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mp3restore import spectral
from mp3restore.spectral import (HOP, LINEAR, SIGNED_SQRT, WIN, AudioSignal, ComplexSpectrogram, PowerSpectrogram,
                                 SpectralError)


def naive_frame_dft(x, k, t):
    """Direct DFT of one windowed frame at bin k."""
    frame = x[t * HOP:t * HOP + WIN] * spectral.hann_window()
    n = np.arange(WIN)
    return np.sum(frame * np.exp(-2j * np.pi * k * n / WIN))


def interior_rel_err(x, x_hat):
    sl = slice(WIN - HOP, len(x_hat) - (WIN - HOP))
    return np.linalg.norm(x[sl] - x_hat[sl]) / np.linalg.norm(x[sl])


def test_segment_shape():
    spec = spectral.stft(np.zeros(336 * 512))
    # 172032 samples give 333 full windows without padding; 336 frames need 3 more hops
    assert spec.data.shape == (2, 1024, spectral.n_frames_for(336 * 512))
    n = spectral.n_samples_for(336)
    assert spectral.stft(np.random.default_rng(0).standard_normal(n)).data.shape == (2, 1024, 336)


def test_zero_signal_gives_zero_spectrogram():
    spec = spectral.stft(np.zeros(WIN * 3))
    assert not spec.data.any()
    assert spec.scaling == LINEAR


def test_short_signal_rejected():
    with pytest.raises(SpectralError, match="insufficient samples"):
        spectral.stft(np.zeros(WIN - 1))


def test_bin_centred_sinusoid_matches_naive_dft():
    k = 37
    n = spectral.n_samples_for(6)
    x = np.cos(2 * np.pi * k * np.arange(n) / WIN)
    spec = spectral.stft(x)
    mag = np.hypot(spec.data[0], spec.data[1])
    assert np.all(np.argmax(mag, axis=0) == k)
    for t in range(6):
        for kk in (k - 1, k, k + 1, 200):
            ref = naive_frame_dft(x, kk, t)
            assert spec.data[0, kk, t] == pytest.approx(ref.real, abs=1e-8)
            assert spec.data[1, kk, t] == pytest.approx(ref.imag, abs=1e-8)


def test_nyquist_packed_into_dc_imag():
    n = spectral.n_samples_for(3)
    x = np.random.default_rng(1).standard_normal(n)
    spec = spectral.stft(x)
    for t in range(3):
        assert spec.data[0, 0, t] == pytest.approx(naive_frame_dft(x, 0, t).real, abs=1e-9)
        assert spec.data[1, 0, t] == pytest.approx(naive_frame_dft(x, WIN // 2, t).real, abs=1e-9)


def test_white_noise_round_trip():
    x = np.random.default_rng(2).standard_normal(spectral.n_samples_for(20))
    y = spectral.istft(spectral.stft(x)).samples
    assert interior_rel_err(x, y) < 1e-6


def test_chirp_round_trip_against_overlap_add_oracle():
    n = spectral.n_samples_for(30)
    t = np.arange(n) / spectral.SAMPLE_RATE
    x = np.sin(2 * np.pi * (200 * t + 4000 * t ** 2))
    spec = spectral.stft(x)
    y = spectral.istft(spec).samples
    assert interior_rel_err(x, y) < 1e-6
    # explicit overlap-add of the inverse-FFT frames
    w = spectral.hann_window()
    acc, norm = np.zeros(n), np.zeros(n)
    c = spec.data[0] + 1j * spec.data[1]
    full = np.zeros((WIN // 2 + 1, c.shape[1]), complex)
    full[:WIN // 2] = c
    full[0] = spec.data[0, 0]
    full[WIN // 2] = spec.data[1, 0]
    for k in range(c.shape[1]):
        acc[k * HOP:k * HOP + WIN] += np.fft.irfft(full[:, k], WIN) * w
        norm[k * HOP:k * HOP + WIN] += w ** 2
    oracle = np.where(norm > 1e-10, acc / np.maximum(norm, 1e-10), 0)
    np.testing.assert_allclose(y, oracle[:len(y)], atol=1e-10)


def test_zero_spectrogram_to_zero_signal():
    out = spectral.istft(ComplexSpectrogram(np.zeros((2, 1024, 5)), LINEAR))
    assert not out.samples.any()


def test_istft_requires_linear():
    spec = spectral.stft(np.ones(WIN)).to_signed_sqrt()
    with pytest.raises(SpectralError, match="apply signed_square first"):
        spectral.istft(spec)


@pytest.mark.parametrize("x, y", [(-4.0, -2.0), (0.0, 0.0), (2.25, 1.5)])
def test_signed_sqrt_examples(x, y):
    assert spectral.signed_sqrt(np.float64(x)) == y
    assert spectral.signed_square(np.float64(y)) == x


def test_signed_sqrt_twice_is_error():
    spec = ComplexSpectrogram(np.ones((2, 4, 3)), LINEAR).to_signed_sqrt()
    assert spec.scaling == SIGNED_SQRT
    with pytest.raises(SpectralError):
        spec.to_signed_sqrt()


def test_signed_sqrt_torch_matches_numpy():
    a = np.random.default_rng(3).standard_normal((2, 5, 7))
    np.testing.assert_array_equal(spectral.signed_sqrt(torch.from_numpy(a)).numpy(), spectral.signed_sqrt(a))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(finite, finite)
def test_signed_sqrt_odd_and_monotone(a, b):
    f = spectral.signed_sqrt
    assert f(np.float64(-a)) == -f(np.float64(a))
    if a < b:
        assert f(np.float64(a)) < f(np.float64(b))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25)
def test_signed_square_round_trip(seed):
    x = np.random.default_rng(seed).standard_normal((2, 16, 9)) * 10.0 ** np.random.default_rng(seed).uniform(-3, 3)
    err = np.max(np.abs(spectral.signed_square(spectral.signed_sqrt(x)) - x))
    assert err < 1e-12 * np.max(np.abs(x))


def test_power_spectrogram():
    d = np.zeros((2, 4, 3))
    d[0, 1, 2], d[1, 1, 2] = 3.0, 4.0
    p = spectral.power_spectrogram(ComplexSpectrogram(d, LINEAR))
    assert p.data[1, 2] == 25.0
    assert p.data.sum() == 25.0
    assert not spectral.power_spectrogram(ComplexSpectrogram(np.zeros((2, 4, 3)), LINEAR)).data.any()


def test_power_spectrogram_random_matches_complex_magnitude():
    d = np.random.default_rng(4).standard_normal((2, 32, 10))
    p = spectral.power_spectrogram(ComplexSpectrogram(d, LINEAR)).data
    np.testing.assert_allclose(p, np.abs(d[0] + 1j * d[1]) ** 2, rtol=1e-12)


def test_power_spectrogram_rejects_negative():
    with pytest.raises(SpectralError):
        PowerSpectrogram(-np.ones((4, 3)))


@given(st.floats(-100, 100, allow_nan=False).filter(lambda a: abs(a) > 1e-3))
@settings(max_examples=10, deadline=None)
def test_stft_linear(alpha):
    x = np.random.default_rng(5).standard_normal(WIN + 4 * HOP)
    np.testing.assert_allclose(spectral.stft(alpha * x).data, alpha * spectral.stft(x).data, rtol=1e-9, atol=1e-9)


def test_audio_signal_invariants():
    with pytest.raises(SpectralError):
        AudioSignal(np.array([0.0, np.nan]))
    with pytest.raises(SpectralError):
        AudioSignal(np.zeros(10), 48000)
    with pytest.raises(SpectralError):
        AudioSignal(np.zeros((10, 2)))


def test_complex_spectrogram_shape_checked():
    with pytest.raises(SpectralError):
        ComplexSpectrogram(np.zeros((3, 4, 5)), LINEAR)
    with pytest.raises(SpectralError):
        ComplexSpectrogram(np.full((2, 4, 5), np.inf), LINEAR)


def test_wav_rate_mismatch(tmp_path):
    from scipy.io import wavfile
    path = tmp_path / "a.wav"
    wavfile.write(path, 22050, np.zeros(2205, np.int16))
    with pytest.raises(SpectralError):
        spectral.load_wav(path)
    sig = spectral.load_wav(path, resample=True)
    assert sig.sample_rate == 44100 and len(sig) == 4410


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(6).uniform(-0.5, 0.5, 1000)
    p = spectral.save_wav(tmp_path / "f.wav", AudioSignal(x), subtype="FLOAT")
    np.testing.assert_allclose(spectral.load_wav(p).samples, x, atol=1e-7)
    p = spectral.save_wav(tmp_path / "i.wav", AudioSignal(x))
    np.testing.assert_allclose(spectral.load_wav(p).samples, x, atol=1 / 32767)
