import numpy as np
import pytest

from speecheq import augment
from speecheq.audio import Waveform
from speecheq.augment import AugmentPolicy

SR = 16000


def tone(freq, dur=1.0, amp=0.3):
    t = np.arange(int(SR * dur)) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


def peak_hz(x):
    n = 1 << 18
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=n))
    return np.argmax(spec) * SR / n


def snr_db(clean, mixed):
    noise = mixed - clean
    return 10 * np.log10(np.mean(clean**2) / np.mean(noise**2))


@pytest.mark.parametrize("target", [10.0, 13.5, 17.0, 20.0, 25.0])
def test_snr(target):
    noise = np.random.default_rng(0).standard_normal(5000)
    w = tone(300)
    out = augment.mix_noise(w, noise, target)
    assert abs(snr_db(w.samples, out.samples) - target) < 0.1


def test_snr_errors():
    w = tone(300)
    with pytest.raises(augment.AugmentParameterError):
        augment.mix_noise(w, np.ones(10), float("inf"))
    with pytest.raises(augment.UndefinedSNRError):
        augment.mix_noise(w, np.zeros(10), 10.0)
    with pytest.raises(augment.UndefinedSNRError):
        augment.mix_noise(w, np.array([]), 10.0)


def test_clipping_warns(caplog):
    out = augment.mix_noise(tone(300, amp=0.99), np.random.default_rng(0).standard_normal(100), 0.0)
    assert np.max(np.abs(out.samples)) <= 1.0
    assert "clipping" in caplog.text


@pytest.mark.parametrize("semis", [-3, 3, 7])
def test_pitch_shift_moves_peak(semis):
    out = augment.shift_pitch(tone(440), semis)
    assert len(out) == SR
    assert peak_hz(out.samples) == pytest.approx(440 * 2 ** (semis / 12), rel=0.02)


def test_pitch_identity_and_bounds():
    w = tone(440)
    assert np.array_equal(augment.shift_pitch(w, 0).samples, w.samples)
    with pytest.raises(augment.AugmentParameterError):
        augment.shift_pitch(w, 13)


@pytest.mark.parametrize("ratio", [0.8, 0.9, 1.1, 1.3])
def test_speed_changes_length_not_pitch(ratio):
    w = tone(440)
    out = augment.change_speed(w, ratio)
    assert abs(len(out) - len(w) / ratio) <= 1
    assert peak_hz(out.samples) == pytest.approx(440, rel=0.02)


def test_speed_bounds():
    with pytest.raises(augment.AugmentParameterError):
        augment.change_speed(tone(440), 3.0)


def test_reverb_identity_and_delay():
    w = tone(300, dur=0.2)
    np.testing.assert_allclose(augment.add_reverb(w, np.array([1.0])).samples, w.samples, atol=1e-12)
    delayed = augment.add_reverb(w, np.r_[np.zeros(10), 1.0]).samples
    np.testing.assert_allclose(delayed[10:], w.samples[:-10], atol=1e-12)
    assert np.all(delayed[:10] == 0)


@pytest.mark.parametrize("t60", [0.3, 0.6])
def test_synthetic_rir_decay(t60):
    rir = augment.synthetic_rir(t60, SR, seed=1)
    edc = np.cumsum((rir**2)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    i5, i25 = np.argmax(edc_db <= -5), np.argmax(edc_db <= -25)
    slope = (edc_db[i25] - edc_db[i5]) / ((i25 - i5) / SR)
    assert -60 / slope == pytest.approx(t60, rel=0.2)


def test_policy_identity_is_noop():
    w = tone(440)
    out = augment.apply_policy(w, AugmentPolicy.identity())
    np.testing.assert_array_equal(out.samples, w.samples)


def test_policy_deterministic():
    w = tone(440, dur=0.5)
    p = AugmentPolicy(p_noise=1.0, p_reverb=1.0, seed=5)
    a = augment.apply_policy(w, p)
    b = augment.apply_policy(w, p)
    assert np.array_equal(a.samples, b.samples)
    c = augment.apply_policy(w, AugmentPolicy(p_noise=1.0, p_reverb=1.0, seed=6))
    assert not np.array_equal(a.samples, c.samples)


def test_policy_validation():
    with pytest.raises(augment.AugmentParameterError):
        AugmentPolicy(speed_range=(1.3, 0.8))
    with pytest.raises(augment.AugmentParameterError):
        AugmentPolicy(p_noise=1.5)
