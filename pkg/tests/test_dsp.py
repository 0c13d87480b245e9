import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latmask import autodiff as ad
from latmask import dsp
from latmask.errors import ConfigError, ContractError


def reference_stft(x, n, hop):
    """Direct-DFT oracle: reflect pad, slice, window, rfft."""
    xp = np.pad(x, n // 2, mode="reflect")
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    starts = range(0, xp.size - n + 1, hop)
    return np.stack([np.fft.rfft(w * xp[s:s + n]) for s in starts])


@pytest.mark.parametrize("n,hop", [(1024, 256), (256, 64), (512, 128)])
def test_stft_matches_direct_dft(n, hop):
    x = np.random.default_rng(n).standard_normal(4000)
    spec = dsp.stft(x, n, hop)
    ref = reference_stft(x, n, hop)
    assert spec.real.shape == ref.shape
    np.testing.assert_allclose(spec.complex(), ref, atol=1e-9 * np.abs(ref).max())


def test_impulse_frames_match_windowed_dft():
    x = np.zeros(8000)
    x[0] = 1.0
    spec = dsp.stft(x, 1024, 256)
    ref = reference_stft(x, 1024, 256)
    np.testing.assert_allclose(np.abs(spec.complex()), np.abs(ref), atol=1e-12)
    # the impulse sits at offset n/2 of frame 0, so |X| there is the window's value
    np.testing.assert_allclose(np.abs(spec.complex()[0]), np.full(513, 1.0), atol=1e-12)


def test_zero_signal_gives_zero_spectrogram():
    spec = dsp.stft(np.zeros(3000), 512, 128)
    assert not np.any(spec.real.value) and not np.any(spec.imag.value)
    assert not np.any(dsp.istft(spec).value)


def test_sine_peaks_at_expected_bin():
    t = np.arange(16000) / 8000
    mag = dsp.magnitude(dsp.stft(np.sin(2 * np.pi * 1000 * t), 1024)).value
    assert np.all(np.argmax(mag, axis=-1)[2:-2] == 128)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n", [256, 1024])
def test_round_trip(seed, n):
    x = np.random.default_rng(seed).standard_normal(16000)
    y = dsp.istft(dsp.stft(x, n), x.size).value
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6


def test_short_signal_is_padded_not_rejected():
    x = np.random.default_rng(0).standard_normal(300)
    y = dsp.istft(dsp.stft(x, 1024), x.size).value
    np.testing.assert_allclose(y, x, atol=1e-10)


def test_identity_mask_round_trip():
    x = np.random.default_rng(4).standard_normal(5000)
    spec = dsp.stft(x, 1024)
    ones = spec.real.tape.const(np.ones(spec.real.shape))
    masked = dsp.apply_mask(ones, spec)
    assert np.array_equal(masked.real.value, spec.real.value)
    y = dsp.istft(masked, x.size).value
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6


def test_cola_table():
    w = dsp.get_window("hann", 256)
    assert dsp.check_cola(w, 64)
    assert not dsp.check_cola(w, 128)
    assert dsp.check_cola(dsp.get_window("hann", 1024), 256)


@pytest.mark.parametrize("n,hop", [(1000, 250), (256, 128), (256, 0), (256, 512)])
def test_bad_stft_config_raises(n, hop):
    with pytest.raises(ConfigError):
        dsp.stft(np.zeros(2048), n, hop)


def test_istft_rejects_mismatched_metadata():
    spec = dsp.stft(np.zeros(2048), 512)
    with pytest.raises(ContractError):
        dsp.istft(spec, 2048, hop=256)
    with pytest.raises(ContractError):
        dsp.istft(spec, 2048, fft_size=1024)


def test_stft_is_differentiable():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((1 + 600 // 32, 65))

    def f(tape, x):
        return ad.sum_(dsp.magnitude(dsp.stft(x, 128)) * w)

    assert ad.grad_check(f, rng.standard_normal(600), indices=range(0, 600, 23)).passed


# -- masks -------------------------------------------------------------------

def test_mask_examples():
    tape = ad.Tape()
    m = dsp.build_mask(tape.const([[3.0]]), np.array([[4.0]]))
    assert m.values.value[0, 0] == 3.0 / (4.0 + 1e-8)
    zero = dsp.build_mask(tape.const(np.zeros((3, 4))), np.ones((3, 4)))
    assert not np.any(zero.values.value)
    for v in (1e-3, 1.0, 50.0):
        same = dsp.build_mask(tape.const([[v]]), np.array([[v]])).values.value[0, 0]
        assert same == v / (v + 1e-8) and same < 1.0


def test_mask_shape_mismatch():
    tape = ad.Tape()
    with pytest.raises(ContractError):
        dsp.build_mask(tape.const(np.ones((2, 3))), np.ones((3, 2)))


def test_mask_has_no_gradient_through_mixture_magnitude():
    tape = ad.Tape()
    j, x = tape.leaf([[1.0, 5.0]]), tape.leaf([[2.0, 3.0]])
    gx = ad.backward(tape, ad.sum_(dsp.build_mask(j, x).values), x)
    assert not np.any(gx)


mags = arrays(np.float64, 8, elements=st.floats(0, 1e3, allow_nan=False, allow_infinity=False))


def mask_property_holds(j, x, eps):
    tape = ad.Tape()
    m = dsp.build_mask(tape.const(j), x, eps).values.value
    bigger = dsp.build_mask(tape.const(j * 1.5 + 0.1), x, eps).values.value
    return bool(np.all(m >= 0) and np.all(m < 1) and np.all(bigger >= m))


def test_mask_property_on_ten_thousand_triples():
    # log-uniform magnitudes over eight decades plus exact zeros and ties
    rng = np.random.default_rng(2024)
    n = 10_000
    j = 10.0 ** rng.uniform(-5, 3, n)
    x = 10.0 ** rng.uniform(-5, 3, n)
    j[::50] = 0.0
    x[1::50] = j[1::50]
    # 100 epsilon values, each applied to its own 100 magnitude pairs
    for k, eps in enumerate(10.0 ** rng.uniform(-8, 0, 100)):
        block = slice(100 * k, 100 * (k + 1))
        assert mask_property_holds(j[block], x[block], eps)


# the float64 range in which the strict upper bound is representable:
# |J| <= 1e3 with eps >= 1e-8 keeps m / (m + eps) below 1
@settings(max_examples=300, deadline=None)
@given(mags, mags, st.floats(1e-8, 1.0))
def test_mask_in_unit_interval_and_monotone(j, x, eps):
    assert mask_property_holds(j, x, eps)


def test_apply_mask_scales_magnitude():
    rng = np.random.default_rng(8)
    spec = dsp.stft(rng.standard_normal(3000), 256)
    tape = spec.real.tape
    m = rng.random(spec.real.shape)
    out = dsp.apply_mask(tape.const(m), spec)
    np.testing.assert_allclose(np.abs(out.complex()), m * np.abs(spec.complex()), rtol=0, atol=1e-12)
    zero = dsp.apply_mask(tape.const(np.zeros(spec.real.shape)), spec)
    assert not np.any(zero.real.value) and not np.any(zero.imag.value)


def test_apply_mask_shape_mismatch():
    spec = dsp.stft(np.zeros(3000), 256)
    with pytest.raises(ContractError):
        dsp.apply_mask(spec.real.tape.const(np.ones((2, 2))), spec)


def test_magnitude_is_zero_at_zero():
    spec = dsp.stft(np.zeros(1000), 256)
    assert not np.any(dsp.magnitude(spec).value)


# -- mel ---------------------------------------------------------------------

def test_filterbank_rows_sum_to_one():
    for n_mels, n in ((40, 1024), (40, 256), (8, 64)):
        fb = dsp.mel_filterbank(n_mels, n, 8000)
        np.testing.assert_allclose(fb.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(fb >= 0)


def test_filterbank_bounds():
    with pytest.raises(ConfigError):
        dsp.mel_filterbank(7, 1024, 8000)
    with pytest.raises(ConfigError):
        dsp.mel_filterbank(40, 64, 8000)


def test_mel_of_silence_is_zero():
    assert not np.any(dsp.mel_spectrogram(np.zeros(4000), 8000).value)


def test_mel_of_white_noise_is_positive():
    for seed in range(3):
        x = np.random.default_rng(seed).standard_normal(8000)
        assert np.all(dsp.mel_spectrogram(x, 8000).value > 0)


def test_waveform_validation():
    with pytest.raises(ContractError):
        dsp.Waveform(np.zeros(0), 8000)
    with pytest.raises(ContractError):
        dsp.Waveform(np.array([0.0, np.nan]), 8000)
    assert len(dsp.Waveform(np.zeros(16000), 8000)) == 16000
