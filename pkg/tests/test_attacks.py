import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SR, sine, snr_db
from syncguard.distortion.attacks import (
    AttackSpec,
    AttackUnavailableError,
    amplitude,
    apply_attack,
    apply_chain,
    crop,
    format_chain,
    gaussian_noise,
    jitter,
    lowpass,
    mp3,
    mp3_codec_available,
    mp3_proxy,
    parse_attack,
    parse_chain,
    requantize,
)
from syncguard.errors import DegenerateInputError, ParameterError


def noise_clip(n=SR, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(n) * 0.1)


def band_energy(x: torch.Tensor, lo_hz: float, hi_hz: float, sr: int = SR) -> float:
    spec = np.abs(np.fft.rfft(x.detach().double().numpy())) ** 2
    freqs = np.fft.rfftfreq(x.shape[-1], 1 / sr)
    return float(spec[(freqs >= lo_hz) & (freqs < hi_hz)].sum())


# -- gaussian noise ---------------------------------------------------------------


@pytest.mark.parametrize("target", [20.0, 30.0])
def test_noise_hits_target_snr(target):
    x = noise_clip()
    y = gaussian_noise(x, target, seed=3)
    assert abs(snr_db(x, y) - target) <= 0.5


def test_noise_at_60_db_is_near_identity():
    x = sine(440, SR)
    y = gaussian_noise(x, 60, seed=0)
    assert float(torch.max(torch.abs(y - x))) < 0.005


def test_noise_seed_changes_draw_not_level():
    x = noise_clip()
    a, b = gaussian_noise(x, 25, seed=1), gaussian_noise(x, 25, seed=2)
    assert not torch.allclose(a, b)
    assert snr_db(x, a) == pytest.approx(snr_db(x, b), abs=1e-9)
    assert torch.equal(a, gaussian_noise(x, 25, seed=1))


def test_noise_rejects_silence():
    with pytest.raises(DegenerateInputError):
        gaussian_noise(torch.zeros(100), 20)


@settings(max_examples=20, deadline=None)
@given(target=st.floats(0, 60), seed=st.integers(0, 10**6))
def test_noise_snr_property(target, seed):
    x = noise_clip(4000, seed)
    assert abs(snr_db(x, gaussian_noise(x, target, seed)) - target) < 1e-6


# -- mp3 --------------------------------------------------------------------------


def test_mp3_proxy_silence_stays_silent():
    assert torch.count_nonzero(mp3_proxy(torch.zeros(4096), 64)) == 0


def test_mp3_proxy_cuts_high_band():
    x = noise_clip(2 * SR)
    y = mp3_proxy(x, 64, seed=0)
    reduction = 10 * math.log10(band_energy(x, 9000, SR / 2) / band_energy(y, 9000, SR / 2))
    assert reduction >= 10


def test_mp3_codec_path():
    x = sine(440, SR)
    if mp3_codec_available():
        y = mp3(x, 64, training=False)
        assert y.shape == x.shape
    else:
        with pytest.raises(AttackUnavailableError):
            mp3(x, 64, training=False)


def test_mp3_proxy_rejects_unknown_bitrate():
    with pytest.raises(ParameterError):
        mp3_proxy(torch.zeros(4096), 96)


# -- amplitude / quantisation / low-pass -----------------------------------------


def test_amplitude_identity_and_scale():
    x = noise_clip(1000)
    assert torch.equal(amplitude(x, 1.0), x)
    assert torch.allclose(amplitude(x, 0.85), 0.85 * x)


def test_requantize_error_bound():
    x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, 5000))
    assert float(torch.max(torch.abs(requantize(x, 8) - x))) <= 2.0**-8


def test_requantize_passes_gradients_straight_through():
    x = noise_clip(100).requires_grad_(True)
    requantize(x, 8).sum().backward()
    assert torch.allclose(x.grad, torch.ones_like(x))


def test_lowpass_removes_tone_above_cutoff():
    x = sine(8000, SR)
    y = lowpass(x, 6000)
    ratio_db = 10 * math.log10(float(y[1000:-1000].pow(2).sum() / x[1000:-1000].pow(2).sum()))
    assert ratio_db <= -40


def test_lowpass_keeps_tone_below_cutoff():
    x = sine(1000, SR)
    assert snr_db(x[1000:-1000], lowpass(x, 6000)[1000:-1000]) > 30


# -- crop / jitter ----------------------------------------------------------------


def test_crop_fraction_zero_is_identity():
    x = noise_clip()
    assert torch.equal(crop(x, 0.0, "middle"), x)


def test_crop_length_arithmetic():
    x = noise_clip(22050)
    assert crop(x, 0.2, "random", seed=0).shape[-1] == 17640


@pytest.mark.parametrize("position", ["begin", "middle", "end"])
def test_crop_positions_keep_the_right_samples(position):
    x = torch.arange(22050, dtype=torch.float64)
    y = crop(x, 0.85, position)
    n = round(0.85 * 22050)
    if position == "begin":
        assert torch.equal(y, x[n:])
    elif position == "end":
        assert torch.equal(y, x[:-n])
    else:
        start = (22050 - n) // 2
        assert torch.equal(y, torch.cat([x[:start], x[start + n :]]))


def test_crop_too_much_is_degenerate():
    with pytest.raises(DegenerateInputError):
        crop(noise_clip(2048), 0.9, "begin")
    with pytest.raises(ParameterError):
        crop(noise_clip(), 0.96)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(2000, 50000), fraction=st.floats(0, 0.5), seed=st.integers(0, 1000))
def test_crop_length_property(m, fraction, seed):
    x = torch.zeros(m)
    assert crop(x, fraction, "random", seed).shape[-1] == m - round(fraction * m)


def test_jitter_length():
    assert jitter(torch.zeros(1000), 100, seed=0).shape[-1] == 990


def test_jitter_k2_keeps_one_per_block():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0])
    y = jitter(x, 2, seed=5)
    assert y.shape[-1] == 2
    assert float(y[0]) in (1.0, 2.0) and float(y[1]) in (3.0, 4.0)


def test_jitter_is_seed_deterministic():
    x = noise_clip(5000)
    assert torch.equal(jitter(x, 100, seed=1), jitter(x, 100, seed=1))
    assert not torch.equal(jitter(x, 100, seed=1), jitter(x, 100, seed=2))


@settings(max_examples=30, deadline=None)
@given(m=st.integers(10, 20000), k=st.integers(2, 500))
def test_jitter_length_property(m, k):
    assert jitter(torch.zeros(m), k, seed=0).shape[-1] == m - m // k


# -- specs and chains -------------------------------------------------------------


def test_chain_parsing_and_aliases():
    chain = parse_chain("tsm:rate=0.9|noise:snr=30")
    assert [s.kind for s in chain] == ["tsm", "gaussian_noise"]
    assert chain[0].params["rate"] == 0.9
    assert format_chain(chain) == "tsm:rate=0.9|gaussian_noise:snr=30"
    assert parse_attack("lpf:cutoff=6000").kind == "lowpass"
    assert parse_attack("identity").label() == "identity"


def test_chain_applies_left_to_right_with_length_oracle():
    x = noise_clip(SR)
    y = apply_chain(x, parse_chain("tsm:rate=0.9|noise:snr=30"), seed=0)
    assert y.shape[-1] == round(0.9 * SR)


def test_ranges_and_choices_concretise():
    spec = parse_attack("tsm:rate=0.8~1.2")
    assert not spec.is_concrete()
    draws = {spec.concretize(np.random.default_rng(s)).params["rate"] for s in range(20)}
    assert all(0.8 <= r <= 1.2 for r in draws) and len(draws) > 1
    choice = parse_attack("mp3:kbps=64/128")
    assert {choice.concretize(np.random.default_rng(s)).params["kbps"] for s in range(30)} == {64, 128}
    with pytest.raises(ParameterError):
        apply_attack(noise_clip(), spec)


def test_spec_validation_errors():
    with pytest.raises(ParameterError):
        parse_attack("bogus")
    with pytest.raises(ParameterError):
        parse_attack("tsm:speed=1.1")
    with pytest.raises(ParameterError):
        parse_attack("tsm:rate=3")
    with pytest.raises(ParameterError):
        parse_attack("pitch_scale")
    with pytest.raises(ParameterError):
        parse_attack("tsm:rate")


@pytest.mark.parametrize(
    "text",
    [
        "resample:ratio=0.8",
        "gaussian_noise:snr=20",
        "amplitude:scale=0.85",
        "requantize:bits=8",
        "lowpass:cutoff=6000",
        "jitter:k=100",
        "tsm:rate=1.2",
        "crop:fraction=0.2,position=end",
        "pitch_scale:ratio=0.9",
        "pitch_scale:semitones=1",
        "mp3:kbps=128",
    ],
)
def test_every_attack_runs_in_training_mode(text):
    x = noise_clip(SR)
    y = apply_attack(x, parse_attack(text), seed=0, training=True)
    assert torch.isfinite(y).all()
    assert y.shape[-1] > 0


@pytest.mark.parametrize(
    "text", ["identity", "tsm:rate=0.9", "pitch_scale:ratio=1.1", "gaussian_noise:snr=30", "lowpass:cutoff=6000",
             "crop:fraction=0.1", "resample:ratio=0.9", "amplitude:scale=0.85", "mp3:kbps=64"],
)
def test_differentiable_attacks_carry_gradient(text):
    x = noise_clip(SR).requires_grad_(True)
    apply_attack(x, parse_attack(text), seed=0, training=True).pow(2).sum().backward()
    assert torch.isfinite(x.grad).all()
    assert float(x.grad.abs().sum()) > 0


def test_attack_spec_hash_and_equality():
    a = AttackSpec("noise", {"snr": 30})
    b = parse_attack("gaussian_noise:snr=30")
    assert a == b and hash(a) == hash(b)


# -- finite-difference agreement on a 2048-sample probe --------------------------------


def _fd_check(fn, x, eps=1e-6, seed=0):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(fn(x).shape, generator=g, dtype=torch.float64)
    xg = x.clone().requires_grad_(True)
    (fn(xg) * w).sum().backward()
    for _ in range(3):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64)
        analytic = float((xg.grad * v).sum())
        numeric = float(((fn(x + eps * v) - fn(x - eps * v)) * w).sum() / (2 * eps))
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-12)


@pytest.mark.parametrize(
    "text",
    ["gaussian_noise:snr=30", "lowpass:cutoff=6000", "amplitude:scale=0.85", "crop:fraction=0.2,position=middle",
     "jitter:k=100", "resample:ratio=0.9", "mp3:kbps=64", "tsm:rate=1.2", "pitch_scale:ratio=0.9"],
)
def test_training_attacks_match_finite_differences(text):
    probe = torch.from_numpy(np.random.default_rng(11).standard_normal(2048) * 0.1)
    spec = parse_attack(text)
    _fd_check(lambda v: apply_attack(v, spec, seed=4, training=True), probe)
