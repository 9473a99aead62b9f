import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SR, TINY
from syncguard.audio_io import AudioClip
from syncguard.codec.api import (
    count_parameters,
    discriminate,
    embed,
    extract,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
)
from syncguard.codec.blocks import (
    DilatedGatedBlock,
    DilatedResidualBlock,
    PlainConvBlock,
    SkipInjection,
    make_blocks,
)
from syncguard.codec.message import Message, fixed_pattern
from syncguard.codec.model import ModelConfig, SyncGuardModel, broadcast, exponential_schedule
from syncguard.distortion.attacks import apply_attack, parse_attack
from syncguard.dsp import StftConfig, stft
from syncguard.errors import CheckpointError, ContractError, InputTooShortError, ParameterError


def clip_of(seconds: float, seed: int = 0) -> AudioClip:
    rng = np.random.default_rng(seed)
    return AudioClip((rng.standard_normal(int(seconds * SR)) * 0.05).astype(np.float32))


# -- message expansion and broadcast ------------------------------------------------


def test_message_expansion_shape_default_config():
    model = SyncGuardModel(ModelConfig())
    bits = torch.randint(0, 2, (1, 32)).float()
    assert model.expand_message(bits).shape == (1, 32, 1, 513)


def test_message_expansion_separates_single_bit_flips(tiny_model):
    bits = torch.zeros(1, TINY.n_bits)
    flipped = bits.clone()
    flipped[0, 3] = 1
    assert not torch.allclose(tiny_model.expand_message(bits), tiny_model.expand_message(flipped))


def test_message_expansion_is_deterministic(tiny_model):
    bits = torch.randint(0, 2, (2, TINY.n_bits)).float()
    assert torch.equal(tiny_model.expand_message(bits), tiny_model.expand_message(bits))


def test_message_expansion_rejects_wrong_length(tiny_model):
    with pytest.raises(ContractError):
        tiny_model.expand_message(torch.zeros(1, TINY.n_bits + 1))


def test_broadcast_replication():
    f_w = torch.randn(2, 3, 1, 513)
    assert torch.equal(broadcast(f_w, 1), f_w)
    out = broadcast(f_w, 100)
    assert out.shape == (2, 3, 100, 513)
    assert torch.equal(out[:, :, 0], out[:, :, 99])
    assert float(out.var(dim=2).abs().max()) == 0.0
    with pytest.raises(ContractError):
        broadcast(f_w, 0)
    with pytest.raises(ContractError):
        broadcast(torch.randn(2, 3, 2, 513), 5)


# -- blocks -------------------------------------------------------------------------


def test_dr_block_with_zero_second_conv_is_identity():
    block = DilatedResidualBlock(4, 2)
    torch.nn.init.zeros_(block.conv2.weight)
    torch.nn.init.zeros_(block.conv2.bias)
    x = torch.randn(1, 4, 10, 12)
    assert torch.equal(block(x), x)


def test_dilated_block_preserves_shape():
    block = DilatedResidualBlock(4, 8)
    x = torch.randn(1, 4, 87, 513)
    assert block(x).shape == x.shape
    assert DilatedGatedBlock(4, 8)(x).shape == x.shape


def test_blocks_check_channel_count():
    with pytest.raises(ContractError):
        DilatedResidualBlock(4, 1)(torch.randn(1, 5, 8, 8))
    with pytest.raises(ContractError):
        DilatedGatedBlock(4, 1)(torch.randn(1, 4, 8))


def _time_span(blocks, t=96, h=5, c=3) -> tuple[int, int]:
    torch.manual_seed(0)
    base = torch.zeros(1, c, t, h, dtype=torch.float64)
    impulse = base.clone()
    impulse[0, :, t // 2, :] = 1.0
    with torch.no_grad():
        diff = (blocks(impulse) - blocks(base)).abs().sum(dim=(0, 1, 3))
    nz = torch.nonzero(diff > 1e-12).flatten()
    return int(t // 2 - nz.min()), int(nz.max() - t // 2)


def test_receptive_field_follows_dilation_schedule():
    schedule = (1, 2, 4, 8)
    stack = torch.nn.Sequential(*make_blocks("dr", 3, schedule)).double()
    # each DR block holds two kernel-3 convolutions, each reaching d frames per side
    expected = sum(2 * d * (3 - 1) // 2 for d in schedule)
    assert _time_span(stack) == (expected, expected)


def test_gated_blocks_reach_half_as_far():
    schedule = (1, 2, 4)
    stack = torch.nn.Sequential(*make_blocks("dg", 3, schedule)).double()
    assert _time_span(stack) == (sum(schedule), sum(schedule))


def test_gate_closed_returns_shortcut():
    block = DilatedGatedBlock(4, 1)
    with torch.no_grad():
        block.conv.weight.zero_()
        block.conv.bias[:4] = 0.3
        block.conv.bias[4:] = -1e4
    x = torch.randn(1, 4, 6, 6)
    assert torch.allclose(block(x), x)


def test_gate_open_adds_tanh_branch():
    block = DilatedGatedBlock(4, 1)
    with torch.no_grad():
        block.conv.weight.zero_()
        block.conv.bias[:4] = 0.3
        block.conv.bias[4:] = 1e4
    x = torch.randn(1, 4, 6, 6)
    assert torch.allclose(block(x), x + np.tanh(0.3))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 100))
def test_gated_branch_is_bounded(seed, scale):
    torch.manual_seed(seed)
    block = DilatedGatedBlock(3, 2)
    with torch.no_grad():
        g = block.gated(torch.randn(1, 3, 8, 8) * scale)
    # open interval in exact arithmetic; float32 saturates to exactly 1
    assert float(g.abs().max()) <= 1


def test_make_blocks_patterns():
    mixed = make_blocks("dr+dg", 4, (1, 2, 4, 8))
    assert [type(b) for b in mixed] == [DilatedResidualBlock, DilatedGatedBlock] * 2
    plain = make_blocks("plain", 4, (1, 2))
    assert all(isinstance(b, PlainConvBlock) and b.dilation == 1 for b in plain)
    with pytest.raises(ValueError):
        make_blocks("resnet", 4, (1,))


def test_skip_injection_matches_projection_of_broadcast_concat():
    torch.manual_seed(0)
    skip = SkipInjection(5, 1, 3)
    carrier = torch.randn(2, 1, 7, 9)
    f_w = torch.randn(2, 3, 1, 9)
    full = torch.nn.Conv2d(4, 5, 1)
    with torch.no_grad():
        full.weight.copy_(torch.cat([skip.carrier.weight, skip.message.weight], dim=1))
        full.bias.copy_(skip.carrier.bias)
    expected = full(torch.cat([carrier, broadcast(f_w, 7)], dim=1))
    assert torch.allclose(skip(carrier, f_w), expected, atol=1e-6)


def test_exponential_schedule():
    assert exponential_schedule(8) == (1, 2, 4, 8, 1, 2, 4, 8)


# -- embedder / extractor -------------------------------------------------------------


def test_embed_preserves_length(tiny_model, rng):
    x = torch.from_numpy(rng.standard_normal((1, 3 * SR)) * 0.05).float()
    bits = torch.randint(0, 2, (1, TINY.n_bits)).float()
    assert tiny_model.embed(x, bits).shape == x.shape


def test_f_plus_channel_count(tiny_model, rng):
    x = torch.from_numpy(rng.standard_normal((1, 4096)) * 0.05).float()
    _, f_plus = tiny_model.embed_spectrogram(stft(x), torch.zeros(1, TINY.n_bits))
    assert f_plus.shape[1] == TINY.c_w + 1 + TINY.c_v


def test_untrained_embedder_is_transparent(tiny_model, rng):
    """The zero-initialised output layer makes a fresh embedder an STFT round trip."""
    x = torch.from_numpy(rng.standard_normal((1, SR)) * 0.05).float()
    with torch.no_grad():
        a_w = tiny_model.embed(x, torch.ones(1, TINY.n_bits))
    assert float((a_w - x).abs().max()) < 1e-5


@pytest.mark.parametrize("seconds", [0.5, 1, 5, 10])
def test_extract_any_duration(tiny_model, seconds):
    msg, soft = extract(clip_of(seconds), tiny_model)
    assert len(msg) == TINY.n_bits and soft.shape == (TINY.n_bits,)
    assert np.all((soft >= 0) & (soft <= 1)) and np.all(np.isfinite(soft))


def test_clip_api_embed_round_trip_shapes(tiny_model):
    clip = clip_of(1.5)
    message = Message.random(TINY.n_bits, TINY.pattern_len, np.random.default_rng(0))
    marked = embed(clip, message, tiny_model)
    assert len(marked) == len(clip) and marked.sample_rate == clip.sample_rate
    with pytest.raises(ContractError):
        embed(clip, Message(np.zeros(3, dtype=np.uint8)), tiny_model)
    with pytest.raises(InputTooShortError):
        extract(AudioClip(np.zeros(500)), tiny_model)


def test_temporal_pooling_is_permutation_invariant(tiny_model, rng):
    x = torch.from_numpy(rng.standard_normal((2, SR)) * 0.05).float()
    feats = tiny_model.extract_features(x)
    perm = torch.randperm(feats.shape[2])
    a = tiny_model.pool_and_classify(feats)
    b = tiny_model.pool_and_classify(feats[:, :, perm])
    assert torch.allclose(a, b, atol=1e-5)


def test_discriminator_is_finite_and_unseparated_at_init(tiny_model):
    clip = clip_of(1)
    message = Message.random(TINY.n_bits, TINY.pattern_len, np.random.default_rng(0))
    marked = embed(clip, message, tiny_model)
    d_a, d_w = discriminate(clip, tiny_model), discriminate(marked, tiny_model)
    assert np.isfinite(d_a) and np.isfinite(d_w)
    sig = lambda v: 1 / (1 + np.exp(-v))
    assert abs(sig(d_a) - sig(d_w)) < 0.05


@pytest.mark.parametrize(
    "attack", ["identity", "tsm:rate=0.9", "pitch_scale:ratio=1.1", "gaussian_noise:snr=30", "lowpass:cutoff=6000"]
)
def test_gradient_reaches_encoder_through_attacks(tiny_model, rng, attack):
    model = tiny_model.train()
    x = torch.from_numpy(rng.standard_normal((2, SR // 2)) * 0.05).float()
    bits = torch.randint(0, 2, (2, TINY.n_bits)).float()
    a_w = model.embed(x, bits)
    y = apply_attack(a_w, parse_attack(attack), seed=0, training=True)
    model.extract_soft(y).sub(bits).pow(2).mean().backward()
    grads = [p.grad for m in model.encoder_modules() for p in m.parameters() if p.grad is not None]
    total = sum(float(g.abs().sum()) for g in grads)
    assert all(torch.isfinite(g).all() for g in grads)
    assert total > 0


# -- parameter accounting ----------------------------------------------------------------


def analytic_counts(cfg: ModelConfig) -> tuple[int, int]:
    h, k2 = cfg.stft.n_bins, cfg.kernel_size**2
    w = cfg.width

    def trunk_blocks():
        total = 0
        for i in range(cfg.n_blocks):
            dr = cfg.block_pattern == "dr" or (cfg.block_pattern == "dr+dg" and i % 2 == 0)
            if cfg.block_pattern == "plain":
                total += w * w * k2 + w
            elif dr:
                total += 2 * (w * w * k2 + w)
            else:
                total += w * 2 * w * k2 + 2 * w
        return total

    fc = cfg.n_bits * cfg.c_w * h + cfg.c_w * h
    carrier = (cfg.c_v * k2 + cfg.c_v) + (cfg.c_v * cfg.c_v * k2 + cfg.c_v)
    emb_in = (cfg.c_w + 1 + cfg.c_v) * w * k2 + w
    emb_skips = cfg.n_blocks * (w + w + cfg.c_w * w)
    emb_out = w + 1
    enc = fc + carrier + emb_in + trunk_blocks() + emb_skips + emb_out
    ext = (w * k2 + w) + trunk_blocks() + cfg.n_blocks * 2 * w + (w * cfg.head_channels + cfg.head_channels)
    head = cfg.head_channels * h * cfg.n_bits + cfg.n_bits
    return enc, ext + head


@pytest.mark.parametrize("cfg", [TINY, ModelConfig(), ModelConfig(block_pattern="plain", n_blocks=2, dilation_schedule=(1, 2))])
def test_parameter_counts_match_layer_sum(cfg):
    assert count_parameters(SyncGuardModel(cfg)) == analytic_counts(cfg)


def test_zero_block_config_has_no_trunk_parameters():
    cfg = ModelConfig(n_bits=8, pattern_len=2, c_w=4, c_v=4, width=8, n_blocks=0, dilation_schedule=(), head_channels=4)
    model = SyncGuardModel(cfg)
    assert sum(p.numel() for p in model.embedder.blocks.parameters()) == 0
    assert sum(p.numel() for p in model.extractor.blocks.parameters()) == 0
    msg, _ = extract(clip_of(0.5), model)
    assert len(msg) == 8


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(n_blocks=3)
    with pytest.raises(ParameterError):
        ModelConfig(n_bits=4, pattern_len=5)
    with pytest.raises(ParameterError):
        ModelConfig(block_pattern="x")


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tiny_model, tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(tiny_model, path, extra={"note": "x"})
    again = load_checkpoint(path)
    clip = clip_of(1)
    assert np.array_equal(extract(clip, tiny_model)[1], extract(clip, again)[1])
    assert count_parameters(again) == count_parameters(tiny_model)
    assert again.config == tiny_model.config
    assert again.config.stft == StftConfig()
    assert len(file_sha256(path)) == 64


def test_checkpoint_config_mismatch(tiny_model, tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(tiny_model, path)
    from dataclasses import replace

    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=replace(TINY, n_bits=16))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=replace(TINY, stft=StftConfig(hop_length=128)))
    assert load_checkpoint(path, expect=TINY).config == TINY


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.pt"
    torch.save({"format": "other"}, bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)


# -- messages ---------------------------------------------------------------------------


def test_message_pattern_and_parsing():
    assert fixed_pattern(4).tolist() == [1, 0, 1, 1]
    m = Message.parse("101101010110", 16, 4)
    assert m.to_string() == "1011101101010110" and m.pattern_ok()
    h = Message.parse("0xABC", 16, 4)
    assert h.payload.tolist() == [int(c) for c in format(0xABC, "012b")]
    raw = Message.parse("0000101101010110", 16, 4, raw=True)
    assert not raw.pattern_ok()
    for bad in ("10", "0xFFFFF", "12ab", "0xZZ"):
        with pytest.raises(ParameterError):
            Message.parse(bad, 16, 4)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 64), data=st.data())
def test_random_messages_carry_the_pattern(n, data):
    k = data.draw(st.integers(0, n))
    m = Message.random(n, k, np.random.default_rng(n))
    assert len(m) == n and m.pattern_ok()
    assert Message.parse(m.to_string(), n, k, raw=True).to_string() == m.to_string()
