"""The learnable codec: message expansion, carrier encoder, embedder, extractor, discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from ..dsp import SpectroPair, StftConfig, istft, stft
from ..errors import ContractError, ParameterError
from .blocks import BLOCK_PATTERNS, SkipInjection, make_blocks


@dataclass(frozen=True)
class ModelConfig:
    n_bits: int = 32
    pattern_len: int = 8
    c_w: int = 32
    c_v: int = 32
    width: int = 32
    n_blocks: int = 8
    dilation_schedule: tuple[int, ...] = (1, 2, 4, 8, 1, 2, 4, 8)
    block_pattern: str = "dr+dg"
    kernel_size: int = 3
    head_channels: int = 16
    disc_channels: int = 32
    residual_scale: float = 1.0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.n_bits < 1 or not 0 <= self.pattern_len <= self.n_bits:
            raise ParameterError("need n_bits >= 1 and 0 <= pattern_len <= n_bits")
        if len(self.dilation_schedule) != self.n_blocks:
            raise ParameterError(
                f"dilation_schedule has {len(self.dilation_schedule)} entries for {self.n_blocks} blocks"
            )
        if any(d < 1 for d in self.dilation_schedule):
            raise ParameterError("dilations must be strictly positive")
        if self.block_pattern not in BLOCK_PATTERNS:
            raise ParameterError(f"block_pattern must be one of {BLOCK_PATTERNS}")

    @property
    def effective_dilations(self) -> tuple[int, ...]:
        if self.block_pattern == "plain":
            return (1,) * self.n_blocks
        return tuple(self.dilation_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_schedule"] = list(self.dilation_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stft"] = StftConfig(**d.get("stft", {}))
        d["dilation_schedule"] = tuple(d["dilation_schedule"])
        return cls(**d)


def exponential_schedule(n_blocks: int, cycle: int = 4) -> tuple[int, ...]:
    """``1, 2, 4, ... 2**(cycle-1)`` repeated to ``n_blocks`` entries."""
    return tuple(2 ** (i % cycle) for i in range(n_blocks))


def compress(magnitude: torch.Tensor) -> torch.Tensor:
    """Network-side view of a linear magnitude spectrogram, ``[B, T, H] -> [B, 1, T, H]``."""
    return torch.log1p(magnitude).unsqueeze(1)


def broadcast(f_w: torch.Tensor, t: int) -> torch.Tensor:
    """Replicate a ``[B, C_w, 1, H]`` message feature over ``t`` frames."""
    if t < 1:
        raise ContractError(f"frame count must be >= 1, got {t}")
    if f_w.dim() != 4 or f_w.shape[2] != 1:
        raise ContractError(f"expected [B, C_w, 1, H], got {tuple(f_w.shape)}")
    return f_w.expand(-1, -1, t, -1)


class CarrierEncoder(nn.Module):
    def __init__(self, c_v: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.net = nn.Sequential(
            nn.Conv2d(1, c_v, kernel_size, padding=pad),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c_v, c_v, kernel_size, padding=pad),
            nn.LeakyReLU(0.2),
        )

    def forward(self, carrier: torch.Tensor) -> torch.Tensor:
        return self.net(carrier)


class Embedder(nn.Module):
    """Maps ``f_+ = concat(f_c, s, f_wb)`` to an additive magnitude residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.kernel_size
        self.in_channels = cfg.c_w + 1 + cfg.c_v
        self.input = nn.Conv2d(self.in_channels, cfg.width, k, padding=k // 2)
        self.act = nn.LeakyReLU(0.2)
        self.blocks = make_blocks(cfg.block_pattern, cfg.width, cfg.effective_dilations, k)
        self.skips = nn.ModuleList(SkipInjection(cfg.width, 1, cfg.c_w) for _ in self.blocks)
        self.output = nn.Conv2d(cfg.width, 1, 1)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def forward(self, f_plus: torch.Tensor, carrier: torch.Tensor, f_w: torch.Tensor) -> torch.Tensor:
        if f_plus.shape[1] != self.in_channels:
            raise ContractError(f"f_+ must have {self.in_channels} channels, got {f_plus.shape[1]}")
        h = self.act(self.input(f_plus))
        for block, skip in zip(self.blocks, self.skips):
            h = block(h + skip(carrier, f_w))
        return self.output(h)


class Extractor(nn.Module):
    """Same trunk as the embedder, reading the magnitude only; returns pre-pooling features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.kernel_size
        self.input = nn.Conv2d(1, cfg.width, k, padding=k // 2)
        self.act = nn.LeakyReLU(0.2)
        self.blocks = make_blocks(cfg.block_pattern, cfg.width, cfg.effective_dilations, k)
        self.skips = nn.ModuleList(SkipInjection(cfg.width, 1, 0) for _ in self.blocks)
        self.output = nn.Conv2d(cfg.width, cfg.head_channels, 1)

    def forward(self, carrier: torch.Tensor) -> torch.Tensor:
        h = self.act(self.input(carrier))
        for block, skip in zip(self.blocks, self.skips):
            h = block(h + skip(carrier))
        return self.output(h)


class Discriminator(nn.Module):
    """Five strided 1-D convolutions on the waveform, global-average pooled to one logit."""

    def __init__(self, channels: int = 32):
        super().__init__()
        widths = [1, channels // 2, channels, channels, channels, channels]
        layers: list[nn.Module] = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv1d(c_in, c_out, 15, stride=4, padding=7), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x.unsqueeze(1)).mean(dim=-1)
        return self.head(h).squeeze(-1)


class SyncGuardModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg
        n_bins = cfg.stft.n_bins
        self.message_fc = nn.Linear(cfg.n_bits, cfg.c_w * n_bins)
        self.carrier_encoder = CarrierEncoder(cfg.c_v, cfg.kernel_size)
        self.embedder = Embedder(cfg)
        self.extractor = Extractor(cfg)
        self.head = nn.Linear(cfg.head_channels * n_bins, cfg.n_bits)
        self.discriminator = Discriminator(cfg.disc_channels)
        self.training_stage = 1

    # sub-network groupings used by the optimiser and the efficiency report
    def encoder_modules(self) -> list[nn.Module]:
        return [self.message_fc, self.carrier_encoder, self.embedder]

    def decoder_modules(self) -> list[nn.Module]:
        return [self.extractor, self.head]

    def codec_parameters(self):
        for m in self.encoder_modules() + self.decoder_modules():
            yield from m.parameters()

    def expand_message(self, bits: torch.Tensor) -> torch.Tensor:
        """``[B, n]`` bits in {0, 1} -> ``[B, C_w, 1, H]`` message feature."""
        if bits.shape[-1] != self.config.n_bits:
            raise ContractError(f"expected {self.config.n_bits} bits, got {bits.shape[-1]}")
        centred = 2.0 * bits.to(self.message_fc.weight.dtype) - 1.0
        f_w = self.message_fc(centred)
        return f_w.view(*bits.shape[:-1], self.config.c_w, 1, self.config.stft.n_bins)

    def embed_spectrogram(self, spec: SpectroPair, bits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(s_w, f_plus)`` for magnitude ``[B, T, H]``."""
        s = spec.magnitude
        carrier = compress(s)
        f_w = self.expand_message(bits)
        f_wb = broadcast(f_w, s.shape[-2])
        f_c = self.carrier_encoder(carrier)
        f_plus = torch.cat([f_c, carrier, f_wb], dim=1)
        residual = self.embedder(f_plus, carrier, f_w).squeeze(1)
        s_w = torch.clamp(s + self.config.residual_scale * residual, min=0.0)
        return s_w, f_plus

    def embed(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        """Watermark waveforms ``x[B, M]`` with ``bits[B, n]``; synthesis reuses the input phase."""
        spec = stft(x, self.config.stft)
        s_w, _ = self.embed_spectrogram(spec, bits)
        return istft(SpectroPair(s_w, spec.phase), self.config.stft, x.shape[-1])

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        """Extractor output before temporal pooling, ``[B, C, T, H]``."""
        return self.extractor(compress(stft(x, self.config.stft).magnitude))

    def pool_and_classify(self, features: torch.Tensor) -> torch.Tensor:
        pooled = features.mean(dim=2)
        return self.head(pooled.flatten(1))

    def extract_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool_and_classify(self.extract_features(x))

    def extract_soft(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.extract_logits(x))

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        return self.discriminator(x)
