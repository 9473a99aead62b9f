"""Losses and the two-stage training loop.

Stage 1 trains embedding and clean extraction only; stage 2 inserts the
distortion layer, drawing one attack per batch from an :class:`AttackSampler`.
Both stages minimise ``lambda_e * L_e + lambda_adv * L_adv + lambda_w * L_w``;
the discriminator is updated separately on ``L_d``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Callable

import numpy as np
import torch

from .audio_io import DatasetSpec, load_segments
from .codec.api import save_checkpoint
from .codec.model import SyncGuardModel
from .distortion.attacks import apply_attack
from .distortion.sampler import AttackSampler, default_training_sampler
from .errors import ConfigurationError, ContractError, TrainingDivergedError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7


def loss_w(soft: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Mean squared error between soft scores in [0, 1] and target bits."""
    if soft.shape != bits.shape:
        raise ContractError(f"soft {tuple(soft.shape)} vs bits {tuple(bits.shape)}")
    return (soft - bits.to(soft)).pow(2).mean()


def loss_e(a: torch.Tensor, a_w: torch.Tensor) -> torch.Tensor:
    if a.shape != a_w.shape:
        raise ContractError(f"clean {tuple(a.shape)} vs watermarked {tuple(a_w.shape)}")
    return (a_w - a).pow(2).mean()


def _log_clamped(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_EPS))


def loss_adv(d_logit_w: torch.Tensor) -> torch.Tensor:
    """``log(1 - sigmoid(D(a_w)))`` averaged over the batch."""
    return _log_clamped(1 - torch.sigmoid(d_logit_w)).mean()


def loss_d(d_logit_a: torch.Tensor, d_logit_w: torch.Tensor) -> torch.Tensor:
    """``log(1 - sigmoid(D(a))) + log(sigmoid(D(a_w)))`` averaged over the batch."""
    return (_log_clamped(1 - torch.sigmoid(d_logit_a)) + _log_clamped(torch.sigmoid(d_logit_w))).mean()


def batch_snr_db(a: torch.Tensor, a_w: torch.Tensor) -> float:
    num = a.detach().double().pow(2).sum(dim=-1)
    den = (a_w.detach().double() - a.detach().double()).pow(2).sum(dim=-1).clamp_min(1e-20)
    return float((10 * torch.log10(num / den)).mean())


def bit_accuracy(soft: torch.Tensor, bits: torch.Tensor) -> float:
    return float(((soft.detach() >= 0.5).to(bits.dtype) == bits).double().mean())


@dataclass
class TrainConfig:
    lambda_e: float = 1.0
    lambda_w: float = 0.01
    lambda_adv: float = 0.01
    learning_rate: float = 1e-5
    disc_learning_rate: float | None = None
    batch_size: int = 8
    stage1_steps: int = 1000
    stage2_steps: int = 1000
    stage1_target_acc: float | None = 0.99
    sampler: AttackSampler = field(default_factory=default_training_sampler)
    seed: int = 0
    log_every: int = 1
    eval_every: int = 50
    eval_clips: int = 16
    checkpoint_every: int = 0
    sample_rate: int = 22050

    def __post_init__(self):
        if min(self.lambda_e, self.lambda_w, self.lambda_adv) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler.to_config()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "sampler" in d and not isinstance(d["sampler"], AttackSampler):
            d["sampler"] = AttackSampler.from_config(d["sampler"])
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    stage: int = 1
    stage1_end: int | None = None
    history: list[dict] = field(default_factory=list)
    epoch_losses: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def enter_stage2(self) -> None:
        if self.stage != 1:
            raise ConfigurationError("stage transitions are 1 -> 2 only")
        self.stage = 2
        self.stage1_end = self.step


class MetricsLog:
    """Line-delimited JSON records, optionally mirrored to a file."""

    def __init__(self, sink: IO[str] | None = None):
        self.sink = sink
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.sink is not None:
            self.sink.write(json.dumps(record, sort_keys=True) + "\n")
            self.sink.flush()


class Trainer:
    """Stateful training loop; :func:`train` is the one-call entry point."""

    def __init__(
        self,
        model: SyncGuardModel,
        data: torch.Tensor,
        cfg: TrainConfig,
        eval_data: torch.Tensor | None = None,
        out_dir: str | Path | None = None,
        log: MetricsLog | None = None,
    ):
        if data.dim() != 2 or data.shape[0] == 0:
            raise ConfigurationError("training data must be a non-empty [N, L] tensor")
        self.model = model
        self.data = data
        self.eval_data = eval_data if eval_data is not None else data[: cfg.eval_clips]
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or MetricsLog()
        self.state = TrainState(stage=model.training_stage)
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = torch.optim.Adam(list(model.codec_parameters()), lr=cfg.learning_rate)
        self.opt_d = torch.optim.Adam(
            model.discriminator.parameters(), lr=cfg.disc_learning_rate or cfg.learning_rate
        )
        self._order: list[int] = []
        self._epoch_losses: list[float] = []

    # -- data ---------------------------------------------------------------
    def _next_batch(self) -> torch.Tensor:
        b = min(self.cfg.batch_size, self.data.shape[0])
        if len(self._order) < b:
            if self._epoch_losses:
                self._close_epoch()
            self._order = list(self.rng.permutation(self.data.shape[0]))
        idx, self._order = self._order[:b], self._order[b:]
        return self.data[idx]

    def _close_epoch(self) -> None:
        record = {
            "event": "epoch",
            "epoch": len(self.state.epoch_losses),
            "stage": self.state.stage,
            "step": self.state.step,
            "L": float(np.mean(self._epoch_losses)),
        }
        self.state.epoch_losses.append(record)
        self.log.write(record)
        self._epoch_losses = []

    # -- one step -----------------------------------------------------------
    def step(self) -> dict:
        cfg, model, state = self.cfg, self.model, self.state
        model.train()
        x = self._next_batch()
        bits = torch.from_numpy(self.rng.integers(0, 2, (x.shape[0], model.config.n_bits))).float()
        step_seed = cfg.seed * 1_000_003 + state.step
        attack = cfg.sampler.sample(self.rng) if state.stage == 2 else None

        a_w = model.embed(x, bits)
        attacked = a_w
        if attack is not None:
            attacked = apply_attack(
                a_w, attack, seed=step_seed, sample_rate=cfg.sample_rate,
                training=True, cfg=model.config.stft,
            )
        soft = model.extract_soft(attacked)
        l_e = loss_e(x, a_w)
        l_w = loss_w(soft, bits)
        l_adv = loss_adv(model.discriminate(a_w))
        total = cfg.lambda_e * l_e + cfg.lambda_adv * l_adv + cfg.lambda_w * l_w
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step} (stage {state.stage}, attack "
                f"{attack.label() if attack else 'identity'}): L_e={float(l_e.detach())}, "
                f"L_w={float(l_w.detach())}, L_adv={float(l_adv.detach())}"
            )
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()

        self.opt_d.zero_grad(set_to_none=True)
        l_d = loss_d(model.discriminate(x), model.discriminate(a_w.detach()))
        l_d.backward()
        self.opt_d.step()

        record = {
            "event": "step",
            "step": state.step,
            "stage": state.stage,
            "attack": attack.label() if attack else "identity",
            "L": float(total.detach()),
            "L_e": float(l_e.detach()),
            "L_w": float(l_w.detach()),
            "L_adv": float(l_adv.detach()),
            "L_d": float(l_d.detach()),
            "ACC": bit_accuracy(soft, bits),
            "SNR": batch_snr_db(x, a_w),
        }
        self._epoch_losses.append(record["L"])
        state.history.append(record)
        if cfg.log_every and state.step % cfg.log_every == 0:
            self.log.write(record)
        state.step += 1
        return record

    @torch.no_grad()
    def evaluate_clean(self) -> dict:
        """Clean ACC / SNR on the held-out batch with a fixed message draw."""
        self.model.eval()
        x = self.eval_data
        g = np.random.default_rng(self.cfg.seed + 7)
        bits = torch.from_numpy(g.integers(0, 2, (x.shape[0], self.model.config.n_bits))).float()
        a_w = self.model.embed(x, bits)
        soft = self.model.extract_soft(a_w)
        result = {
            "event": "eval",
            "step": self.state.step,
            "stage": self.state.stage,
            "ACC": bit_accuracy(soft, bits),
            "SNR": batch_snr_db(x, a_w),
        }
        self.state.evals.append(result)
        self.log.write(result)
        return result

    def _maybe_checkpoint(self, force: bool = False) -> None:
        if self.out_dir is None:
            return
        every = self.cfg.checkpoint_every
        if force or (every and self.state.step % every == 0):
            self.model.training_stage = self.state.stage
            name = "final.pt" if force else f"step{self.state.step:06d}.pt"
            save_checkpoint(self.model, self.out_dir / name, extra={"step": self.state.step})

    def run(self, on_step: Callable[[dict], None] | None = None) -> TrainState:
        cfg, state = self.cfg, self.state
        if state.stage == 1:
            for _ in range(cfg.stage1_steps):
                rec = self.step()
                if on_step:
                    on_step(rec)
                self._maybe_checkpoint()
                if cfg.eval_every and state.step % cfg.eval_every == 0:
                    ev = self.evaluate_clean()
                    if cfg.stage1_target_acc is not None and ev["ACC"] >= cfg.stage1_target_acc:
                        logger.info("stage 1 reached clean ACC %.3f at step %d", ev["ACC"], state.step)
                        break
            if not state.evals or state.evals[-1]["step"] != state.step:
                self.evaluate_clean()
            if self.out_dir is not None:
                save_checkpoint(self.model, self.out_dir / "stage1.pt", extra={"step": state.step})
            state.enter_stage2()
            self.model.training_stage = 2
        for _ in range(cfg.stage2_steps):
            rec = self.step()
            if on_step:
                on_step(rec)
            self._maybe_checkpoint()
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                self.evaluate_clean()
        if self._epoch_losses:
            self._close_epoch()
        self._maybe_checkpoint(force=True)
        self.model.eval()
        return state


def train(
    model: SyncGuardModel,
    data: DatasetSpec | torch.Tensor,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log: MetricsLog | None = None,
) -> tuple[SyncGuardModel, TrainState]:
    """Run stage 1 then stage 2 as configured and return the trained model."""
    if isinstance(data, DatasetSpec):
        data = load_segments(data)
    torch.manual_seed(cfg.seed)
    trainer = Trainer(model, data, cfg, out_dir=out_dir, log=log)
    state = trainer.run()
    return model, state


def quarter_medians(losses: list[float]) -> list[float]:
    """Median loss of each successive quarter of a run (convergence smoke check)."""
    n = len(losses)
    if n < 4:
        raise ValueError("need at least 4 losses")
    bounds = [round(i * n / 4) for i in range(5)]
    return [float(np.median(losses[bounds[i] : bounds[i + 1]])) for i in range(4)]
