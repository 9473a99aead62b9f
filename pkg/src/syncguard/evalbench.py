"""Metrics, robustness tables, localisation and the capacity / efficiency studies."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import shlex
import statistics
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .audio_io import AudioClip, DatasetSpec, load_segments, save_audio
from .codec.api import count_parameters
from .codec.message import Message
from .codec.model import SyncGuardModel
from .distortion.attacks import AttackSpec, AttackUnavailableError, apply_attack, parse_attack
from .distortion.resample import resample_rate
from .errors import ContractError, DegenerateInputError

PESQ_ENV = "SYNCGUARD_PESQ_CMD"
SNR_REPORT_CAP = 100.0

TABLE2_ATTACKS = (
    "resample:ratio=0.8",
    "resample:ratio=0.9",
    "gaussian_noise:snr=20",
    "gaussian_noise:snr=30",
    "mp3:kbps=64",
    "amplitude:scale=0.85",
    "requantize:bits=8",
    "lowpass:cutoff=6000",
)
TABLE3_ATTACKS = (
    "jitter:k=100",
    "tsm:rate=0.8",
    "tsm:rate=0.9",
    "tsm:rate=1.1",
    "tsm:rate=1.2",
    "crop:fraction=0.1,position=random",
    "crop:fraction=0.2,position=random",
    "pitch_scale:ratio=0.9",
    "pitch_scale:ratio=1.1",
)


def acc(recovered: Message | np.ndarray, original: Message | np.ndarray) -> float:
    """Fraction of matching bits."""
    r = recovered.bits if isinstance(recovered, Message) else np.asarray(recovered)
    o = original.bits if isinstance(original, Message) else np.asarray(original)
    if r.shape != o.shape:
        raise ContractError(f"bit arrays differ in length: {r.shape} vs {o.shape}")
    return float(np.mean(r == o))


def snr(a: AudioClip | np.ndarray, a_w: AudioClip | np.ndarray) -> float:
    """``10 log10(sum a^2 / sum (a_w - a)^2)``; ``inf`` for identical signals."""
    x = np.asarray(a.samples if isinstance(a, AudioClip) else a, dtype=np.float64)
    y = np.asarray(a_w.samples if isinstance(a_w, AudioClip) else a_w, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"lengths differ: {x.shape} vs {y.shape}")
    signal = float(np.sum(x**2))
    if signal == 0:
        raise DegenerateInputError("SNR undefined for a zero-energy reference")
    noise = float(np.sum((y - x) ** 2))
    if noise == 0:
        return math.inf
    return 10 * math.log10(signal / noise)


def format_snr(value: float) -> str:
    if value >= SNR_REPORT_CAP:
        return f">{SNR_REPORT_CAP:g}"
    return f"{value:.2f}"


def pesq_hook(a: AudioClip, a_w: AudioClip) -> float | None:
    """Wide-band PESQ from an external evaluator, or ``None`` when none is configured.

    Uses the ``pesq`` package when importable; otherwise the command in
    ``$SYNCGUARD_PESQ_CMD`` is run with the reference and degraded 16 kHz WAV
    paths appended and the last number on its stdout is taken as the score.
    """
    ref = resample_rate(a.tensor(torch.float64), a.sample_rate, 16000).numpy()
    deg = resample_rate(a_w.tensor(torch.float64), a_w.sample_rate, 16000).numpy()
    try:
        from pesq import pesq as _pesq  # type: ignore
    except ImportError:
        _pesq = None
    if _pesq is not None:
        try:
            return float(_pesq(16000, ref, deg, "wb"))
        except Exception:
            return None
    cmd = os.environ.get(PESQ_ENV)
    if not cmd:
        return None
    with tempfile.TemporaryDirectory() as tmp:
        rp, dp = Path(tmp, "ref.wav"), Path(tmp, "deg.wav")
        save_audio(AudioClip(ref, 16000), rp)
        save_audio(AudioClip(deg, 16000), dp)
        try:
            proc = subprocess.run(shlex.split(cmd) + [str(rp), str(dp)], capture_output=True, text=True, timeout=120)
        except (OSError, subprocess.TimeoutExpired):
            return None
        if proc.returncode != 0:
            return None
        numbers = [t for t in proc.stdout.replace("=", " ").split() if _is_number(t)]
        return float(numbers[-1]) if numbers else None


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# Robustness tables


@dataclass
class ReportRow:
    attack: str
    acc: float | None
    n_clips: int
    n_skipped: int = 0
    status: str = "ok"
    note: str = ""


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    snr_db: float | None = None
    pesq: float | None = None
    metadata: dict = field(default_factory=dict)

    def row(self, attack: str) -> ReportRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)

    def to_table(self) -> str:
        lines = [f"{'attack':<40} {'ACC':>8} {'clips':>6} {'skipped':>8}  status"]
        for r in self.rows:
            acc_s = f"{100 * r.acc:.2f}" if r.acc is not None else "n/a"
            lines.append(f"{r.attack:<40} {acc_s:>8} {r.n_clips:>6} {r.n_skipped:>8}  {r.status} {r.note}".rstrip())
        snr_s = format_snr(self.snr_db) if self.snr_db is not None else "n/a"
        pesq_s = f"{self.pesq:.2f}" if self.pesq is not None else "n/a"
        lines.append(f"SNR: {snr_s} dB   PESQ: {pesq_s}")
        if self.pesq is None:
            lines.append("  (PESQ n/a: no external evaluator configured)")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        out = [json.dumps({"kind": "meta", **self.metadata, "snr_db": self.snr_db, "pesq": self.pesq})]
        out += [json.dumps({"kind": "row", **asdict(r)}) for r in self.rows]
        return "\n".join(out) + "\n"


def _clips_tensor(dataset: DatasetSpec | torch.Tensor, limit: int | None = None) -> torch.Tensor:
    if isinstance(dataset, DatasetSpec):
        return load_segments(dataset, limit)
    return dataset if limit is None else dataset[:limit]


def _messages(n_clips: int, model: SyncGuardModel, seed: int) -> list[Message]:
    rng = np.random.default_rng(seed)
    cfg = model.config
    return [Message.random(cfg.n_bits, cfg.pattern_len, rng) for _ in range(n_clips)]


@torch.no_grad()
def embed_batch(model: SyncGuardModel, clips: torch.Tensor, messages: list[Message], chunk: int = 8) -> torch.Tensor:
    out = []
    for i in range(0, clips.shape[0], chunk):
        bits = torch.stack([m.tensor() for m in messages[i : i + chunk]])
        out.append(model.embed(clips[i : i + chunk], bits))
    return torch.cat(out)


@torch.no_grad()
def robustness_table(
    model: SyncGuardModel,
    dataset: DatasetSpec | torch.Tensor,
    attacks: Iterable[AttackSpec | str],
    seed: int = 0,
    sample_rate: int = 22050,
    limit: int | None = None,
    with_pesq: bool = False,
) -> EvalReport:
    """Embed a fresh message per clip, attack, extract and average ACC per attack."""
    model.eval()
    clips = _clips_tensor(dataset, limit)
    messages = _messages(clips.shape[0], model, seed)
    watermarked = embed_batch(model, clips, messages)
    stft_cfg = model.config.stft

    snrs = [snr(c.numpy(), w.numpy()) for c, w in zip(clips, watermarked)]
    report = EvalReport(
        snr_db=float(np.mean([min(s, SNR_REPORT_CAP) for s in snrs])),
        metadata={"seed": seed, "n_clips": int(clips.shape[0])},
    )
    if with_pesq:
        scores = [pesq_hook(AudioClip(c.numpy()), AudioClip(w.numpy())) for c, w in zip(clips, watermarked)]
        report.pesq = None if any(s is None for s in scores) else float(np.mean(scores))

    for attack in attacks:
        spec = parse_attack(attack) if isinstance(attack, str) else attack
        accs, skipped, note = [], 0, ""
        for i, (a_w, msg) in enumerate(zip(watermarked, messages)):
            try:
                attacked = apply_attack(a_w, spec, seed=seed * 100_003 + i, sample_rate=sample_rate, cfg=stft_cfg)
            except AttackUnavailableError as exc:
                note = str(exc)
                break
            except DegenerateInputError:
                skipped += 1
                continue
            if attacked.shape[-1] < stft_cfg.window_length:
                skipped += 1
                continue
            soft = model.extract_soft(attacked.unsqueeze(0))[0].numpy()
            accs.append(acc((soft >= 0.5).astype(np.uint8), msg.bits))
        if note:
            report.rows.append(ReportRow(spec.label(), None, 0, int(clips.shape[0]), "skipped", note))
        else:
            report.rows.append(
                ReportRow(spec.label(), float(np.mean(accs)) if accs else None, len(accs), skipped)
            )
    return report


@torch.no_grad()
def crop_position_study(
    model: SyncGuardModel,
    dataset: DatasetSpec | torch.Tensor,
    fractions: Iterable[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85),
    positions: Iterable[str] = ("begin", "middle", "end"),
    seed: int = 0,
    limit: int | None = None,
) -> list[dict]:
    """ACC for every (position, fraction) pair, as plot-ready rows."""
    attacks = [
        AttackSpec("crop", {"fraction": float(f), "position": p}) for p in positions for f in fractions
    ]
    report = robustness_table(model, dataset, attacks, seed=seed, limit=limit)
    return [
        {
            "position": spec.params["position"],
            "fraction": spec.params["fraction"],
            "acc": row.acc,
            "n_clips": row.n_clips,
            "n_skipped": row.n_skipped,
        }
        for spec, row in zip(attacks, report.rows)
    ]


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Sliding-window detection


@dataclass
class WindowResult:
    offset: float
    bits: Message
    soft: np.ndarray
    pattern_ok: bool


def window_starts(n_samples: int, window: int, stride: int) -> list[int]:
    if n_samples <= window:
        raise ContractError(f"clip of {n_samples} samples is not longer than the {window}-sample window")
    return list(range(0, n_samples - window + 1, stride))


@torch.no_grad()
def sliding_extract(
    clip: AudioClip,
    model: SyncGuardModel,
    window_seconds: float = 1.0,
    stride_seconds: float = 0.05,
    batch: int = 8,
) -> list[WindowResult]:
    """Extract from every window position; ``pattern_ok`` flags windows whose leading bits match."""
    if stride_seconds <= 0:
        raise ContractError("stride must be positive")
    sr = clip.sample_rate
    window = int(round(window_seconds * sr))
    stride = max(1, int(round(stride_seconds * sr)))
    starts = window_starts(len(clip), window, stride)
    x = clip.tensor()
    frames = torch.stack([x[s : s + window] for s in starts])
    results = []
    k = model.config.pattern_len
    for i in range(0, len(starts), batch):
        soft = model.extract_soft(frames[i : i + batch]).numpy()
        for s, row in zip(starts[i : i + batch], soft):
            msg = Message((row >= 0.5).astype(np.uint8), k)
            results.append(WindowResult(s / sr, msg, row, msg.pattern_ok()))
    return results


def first_detection(results: list[WindowResult]) -> WindowResult | None:
    return next((r for r in results if r.pattern_ok), None)


@dataclass
class LocalizationTrace:
    offsets: list[float]
    acc_at_offset: list[float]
    window_seconds: float
    stride_seconds: float = 0.05
    pattern_rate: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {"offset": o, "acc": a, "pattern_ok_rate": p}
            for o, a, p in zip(self.offsets, self.acc_at_offset, self.pattern_rate)
        ]


@torch.no_grad()
def localization_study(
    model: SyncGuardModel,
    hosts: torch.Tensor,
    watermark_seconds: float = 1.0,
    window_seconds: float = 1.0,
    stride_seconds: float = 0.05,
    max_offset: float = 1.0,
    seed: int = 0,
    sample_rate: int = 22050,
) -> LocalizationTrace:
    """Watermark a random ``watermark_seconds`` span of each host, then extract at signed offsets.

    Offset ``d`` places the extraction window at ``insert_position + d``;
    offsets that fall outside the host are skipped for that clip.
    """
    if stride_seconds <= 0:
        raise ContractError("stride must be positive")
    model.eval()
    rng = np.random.default_rng(seed)
    wm_len = int(round(watermark_seconds * sample_rate))
    win = int(round(window_seconds * sample_rate))
    stride = int(round(stride_seconds * sample_rate))
    n_side = int(round(max_offset / stride_seconds))
    offset_steps = range(-n_side, n_side + 1)
    accs: dict[int, list[float]] = {k: [] for k in offset_steps}
    oks: dict[int, list[float]] = {k: [] for k in offset_steps}
    cfg = model.config
    for host in hosts:
        m = host.shape[-1]
        if m < wm_len + cfg.stft.window_length:
            continue
        insert = int(rng.integers(0, m - wm_len + 1))
        msg = Message.random(cfg.n_bits, cfg.pattern_len, rng)
        marked = host.clone()
        marked[insert : insert + wm_len] = model.embed(host[insert : insert + wm_len].unsqueeze(0), msg.tensor().unsqueeze(0))[0]
        for k in offset_steps:
            start = insert + k * stride
            if start < 0 or start + win > m:
                continue
            soft = model.extract_soft(marked[start : start + win].unsqueeze(0))[0].numpy()
            bits = (soft >= 0.5).astype(np.uint8)
            accs[k].append(acc(bits, msg.bits))
            oks[k].append(float(Message(bits, cfg.pattern_len).pattern_ok()))
    keep = [k for k in offset_steps if accs[k]]
    return LocalizationTrace(
        offsets=[round(k * stride_seconds, 6) for k in keep],
        acc_at_offset=[float(np.mean(accs[k])) for k in keep],
        window_seconds=window_seconds,
        stride_seconds=stride_seconds,
        pattern_rate=[float(np.mean(oks[k])) for k in keep],
    )


# ---------------------------------------------------------------------------
# Capacity sweep and efficiency


@torch.no_grad()
def capacity_sweep(
    models: dict[int, SyncGuardModel],
    dataset: DatasetSpec | torch.Tensor,
    noise_snr: float = 20.0,
    seed: int = 0,
    limit: int | None = None,
) -> list[dict]:
    """Clean / noisy ACC and SNR per bit count."""
    rows = []
    for n_bits, model in sorted(models.items()):
        if model.config.n_bits != n_bits:
            raise ContractError(f"model registered under {n_bits} bits has {model.config.n_bits}")
        report = robustness_table(
            model, dataset, ["identity", f"gaussian_noise:snr={noise_snr:g}"], seed=seed, limit=limit
        )
        rows.append(
            {
                "n_bits": n_bits,
                "acc_clean": report.rows[0].acc,
                "acc_noise": report.rows[1].acc,
                "snr_db": report.snr_db,
            }
        )
    return rows


def _layer_flops(module: nn.Module, out: torch.Tensor) -> int:
    """Multiply-adds x 2 (+ bias adds) for one call of a conv / linear layer."""
    if isinstance(module, (nn.Conv1d, nn.Conv2d)):
        k = int(np.prod(module.kernel_size)) * module.in_channels // module.groups
        per_out = 2 * k + (1 if module.bias is not None else 0)
        return per_out * out.numel() // out.shape[0]
    if isinstance(module, nn.Linear):
        per_out = 2 * module.in_features + (1 if module.bias is not None else 0)
        return per_out * out.numel() // out.shape[0]
    return 0


def count_flops(modules: list[nn.Module], fn) -> int:
    """Analytic FLOPs of all conv / linear layers in ``modules`` while ``fn()`` runs (batch 1)."""
    total = 0

    def hook(mod, _inp, out):
        nonlocal total
        total += _layer_flops(mod, out)

    handles = [
        m.register_forward_hook(hook)
        for top in modules
        for m in top.modules()
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear))
    ]
    try:
        with torch.no_grad():
            fn()
    finally:
        for h in handles:
            h.remove()
    return total


def _median_ms(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000)
    return statistics.median(times)


@torch.no_grad()
def efficiency_report(model: SyncGuardModel, seconds: float = 1.0, runs: int = 20, sample_rate: int = 22050) -> dict:
    """Parameters, analytic FLOPs and median wall-clock ms per second of audio."""
    model.eval()
    n = int(round(seconds * sample_rate))
    x = torch.randn(1, n, generator=torch.Generator().manual_seed(0)) * 0.1
    bits = torch.randint(0, 2, (1, model.config.n_bits), generator=torch.Generator().manual_seed(1)).float()
    enc_params, dec_params = count_parameters(model)
    enc_flops = count_flops(model.encoder_modules(), lambda: model.embed(x, bits))
    dec_flops = count_flops(model.decoder_modules(), lambda: model.extract_logits(x))
    model.embed(x, bits)  # warm-up
    enc_ms = _median_ms(lambda: model.embed(x, bits), runs) / seconds
    dec_ms = _median_ms(lambda: model.extract_logits(x), runs) / seconds
    return {
        "encoder": {"params": enc_params, "flops": enc_flops, "ms_per_sec": enc_ms},
        "decoder": {"params": dec_params, "flops": dec_flops, "ms_per_sec": dec_ms},
        "seconds": seconds,
        "runs": runs,
    }
