"""``syncguard`` command-line entry point.

Every command writes a JSON manifest (argv, resolved options, seed, model
checkpoint hash and the command's result) that ``syncguard replay`` can re-run
and verify.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .audio_io import WORKING_RATE, DatasetSpec, load_audio, load_segments, save_audio
from .codec.api import embed, extract, file_sha256, load_checkpoint
from .codec.message import Message
from .codec.model import ModelConfig, SyncGuardModel, exponential_schedule
from .distortion.attacks import apply_chain, format_chain, parse_attack, parse_chain
from .distortion.sampler import AttackSampler, default_training_sampler
from .errors import ConfigurationError, ParameterError, SyncGuardError
from .evalbench import (
    TABLE2_ATTACKS,
    TABLE3_ATTACKS,
    capacity_sweep,
    crop_position_study,
    efficiency_report,
    first_detection,
    localization_study,
    robustness_table,
    rows_to_csv,
    sliding_extract,
)
from .trainer import MetricsLog, TrainConfig, Trainer

logger = logging.getLogger("syncguard")

USAGE_ERROR = 2
RUNTIME_ERROR = 1

# option defaults; a --config file overrides these, explicit flags override both
DEFAULTS = {
    "seed": 0,
    "sample_rate": WORKING_RATE,
    "segment_seconds": 1.0,
    "n_bits": 32,
    "pattern_len": 8,
    "c_w": 32,
    "c_v": 32,
    "width": 32,
    "n_blocks": 8,
    "head_channels": 16,
    "block_pattern": "dr+dg",
    "lambda_e": 1.0,
    "lambda_w": 0.01,
    "lambda_adv": 0.01,
    "lr": 1e-5,
    "batch_size": 8,
    "stage1_steps": 1000,
    "stage2_steps": 1000,
    "stage1_target_acc": 0.99,
    "eval_every": 50,
    "checkpoint_every": 0,
    "attack_pool": None,
    "exclude": None,
    "split": "test",
    "limit": None,
    "window": 1.0,
    "stride": 0.05,
    "fractions": "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.85",
    "positions": "begin,middle,end",
    "runs": 20,
}


def _opt(parser: argparse.ArgumentParser, *flags: str, **kw) -> None:
    kw.setdefault("default", None)
    parser.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="syncguard", description="Frame-wise broadcast audio watermarking.")
    p.add_argument("--version", action="version", version=f"syncguard {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, data=False):
        _opt(sp, "--config", help="YAML file of option values")
        _opt(sp, "--seed", type=int)
        _opt(sp, "--manifest", help="manifest path (default: derived from the output path)")
        _opt(sp, "--sample-rate", type=int, dest="sample_rate")
        if model:
            _opt(sp, "--model", required=True, help="checkpoint path")
        if data:
            _opt(sp, "--data", required=True, help="dataset root (WAV files, optional train/ and test/ subdirs)")
            _opt(sp, "--segment-seconds", type=float, dest="segment_seconds")
            _opt(sp, "--split", choices=["train", "test"])
            _opt(sp, "--limit", type=int, help="use at most this many segments")

    def model_opts(sp):
        for name, typ in (("n-bits", int), ("pattern-len", int), ("c-w", int), ("c-v", int),
                          ("width", int), ("n-blocks", int), ("head-channels", int)):
            _opt(sp, f"--{name}", type=typ, dest=name.replace("-", "_"))
        _opt(sp, "--block-pattern", choices=["dr+dg", "dr", "dg", "plain"], dest="block_pattern")

    sp = sub.add_parser("train", help="two-stage training")
    common(sp, data=True)
    model_opts(sp)
    _opt(sp, "--out", required=True, help="output directory")
    _opt(sp, "--init", help="resume from this checkpoint")
    for name, typ in (("lambda-e", float), ("lambda-w", float), ("lambda-adv", float), ("lr", float),
                      ("batch-size", int), ("stage1-steps", int), ("stage2-steps", int),
                      ("stage1-target-acc", float), ("eval-every", int), ("checkpoint-every", int)):
        _opt(sp, f"--{name}", type=typ, dest=name.replace("-", "_"))
    _opt(sp, "--attack-pool", action="append", dest="attack_pool",
         help="pool entry ATTACK@LEVEL, e.g. 'tsm:rate=0.9/1.1@high' (repeatable)")
    _opt(sp, "--exclude", help="comma-separated attack kinds removed from the pool (ablation)")

    sp = sub.add_parser("embed", help="watermark a WAV file")
    common(sp, model=True)
    _opt(sp, "--in", dest="input", required=True)
    _opt(sp, "--out", required=True)
    _opt(sp, "--bits", help="payload as bit string or 0x-hex (random when omitted)")
    sp.add_argument("--raw-bits", action="store_true", help="--bits holds all n bits, no pattern prefix")

    sp = sub.add_parser("extract", help="recover the message from a WAV file")
    common(sp, model=True)
    _opt(sp, "--in", dest="input", required=True)
    sp.add_argument("--json", action="store_true")

    sp = sub.add_parser("attack", help="apply an attack chain to a WAV file")
    common(sp)
    _opt(sp, "--chain", required=True, help="e.g. 'tsm:rate=0.9|noise:snr=30'")
    _opt(sp, "--in", dest="input", required=True)
    _opt(sp, "--out", required=True)

    sp = sub.add_parser("evaluate", help="robustness table over a dataset")
    common(sp, model=True, data=True)
    _opt(sp, "--attacks", help="'table2', 'table3', 'all' or ';'-separated attack specs (default all)")
    _opt(sp, "--report", help="write line-delimited JSON records here")
    sp.add_argument("--pesq", action="store_true", help="score PESQ via the external hook")

    sp = sub.add_parser("crop-study", help="ACC vs cropped fraction at begin/middle/end")
    common(sp, model=True, data=True)
    _opt(sp, "--fractions")
    _opt(sp, "--positions")
    _opt(sp, "--csv")

    sp = sub.add_parser("locate", help="sliding-window detection")
    common(sp, model=True)
    _opt(sp, "--in", dest="input", help="WAV to scan")
    _opt(sp, "--data", help="dataset for the offset study instead of a single file")
    _opt(sp, "--split", choices=["train", "test"])
    _opt(sp, "--limit", type=int)
    _opt(sp, "--host-seconds", type=float, dest="host_seconds")
    _opt(sp, "--window", type=float)
    _opt(sp, "--stride", type=float)
    _opt(sp, "--csv")

    sp = sub.add_parser("sweep", help="capacity sweep over bit counts")
    common(sp, data=True)
    _opt(sp, "--models", help="comma-separated checkpoints (one per bit count)")
    _opt(sp, "--csv")

    sp = sub.add_parser("efficiency", help="parameters, FLOPs and timing")
    common(sp)
    model_opts(sp)
    _opt(sp, "--model", help="checkpoint (default: build from the model options)")
    _opt(sp, "--runs", type=int)

    sp = sub.add_parser("synth", help="write a synthetic speech-like corpus")
    _opt(sp, "--out", required=True)
    _opt(sp, "--n-train", type=int, dest="n_train", default=20)
    _opt(sp, "--n-test", type=int, dest="n_test", default=8)
    _opt(sp, "--seconds", type=float, default=4.0)
    _opt(sp, "--seed", type=int, default=0)
    _opt(sp, "--manifest")

    sp = sub.add_parser("replay", help="re-run a manifest and verify its result")
    sp.add_argument("manifest_path")
    _opt(sp, "--manifest")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a key/value mapping")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _model_config(o: dict) -> ModelConfig:
    n_blocks = int(o["n_blocks"])
    return ModelConfig(
        n_bits=int(o["n_bits"]),
        pattern_len=int(o["pattern_len"]),
        c_w=int(o["c_w"]),
        c_v=int(o["c_v"]),
        width=int(o["width"]),
        n_blocks=n_blocks,
        dilation_schedule=exponential_schedule(n_blocks),
        head_channels=int(o["head_channels"]),
        block_pattern=o["block_pattern"],
    )


def _sampler(o: dict) -> AttackSampler:
    if o.get("attack_pool"):
        pool = []
        for entry in o["attack_pool"]:
            attack, sep, level = entry.rpartition("@")
            if not sep:
                raise ConfigurationError(f"pool entry {entry!r} must read ATTACK@LEVEL")
            pool.append((parse_attack(attack), level if level in ("high", "medium", "low") else float(level)))
        sampler = AttackSampler(pool)
    else:
        sampler = default_training_sampler()
    if o.get("exclude"):
        sampler = sampler.without(*[k.strip() for k in o["exclude"].split(",") if k.strip()])
    return sampler


def _dataset(o: dict, split: str | None = None) -> DatasetSpec:
    return DatasetSpec(
        root_path=o["data"],
        segment_seconds=float(o["segment_seconds"]),
        split=split or o["split"],
        shuffle_seed=int(o["seed"]),
        sample_rate=int(o["sample_rate"]),
    )


# ---------------------------------------------------------------------------
# commands; each returns a JSON-serialisable result stored in the manifest


def cmd_train(o: dict) -> dict:
    torch.manual_seed(int(o["seed"]))
    if o.get("init"):
        model = load_checkpoint(o["init"])
    else:
        model = SyncGuardModel(_model_config(o))
    cfg = TrainConfig(
        lambda_e=float(o["lambda_e"]),
        lambda_w=float(o["lambda_w"]),
        lambda_adv=float(o["lambda_adv"]),
        learning_rate=float(o["lr"]),
        batch_size=int(o["batch_size"]),
        stage1_steps=int(o["stage1_steps"]),
        stage2_steps=int(o["stage2_steps"]),
        stage1_target_acc=o["stage1_target_acc"],
        sampler=_sampler(o),
        seed=int(o["seed"]),
        eval_every=int(o["eval_every"]),
        checkpoint_every=int(o["checkpoint_every"]),
        sample_rate=int(o["sample_rate"]),
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_segments(_dataset(o, "train"))
    started = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as sink:
        trainer = Trainer(model, data, cfg, out_dir=out, log=MetricsLog(sink))
        state = trainer.run()
    elapsed = time.perf_counter() - started
    (out / "train_config.yaml").write_text(yaml.safe_dump({"model": model.config.to_dict(), "train": cfg.to_dict()}))
    final = out / "final.pt"
    last_eval = state.evals[-1] if state.evals else {}
    print(f"trained {state.step} steps (stage 1 ended at {state.stage1_end}); "
          f"clean ACC {last_eval.get('ACC', float('nan')):.4f}, SNR {last_eval.get('SNR', float('nan')):.2f} dB")
    print(f"checkpoint: {final}")
    return {"checkpoint": str(final), "checkpoint_sha256": file_sha256(final), "steps": state.step,
            "stage1_end": state.stage1_end, "last_eval": last_eval, "elapsed_seconds": round(elapsed, 1)}


def cmd_embed(o: dict) -> dict:
    model = load_checkpoint(o["model"])
    cfg = model.config
    clip = load_audio(o["input"], int(o["sample_rate"]))
    if o.get("bits"):
        message = Message.parse(o["bits"], cfg.n_bits, cfg.pattern_len, raw=bool(o.get("raw_bits")))
    else:
        message = Message.random(cfg.n_bits, cfg.pattern_len, np.random.default_rng(int(o["seed"])))
    marked = embed(clip, message, model)
    save_audio(marked, o["out"])
    print(message.to_string())
    return {"message": message.to_string(), "samples": len(marked), "output_sha256": file_sha256(o["out"])}


def cmd_extract(o: dict) -> dict:
    model = load_checkpoint(o["model"])
    clip = load_audio(o["input"], int(o["sample_rate"]))
    message, soft = extract(clip, model)
    result = {
        "bits": message.to_string(),
        "pattern_ok": message.pattern_ok(),
        "soft": [float(v) for v in soft],
    }
    if o.get("json"):
        print(json.dumps(result))
    else:
        print(f"{result['bits']} pattern_ok={str(result['pattern_ok']).lower()}")
    return result


def cmd_attack(o: dict) -> dict:
    chain = parse_chain(o["chain"])
    clip = load_audio(o["input"], int(o["sample_rate"]))
    y = apply_chain(clip.tensor(torch.float64), chain, seed=int(o["seed"]), sample_rate=clip.sample_rate)
    from .audio_io import AudioClip

    out = AudioClip(y.numpy(), clip.sample_rate)
    save_audio(out, o["out"])
    print(f"{format_chain(chain)}: {len(clip)} -> {len(out)} samples")
    return {"chain": format_chain(chain), "in_samples": len(clip), "out_samples": len(out),
            "output_sha256": file_sha256(o["out"])}


def _attack_list(text: str | None) -> list[str]:
    if not text or text == "all":
        return ["identity", *TABLE2_ATTACKS, *TABLE3_ATTACKS]
    if text == "table2":
        return ["identity", *TABLE2_ATTACKS]
    if text == "table3":
        return ["identity", *TABLE3_ATTACKS]
    return [t.strip() for t in text.split(";") if t.strip()]


def cmd_evaluate(o: dict) -> dict:
    model = load_checkpoint(o["model"])
    report = robustness_table(
        model, _dataset(o), _attack_list(o.get("attacks")), seed=int(o["seed"]),
        sample_rate=int(o["sample_rate"]), limit=o.get("limit"), with_pesq=bool(o.get("pesq")),
    )
    report.metadata["checkpoint_sha256"] = file_sha256(o["model"])
    print(report.to_table())
    if o.get("report"):
        Path(o["report"]).write_text(report.to_jsonl())
    return {"rows": [r.__dict__ for r in report.rows], "snr_db": report.snr_db, "pesq": report.pesq}


def cmd_crop_study(o: dict) -> dict:
    model = load_checkpoint(o["model"])
    fractions = [float(f) for f in str(o["fractions"]).split(",")]
    positions = [p.strip() for p in str(o["positions"]).split(",")]
    rows = crop_position_study(model, _dataset(o), fractions, positions, seed=int(o["seed"]), limit=o.get("limit"))
    text = rows_to_csv(rows)
    print(text, end="")
    if o.get("csv"):
        Path(o["csv"]).write_text(text)
    return {"rows": rows}


def cmd_locate(o: dict) -> dict:
    model = load_checkpoint(o["model"])
    window, stride = float(o["window"]), float(o["stride"])
    if o.get("input"):
        clip = load_audio(o["input"], int(o["sample_rate"]))
        results = sliding_extract(clip, model, window, stride)
        hit = first_detection(results)
        for r in results:
            print(f"{r.offset:8.3f}s {r.bits.to_string()} pattern_ok={str(r.pattern_ok).lower()}")
        if hit is None:
            print("no pattern-valid window found")
        else:
            print(f"detected at {hit.offset:.3f}s: {hit.bits.to_string()}")
        return {"windows": len(results), "detection": None if hit is None else
                {"offset": hit.offset, "bits": hit.bits.to_string()}}
    if not o.get("data"):
        raise ConfigurationError("locate needs --in or --data")
    host_seconds = float(o.get("host_seconds") or 3.0)
    hosts = load_segments(
        DatasetSpec(o["data"], host_seconds, o["split"], int(o["seed"]), int(o["sample_rate"])), o.get("limit")
    )
    trace = localization_study(model, hosts, 1.0, window, stride, seed=int(o["seed"]))
    text = rows_to_csv(trace.rows())
    print(text, end="")
    if o.get("csv"):
        Path(o["csv"]).write_text(text)
    return {"rows": trace.rows()}


def cmd_sweep(o: dict) -> dict:
    if not o.get("models"):
        raise ConfigurationError("sweep needs --models (train one checkpoint per bit count with `train --n-bits`)")
    models = {}
    for path in o["models"].split(","):
        m = load_checkpoint(path.strip())
        models[m.config.n_bits] = m
    rows = capacity_sweep(models, _dataset(o), seed=int(o["seed"]), limit=o.get("limit"))
    text = rows_to_csv(rows)
    print(text, end="")
    if o.get("csv"):
        Path(o["csv"]).write_text(text)
    return {"rows": rows}


def cmd_efficiency(o: dict) -> dict:
    if o.get("model"):
        model = load_checkpoint(o["model"])
    else:
        torch.manual_seed(int(o["seed"]))
        model = SyncGuardModel(_model_config(o))
    report = efficiency_report(model, runs=int(o["runs"]), sample_rate=int(o["sample_rate"]))
    print(f"{'module':<8} {'params (M)':>11} {'GFLOPs':>9} {'ms / sec':>9}")
    for name in ("encoder", "decoder"):
        r = report[name]
        print(f"{name:<8} {r['params'] / 1e6:>11.3f} {r['flops'] / 1e9:>9.2f} {r['ms_per_sec']:>9.2f}")
    return report


def cmd_synth(o: dict) -> dict:
    from .synth import write_corpus

    root = write_corpus(o["out"], int(o["n_train"]), int(o["n_test"]), float(o["seconds"]), int(o["seed"]))
    print(f"corpus written to {root}")
    return {"root": str(root)}


COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "crop-study": cmd_crop_study,
    "locate": cmd_locate,
    "sweep": cmd_sweep,
    "efficiency": cmd_efficiency,
    "synth": cmd_synth,
}


def _manifest_path(o: dict) -> Path:
    if o.get("manifest"):
        return Path(o["manifest"])
    out = o.get("out") or o.get("report") or o.get("csv")
    if out:
        out = Path(out)
        return (out / "manifest.json") if out.is_dir() else out.with_name(out.name + ".manifest.json")
    return Path(f"syncguard-{o['command']}.manifest.json")


def write_manifest(argv: list[str], o: dict, result) -> Path:
    path = _manifest_path(o)
    manifest = {
        "version": __version__,
        "argv": argv,
        "command": o["command"],
        "seed": o.get("seed"),
        "options": {k: v for k, v in o.items() if _jsonable(v)},
        "model_sha256": file_sha256(o["model"]) if o.get("model") and Path(o["model"]).is_file() else None,
        "result": result,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
    except TypeError:
        return False
    return True


def replay(manifest_path: str) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    argv = list(manifest["argv"])
    if manifest.get("model_sha256") and manifest["options"].get("model"):
        if file_sha256(manifest["options"]["model"]) != manifest["model_sha256"]:
            print("checkpoint changed since the manifest was written", file=sys.stderr)
            return RUNTIME_ERROR
    args = build_parser().parse_args(argv)
    o = resolve_options(args)
    result = json.loads(json.dumps(COMMANDS[o["command"]](o), default=str))
    if result != manifest["result"]:
        print("replay result differs from manifest", file=sys.stderr)
        return RUNTIME_ERROR
    print("replay matches manifest")
    return 0


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "replay":
        try:
            return replay(args.manifest_path)
        except (OSError, KeyError, json.JSONDecodeError, SyncGuardError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return RUNTIME_ERROR
    try:
        o = resolve_options(args)
        result = COMMANDS[args.command](o)
    except (ConfigurationError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (SyncGuardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    write_manifest(argv, o, json.loads(json.dumps(result, default=str)))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
