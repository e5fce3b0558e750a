"""Command-line entry point: ``gruvd <subcommand> ...``.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 numerical failure (non-finite loss, failed gradient check).

Settings resolve as flags > ``--config`` JSON file > defaults. JSON keys use
the field names of TrainConfig, ModelConfig, SyntheticSceneSpec and
SensorProfile. ``GRUVD_OUTPUT_ROOT`` (if set) prefixes relative output paths.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import ConfigError
from .cell import ModelConfig, build_model, run_sequence
from .data_io import (
    FrameFormatError,
    SyntheticSceneSpec,
    delta_for,
    load_dataset,
    noisy_sequence,
    read_frames,
    synthesize_dataset,
    write_frame,
    write_sequence,
)
from .evaluation import VARIANTS, evaluate
from .gradcheck import GradcheckConfig, check_model_gradients
from .noise import NoiseParams, SensorProfile, add_noise, load_profile, lookup_iso
from .tensor import Tensor, no_grad
from .training import NumericalError, SyntheticProvider, TrainConfig, load_model, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gruvd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get("GRUVD_OUTPUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _resolve(args, file_cfg: dict, defaults: dict, mapping: dict) -> dict:
    """Merge defaults <- config file <- explicit flags for the given field names.

    ``mapping`` maps config field name -> argparse dest.
    """
    out = dict(defaults)
    for key in mapping:
        if key in file_cfg:
            out[key] = file_cfg[key]
    for key, dest in mapping.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = v
    return out


def _noise_from_args(args, profile: Optional[SensorProfile] = None) -> NoiseParams:
    if getattr(args, "profile", None):
        profile = load_profile(args.profile)
    if args.a is not None or args.b is not None:
        return NoiseParams(args.a or 0.0, args.b or 0.0)
    if profile is not None and args.iso is not None:
        return lookup_iso(profile, args.iso)
    raise ConfigError("noise parameters required: give --a/--b or --profile with --iso")


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    scene_keys = {"kind": "kind", "frames": "frames", "channels": "channels",
                  "motion_px_per_frame": "motion", "direction_deg": "direction"}
    scene = _resolve(args, cfg.get("scene", cfg), {"kind": "drifting_texture", "frames": 8, "channels": 1,
                                                    "motion_px_per_frame": 0.5, "direction_deg": 0.0}, scene_keys)
    size = args.size if args.size is not None else cfg.get("size", 64)
    count = args.count if args.count is not None else cfg.get("count", 1)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if count < 1:
        raise ConfigError(f"--count must be >= 1, got {count}")
    if args.profile:
        profile = load_profile(args.profile)
    elif "profile" in cfg:
        profile = SensorProfile.from_dict(cfg["profile"])
    else:
        profile = SensorProfile.constant(args.a or 0.0, args.b if args.b is not None else (25 / 255) ** 2)
    isos = args.iso or sorted(profile.table)
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        direction = scene["direction_deg"] if count == 1 else float(rng.uniform(0, 360))
        specs.append(SyntheticSceneSpec(kind=scene["kind"], resolution=(size, size), frames=scene["frames"],
                                        channels=scene["channels"],
                                        motion_px_per_frame=scene["motion_px_per_frame"],
                                        texture_seed=int(rng.integers(2**31)), direction_deg=direction))
    for s in specs:
        s.validate()
    ds = synthesize_dataset(_out_path(args.out), specs, profile, isos, seed)
    print(f"wrote {len(ds.entries)} sequence(s) and manifest to {ds.root}")
    return EXIT_OK


def cmd_addnoise(args) -> int:
    clean = read_frames(args.input).data
    params = _noise_from_args(args)
    noisy = add_noise(params, clean.astype(np.float64), args.seed, clip=args.clip)
    write_sequence(_out_path(args.out), noisy)
    print(f"noisy sequence ({params.a:g}, {params.b:g}) -> {args.out}")
    return EXIT_OK


_TRAIN_FLAGS = {
    "seq_len": "seq_len", "patch": "patch", "batch": "batch", "lr0": "lr", "lr_decay_every": "lr_decay_every",
    "lr_decay_factor": "lr_decay_factor", "w1": "w1", "w2": "w2", "seed": "seed", "max_epochs": "epochs",
    "grad_clip": "grad_clip", "bptt_truncate": "bptt_truncate", "checkpoint_every": "checkpoint_every",
    "adam_beta1": "adam_beta1", "adam_beta2": "adam_beta2", "adam_eps": "adam_eps",
}
_MODEL_FLAGS = {"kind": "model", "hidden": "hidden", "blocks": "blocks", "block_kind": "block_kind"}


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    tdict = _resolve(args, file_cfg.get("train", file_cfg), TrainConfig().to_dict(), _TRAIN_FLAGS)
    if args.grad_clip is not None and args.grad_clip <= 0:
        tdict["grad_clip"] = None
    cfg = TrainConfig.from_dict(tdict)
    cfg.validate()
    ds = load_dataset(args.dataset)
    scenes = ds.load_clean()
    mdict = _resolve(args, file_cfg.get("model", {}), {"kind": "gru_vd", "hidden": 16, "blocks": 3,
                                                          "block_kind": "plain"}, _MODEL_FLAGS)
    mconf = ModelConfig(channels=scenes[0].shape[1], **mdict)
    model = build_model(mconf, seed=cfg.seed)
    isos = sorted({e.iso for e in ds.entries})
    provider = SyntheticProvider(scenes, ds.profile, isos, cfg.patch, cfg.seq_len, cfg.batch, cfg.seed)
    out = _out_path(args.out)

    def show(rec):
        if rec.epoch % args.log_every == 0 or rec.epoch == cfg.max_epochs - 1:
            print(f"epoch {rec.epoch:6d} loss {rec.loss:.6f} fusion {rec.loss_fusion:.6f} "
                  f"init {rec.loss_init:.6f} lr {rec.lr:.2e}", flush=True)

    report = train(model, provider, cfg, checkpoint_dir=out, resume=args.resume, on_epoch=show)
    if args.report:
        report.write_csv(_out_path(args.report))
    print(f"checkpoint -> {out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    model = load_model(args.checkpoint)
    noisy = read_frames(args.input).data
    if noisy.ndim == 3:
        noisy = noisy[None]
    if noisy.shape[1] != model.channels:
        raise ConfigError(f"input has {noisy.shape[1]} channels, checkpoint expects {model.channels}")
    params = _noise_from_args(args)
    delta = delta_for(params, noisy.astype(np.float64)).astype(np.float32)
    frames = [(Tensor(noisy[t:t + 1]), Tensor(delta[t:t + 1])) for t in range(noisy.shape[0])]
    with no_grad():
        outs = run_sequence(model, frames)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if model.channels == 1 else "ppm"
    for t, o in enumerate(outs):
        write_frame(out / f"y_{t:04d}.{ext}", o.y.data[0])
        if args.dump_gates:
            for name in ("r", "f", "s"):
                write_frame(out / f"{name}_{t:04d}.{ext}", getattr(o, name).data[0])
    write_sequence(out / "denoised.gvsq", np.stack([o.y.data[0] for o in outs]))
    print(f"denoised {len(outs)} frame(s) -> {out}")
    return EXIT_OK


def _eval_sequences(ds, dtype=np.float32):
    seqs = []
    for e, clean in zip(ds.entries, ds.load_clean()):
        seqs.append(noisy_sequence(clean, lookup_iso(ds.profile, e.iso), e.seed, dtype=dtype))
    return seqs


def cmd_eval(args) -> int:
    variants = ["noisy"] + [v for v in args.variants.split(",") if v and v != "noisy"]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    model = load_model(args.checkpoint)
    gru = load_model(args.gru_checkpoint) if args.gru_checkpoint else None
    ds = load_dataset(args.dataset)
    report = evaluate(model, _eval_sequences(ds), variants, gru_model=gru, peak=args.peak,
                      dump_dir=_out_path(args.dump) if args.dump else None)
    print(report.table())
    if args.out:
        report.write_csv(_out_path(args.out))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = GradcheckConfig(channels=args.channels, size=args.size, hidden=args.hidden, blocks=args.blocks,
                          seq_len=args.frames, block_kind=args.block_kind, tolerance=args.tolerance,
                          seed=args.seed)
    result = check_model_gradients(cfg, inject_bug=args.inject_bug)
    print("\n".join(result.lines()))
    return EXIT_OK if result.passed else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------

def _noise_flags(p):
    p.add_argument("--a", type=float, help="shot-noise coefficient")
    p.add_argument("--b", type=float, help="readout variance")
    p.add_argument("--profile", help="sensor profile JSON")
    p.add_argument("--iso", type=int, help="ISO to look up in the profile")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gruvd", description="Recurrent GRU-style video denoiser.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic clean dataset")
    p.add_argument("--kind", choices=["drifting_texture", "moving_shapes", "static"])
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--motion", type=float)
    p.add_argument("--direction", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--profile")
    p.add_argument("--iso", type=int, action="append")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("addnoise", help="add heteroscedastic noise to a sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", action="store_true")
    _noise_flags(p)
    p.set_defaults(func=cmd_addnoise)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--report", help="TrainReport CSV path")
    p.add_argument("--model", choices=["gru_vd", "gru"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--block-kind", dest="block_kind", choices=["plain", "distill"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--adam-beta1", dest="adam_beta1", type=float)
    p.add_argument("--adam-beta2", dest="adam_beta2", type=float)
    p.add_argument("--adam-eps", dest="adam_eps", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, help="global-norm clip; <= 0 disables")
    p.add_argument("--bptt-truncate", dest="bptt_truncate", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", dest="log_every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise a noisy sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="noisy .gvsq sequence or single .pgm/.ppm frame")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-gates", action="store_true")
    _noise_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="evaluate variants on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gru-checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variants", default="s_only,fused,spatial")
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--out", help="EvalReport CSV path")
    p.add_argument("--dump", help="directory for per-frame PNG dumps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--block-kind", dest="block_kind", default="plain", choices=["plain", "distill"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-bug", dest="inject_bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with contextlib.ExitStack() as stack:
        if args.threads:
            from threadpoolctl import threadpool_limits

            stack.enter_context(threadpool_limits(args.threads))
        return _dispatch(args)


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FrameFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
