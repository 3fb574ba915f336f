"""Command-line workflow: phantom -> pretrain -> train-diffusion -> sample
-> eval, plus the four-arm ablate driver.

Exit codes: 0 success, 2 config/contract errors, 3 missing files,
4 malformed volume or checkpoint files, 1 anything else. Relative --data
and --out paths resolve under WAVELATENT_DATA_ROOT / WAVELATENT_OUTPUT_ROOT
when those variables are set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, load_config, save_config
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    VolumeFormatError,
)
from .metrics import evaluate_volumes, format_report
from .phantom import generate, load_dataset, read_volume, save_dataset, write_volume
from . import pipeline


def _resolve(path, env_var):
    root = os.environ.get(env_var)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _data_path(path):
    return _resolve(path, "WAVELATENT_DATA_ROOT")


def _out_path(path):
    return _resolve(path, "WAVELATENT_OUTPUT_ROOT")


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.validate()
    return cfg


def cmd_phantom(args) -> int:
    out = _out_path(args.out)
    pairs = generate(args.seed, args.size, args.count)
    save_dataset(pairs, out, seed=args.seed, size=args.size)
    print(f"wrote {len(pairs)} phantom pairs to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.ini"))
    pairs = load_dataset(_data_path(args.data))
    train_pairs = pairs[: cfg.train_count] if len(pairs) > cfg.train_count else pairs
    with pipeline.run_lock(out):
        path = pipeline.pretrain(cfg, train_pairs, out, resume=args.resume,
                                 quiet=args.quiet)
    print(f"autoencoder checkpoint: {path}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.ini"))
    pairs = load_dataset(_data_path(args.data))
    train_pairs = pairs[: cfg.train_count] if len(pairs) > cfg.train_count else pairs
    with pipeline.run_lock(out):
        path = pipeline.train_diffusion(cfg, train_pairs, args.ae_ckpt, out,
                                        quiet=args.quiet)
    print(f"denoiser checkpoint: {path}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg.inference_steps = args.steps
        cfg.validate()
    out = _out_path(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
    mr, spacing = read_volume(_data_path(args.mr))
    ae = pipeline.load_autoencoder(cfg, args.ae_ckpt)
    dn = pipeline.load_denoiser(cfg, args.dn_ckpt)
    ct = pipeline.synthesize(cfg, ae, dn, mr, sample_seed=args.seed)
    write_volume(out, ct.astype(np.float32), spacing)
    save_config(cfg, out + ".config.ini")
    print(f"synthetic volume: {out}")
    return 0


def cmd_eval(args) -> int:
    pred, _ = read_volume(_data_path(args.pred))
    ref, _ = read_volume(_data_path(args.ref))
    labels = None
    if args.labels:
        labels, _ = read_volume(_data_path(args.labels))
    values = evaluate_volumes(pred, ref, labels=labels)
    report = format_report(values)
    sys.stdout.write(report)
    if args.out:
        out = _out_path(args.out)
        with open(out, "w") as f:
            f.write(report)
        with open(out + ".json", "w") as f:
            json.dump({k: (str(v) if v == float("inf") else v)
                       for k, v in values.items()}, f, indent=2)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.ini"))
    pairs = load_dataset(_data_path(args.data))
    table = pipeline.run_ablation(cfg, pairs, out, quiet=args.quiet)
    with open(os.path.join(out, "ablation.txt")) as f:
        sys.stdout.write(f.read())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavelatent",
                                description="wavelet latent diffusion workflow")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a paired phantom dataset")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=77)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_phantom)

    sp = sub.add_parser("pretrain", help="train the shared autoencoder")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train-diffusion", help="train the latent denoiser")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ae-ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train_diffusion)

    sp = sub.add_parser("sample", help="synthesize a CT volume from an MR volume")
    sp.add_argument("--config", default=None)
    sp.add_argument("--mr", required=True)
    sp.add_argument("--ae-ckpt", required=True)
    sp.add_argument("--dn-ckpt", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="metric report for a synthesized volume")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--labels", default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run all four arms and compare")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 3
    except (VolumeFormatError, CheckpointFormatError) as e:
        print(f"error: malformed file: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # pragma: no cover - defensive
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
