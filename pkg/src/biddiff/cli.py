"""Command-line entry point.

Subcommands: make-dataset, train, enhance, degrade, eval, decompose, ablate.
A single flat JSON config file (--config) drives every command; any config
field can also be overridden by a flag of the same name, and flags win. The
BIDDIFF_SEED environment variable acts as a seed fallback when neither a
flag nor the config file sets one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import Config
from .correction import retinex_decompose
from .dataset import (
    DegradationParams,
    PairedDirDataset,
    degrade,
    load_image,
    make_synthetic_set,
    save_image,
    synthesize_source_images,
)
from .metrics import evaluate_dirs

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _tuple_parser(elem_type):
    def parse(s: str):
        s = s.strip()
        if s in ("", "none"):
            return ()
        return tuple(elem_type(x) for x in s.split(","))

    return parse


def add_config_flags(parser: argparse.ArgumentParser, only=None) -> None:
    """One flag per config field; unset flags never shadow file values.

    `only` restricts the flags to the fields a subcommand actually consumes.
    """
    group = parser.add_argument_group("config overrides")
    for name, f in _CONFIG_FIELDS.items():
        if only is not None and name not in only:
            continue
        flag = "--" + name.replace("_", "-")
        default = f.default
        help_text = f"(default: {default})"
        if isinstance(default, bool):
            group.add_argument(
                flag, dest=name, action=argparse.BooleanOptionalAction,
                default=argparse.SUPPRESS, help=help_text,
            )
        elif isinstance(default, tuple):
            elem = int if all(isinstance(x, int) for x in default) else float
            group.add_argument(
                flag, dest=name, type=_tuple_parser(elem),
                default=argparse.SUPPRESS, metavar="V,V,...", help=help_text,
            )
        else:
            group.add_argument(
                flag, dest=name, type=type(default),
                default=argparse.SUPPRESS, help=help_text,
            )


def resolve_config(args: argparse.Namespace) -> Config:
    """Defaults < BIDDIFF_SEED < config file < explicit flags."""
    file_dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_dict = json.load(f)
    cfg = Config.from_dict(file_dict)
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_FIELDS}
    if "seed" not in overrides and "seed" not in file_dict:
        env_seed = os.environ.get("BIDDIFF_SEED")
        if env_seed is not None:
            overrides["seed"] = int(env_seed)
    return cfg.replace(**overrides)


def _sampling_seed(args: argparse.Namespace) -> int:
    """Seed for commands that do not go through the full config."""
    seed = getattr(args, "seed", None)
    if seed is not None:
        return seed
    env_seed = os.environ.get("BIDDIFF_SEED")
    return int(env_seed) if env_seed is not None else 0


def _echo_config(cfg: Config, out_dir=None) -> None:
    print(f"config: {cfg.to_json()}")
    if out_dir is not None:
        cfg.save(Path(out_dir) / "effective_config.json")


def _degradation_params(cfg: Config) -> DegradationParams:
    return DegradationParams(
        gamma_range=tuple(cfg.gamma_range),
        scale_range=tuple(cfg.scale_range),
        noise_sigma_range=tuple(cfg.noise_sigma_range),
        color_cast_strength=tuple(cfg.color_cast_strength),
        seed=cfg.seed,
    )


def cmd_make_dataset(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg, args.out)
    if args.source_dir:
        sources = [load_image(p) for p in sorted(Path(args.source_dir).glob("*.png"))]
        if not sources:
            raise FileNotFoundError(f"no .png files in {args.source_dir}")
    else:
        sources = synthesize_source_images(args.n, size=args.size, seed=cfg.seed)
    manifest = make_synthetic_set(sources, args.n, _degradation_params(cfg), args.out)
    print(f"wrote {len(manifest)} pairs under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    state = None
    if args.resume:
        # a resumed run continues under the checkpoint's own config; only
        # explicitly passed flags override it
        state = pipeline.load_checkpoint(args.resume)
        explicit = {k: v for k, v in vars(args).items() if k in _CONFIG_FIELDS}
        state.config = state.config.replace(**explicit)
        cfg = state.config
        print(f"resumed from {args.resume} at step {state.step}")
    _echo_config(cfg, args.out)
    state = pipeline.train(
        cfg, args.data, out_dir=args.out, state=state,
        stop_at_psnr=args.stop_at_psnr, eval_every=args.eval_every,
    )
    print(f"finished at step {state.step}; checkpoint at {Path(args.out) / 'checkpoint.ckpt'}")
    return 0


def _iter_images(input_path, output_path):
    """Yield (src, dst) pairs for a file->file or dir->dir request."""
    input_path, output_path = Path(input_path), Path(output_path)
    if input_path.is_dir():
        if output_path.suffix:
            raise ValueError("--input is a directory, so --output must be one too")
        files = sorted(input_path.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no .png files in {input_path}")
        for p in files:
            yield p, output_path / p.name
    else:
        yield input_path, output_path


def cmd_enhance(args) -> int:
    state = pipeline.load_checkpoint(args.checkpoint)
    if args.stochastic:
        state.config = state.config.replace(deterministic_sampler=False)
    seed = _sampling_seed(args)
    for src, dst in _iter_images(args.input, args.output):
        out = pipeline.enhance(load_image(src), state, steps=args.steps, seed=seed)
        save_image(out, dst)
        print(f"{src} -> {dst}")
    return 0


def cmd_degrade(args) -> int:
    if args.checkpoint and args.synthetic:
        raise ValueError("--checkpoint and --synthetic are mutually exclusive")
    if args.synthetic:
        cfg = resolve_config(args)
        params = _degradation_params(cfg)
        for src, dst in _iter_images(args.input, args.output):
            save_image(degrade(load_image(src), params, cfg.seed), dst)
            print(f"{src} -> {dst}")
        return 0
    if not args.checkpoint:
        raise ValueError("need --checkpoint (H2L sampling) or --synthetic (forward model)")
    state = pipeline.load_checkpoint(args.checkpoint)
    if args.stochastic:
        state.config = state.config.replace(deterministic_sampler=False)
    seed = _sampling_seed(args)
    for src, dst in _iter_images(args.input, args.output):
        out = pipeline.degrade_demo(load_image(src), state, steps=args.steps, seed=seed)
        save_image(out, dst)
        print(f"{src} -> {dst}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt, report_path=args.out)
    for name, p, s in report.per_image:
        print(f"{name}  psnr {p:.3f} dB  ssim {s:.4f}")
    print(f"mean over {report.count}: psnr {report.mean_psnr:.3f} dB  ssim {report.mean_ssim:.4f}")
    return 0


def cmd_decompose(args) -> int:
    cfg = resolve_config(args)
    src = Path(args.input)
    out_dir = Path(args.out) if args.out else src.parent
    dec = retinex_decompose(
        load_image(src).unsqueeze(0), cfg.retinex_sigma, cfg.retinex_eps
    )
    r_path = out_dir / f"{src.stem}_reflectance.png"
    l_path = out_dir / f"{src.stem}_illumination.png"
    save_image(dec.R[0], r_path)
    save_image(dec.L[0].expand(3, -1, -1), l_path)
    print(f"wrote {r_path} and {l_path}")
    return 0


ABLATION_ROWS = (
    ("baseline", {"use_h2l": False, "use_afi": False, "use_racm": False}),
    ("+H2L", {"use_h2l": True, "use_afi": False, "use_racm": False}),
    ("+AFI", {"use_h2l": True, "use_afi": True, "use_racm": False}),
    ("Default", {"use_h2l": True, "use_afi": True, "use_racm": True}),
)


def run_ablation(cfg: Config, data_root, budget: int, out_dir=None, quiet: bool = False) -> list:
    """Train the four component-toggle rows and score train-set PSNR/SSIM."""
    from .losses import ssim as ssim_fn
    from .metrics import psnr as psnr_fn

    dataset = PairedDirDataset(data_root)
    rows = []
    for name, toggles in ABLATION_ROWS:
        row_cfg = cfg.replace(steps=budget, **toggles)
        state = pipeline.train(row_cfg, data_root, out_dir=None, quiet=True)
        psnrs, ssims = [], []
        for i in range(len(dataset)):
            x_l, x_h = dataset.load_pair(i)
            out = pipeline.enhance(x_l, state, seed=row_cfg.seed)
            psnrs.append(psnr_fn(out, x_h))
            ssims.append(float(ssim_fn(out.unsqueeze(0), x_h.unsqueeze(0))))
        rows.append(
            {
                "name": name,
                **toggles,
                "psnr": sum(psnrs) / len(psnrs),
                "ssim": sum(ssims) / len(ssims),
            }
        )
        if not quiet:
            print(f"[ablate] {name}: psnr {rows[-1]['psnr']:.3f} dB  ssim {rows[-1]['ssim']:.4f}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
    return rows


def format_ablation_table(rows: list) -> str:
    def mark(v):
        return "yes" if v else "no"

    lines = [
        f"{'row':10s} {'H2L':>4s} {'AFI':>4s} {'RACM':>5s} {'PSNR(dB)':>9s} {'SSIM':>7s}",
        "-" * 44,
    ]
    for r in rows:
        lines.append(
            f"{r['name']:10s} {mark(r['use_h2l']):>4s} {mark(r['use_afi']):>4s} "
            f"{mark(r['use_racm']):>5s} {r['psnr']:9.3f} {r['ssim']:7.4f}"
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg, args.out)
    rows = run_ablation(cfg, args.data, args.budget, out_dir=args.out)
    print(format_ablation_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biddiff",
        description="Bidirectional conditional diffusion for low-light image enhancement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a synthetic paired low/high set")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=8, help="number of pairs (default: 8)")
    p.add_argument("--size", type=int, default=64, help="image side for procedural sources")
    p.add_argument("--source-dir", default=None, help="optional directory of source PNGs")
    p.add_argument("--config", default=None, help="JSON config file")
    add_config_flags(p)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train the bidirectional diffusion model")
    p.add_argument("--data", required=True, help="dataset root with low/ and high/")
    p.add_argument("--out", required=True, help="output directory (checkpoint, logs)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--stop-at-psnr", type=float, default=None,
                   help="early-stop once train-set PSNR reaches this")
    p.add_argument("--eval-every", type=int, default=0,
                   help="train-set PSNR evaluation interval (0 = never)")
    p.add_argument("--config", default=None, help="JSON config file")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance low-light image(s) with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input PNG or directory")
    p.add_argument("--output", required=True, help="output PNG or directory")
    p.add_argument("--steps", type=int, default=10, help="denoising steps (default: 10)")
    p.add_argument("--seed", type=int, default=None, help="sampler seed (default: 0)")
    p.add_argument("--stochastic", action="store_true", help="use the stochastic sampler")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("degrade", help="synthesize low-light image(s)")
    p.add_argument("--checkpoint", default=None, help="H2L sampling with this checkpoint")
    p.add_argument("--synthetic", action="store_true",
                   help="use the seeded forward model instead of a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--config", default=None, help="JSON config file (for --synthetic ranges)")
    add_config_flags(
        p,
        only={"seed", "gamma_range", "scale_range", "noise_sigma_range",
              "color_cast_strength"},
    )
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("eval", help="PSNR/SSIM over prediction and GT directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="where to write the JSON report")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; eval is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="write reflectance/illumination maps for an image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None, help="output directory (default: next to input)")
    p.add_argument("--config", default=None, help="JSON config file")
    add_config_flags(p, only={"seed", "retinex_sigma", "retinex_eps"})
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ablate", help="train the component-toggle matrix and emit a table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=2000, help="training steps per row")
    p.add_argument("--config", default=None, help="JSON config file")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
