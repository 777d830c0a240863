"""Orchestration: the bidirectional training loop, checkpoints, inference.

Training noises the reference image, runs both conditional paths through the
shared-encoder network, and optimizes the weighted sum of the noise loss,
the multi-scale content loss on one-step clean estimates, and the structural
loss. Inference runs the enhancement path only: few-step deterministic
sampling conditioned on the low-light input, then the reflection-aware
corrector.

All per-step randomness is derived from (seed, step), so training traces are
reproducible and a resumed run continues exactly where it stopped.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import Config
from .correction import ReflectionAwareCorrection
from .dataset import PairedDirDataset, PairedSample
from .diffusion import (
    NoiseSchedule,
    estimate_x0,
    forward_diffuse,
    make_schedule,
    sample,
    to_core,
    to_unit,
)
from .errors import CheckpointError, NumericError
from .losses import (
    FeaturePyramid,
    LossWeights,
    content_loss,
    diffusion_loss,
    flat_norm,
    make_eps_bar,
    ssim,
    total_loss,
)
from .network import PATH_H2L, PATH_L2H, BidirectionalUNet, NetworkConfig
from .seeding import make_generator, mix_seeds

TrainConfig = Config  # the flat config carries all training knobs

_TAG_INIT = 0x1B17
_TAG_STEP = 0x57E9

CHECKPOINT_MAGIC = b"BDCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    config: Config
    schedule: NoiseSchedule
    network: BidirectionalUNet
    racm: ReflectionAwareCorrection
    phi: FeaturePyramid
    optimizer: torch.optim.Adam
    step: int = 0


def network_config(cfg: Config) -> NetworkConfig:
    return NetworkConfig(
        base_channels=cfg.base_channels,
        channel_mults=tuple(cfg.channel_mults),
        afi_levels=tuple(cfg.afi_levels),
        time_embed_dim=cfg.time_embed_dim,
        in_channels=2 * cfg.image_channels,
        out_channels=cfg.image_channels,
        num_res_blocks=cfg.num_res_blocks,
    )


def named_trainables(state: "TrainState") -> list:
    """(name, parameter) pairs the optimizer owns, in stable sorted order.

    Network parameters keep their hierarchical names (encoder.*,
    decoder_l2h.*, ...); corrector parameters get the racm. prefix. Frozen
    components (the feature pyramid, gated-attention blocks under the no-AFI
    ablation) are excluded.
    """
    named = [(k, p) for k, p in state.network.named_parameters() if p.requires_grad]
    if state.config.use_racm:
        named += [(f"racm.{k}", p) for k, p in state.racm.named_parameters()]
    return sorted(named, key=lambda kv: kv[0])


def init_state(config: Config) -> TrainState:
    """Build a fresh training state; module init is seeded by config.seed."""
    torch.manual_seed(mix_seeds(config.seed, _TAG_INIT))
    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    network = BidirectionalUNet(network_config(config))
    if not config.use_afi:
        for p in network.afi.parameters():
            p.requires_grad_(False)  # gate stays 0: blocks remain the identity
    racm = ReflectionAwareCorrection(
        channels=config.image_channels,
        width=config.racm_width,
        smoothing_sigma=config.retinex_sigma,
        eps=config.retinex_eps,
    )
    phi = FeaturePyramid(
        in_channels=config.image_channels,
        base=config.feature_base,
        seed=config.feature_seed,
    )
    state = TrainState(
        config=config, schedule=schedule, network=network, racm=racm, phi=phi,
        optimizer=None, step=0,
    )
    state.optimizer = torch.optim.Adam(
        [p for _, p in named_trainables(state)], lr=config.learning_rate
    )
    return state


def current_lr(cfg: Config, step: int) -> float:
    """Learning rate at a step: the initial rate, optionally cosine-decayed
    to a tenth of itself over the step budget."""
    if cfg.lr_decay == "none":
        return cfg.learning_rate
    frac = min(step / max(cfg.steps - 1, 1), 1.0)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def train_step(batch: PairedSample, state: TrainState) -> dict:
    """One optimizer update on the full objective; returns the loss scalars."""
    cfg = state.config
    gen = make_generator(cfg.seed, state.step, _TAG_STEP)
    x_l01, x_h01 = batch.x_l, batch.x_h
    x_l, x_h = to_core(x_l01), to_core(x_h01)
    b = x_h.shape[0]

    t = torch.randint(0, state.schedule.T, (b,), generator=gen)
    noise = torch.randn(x_h.shape, generator=gen)
    diffused = forward_diffuse(x_h, t, state.schedule, noise=noise)

    eps_l2h = state.network.predict_noise(diffused.x_t, x_l, t, PATH_L2H)
    if cfg.use_h2l:
        eps_h2l = state.network.predict_noise(diffused.x_t, x_h, t, PATH_H2L)
        eps_bar = make_eps_bar(x_h, x_l, t, state.schedule, cfg.eps_bar_mode)
        l_diff = diffusion_loss(
            diffused.eps, eps_l2h, eps_h2l, eps_bar, squared=cfg.squared_norms
        )
    else:
        l_diff = flat_norm(diffused.eps - eps_l2h, squared=cfg.squared_norms)

    i_e = to_unit(estimate_x0(diffused.x_t, eps_l2h, t, state.schedule, clamp=True))
    if cfg.use_racm:
        i_e = state.racm(i_e)
    if cfg.use_h2l:
        i_d = to_unit(estimate_x0(diffused.x_t, eps_h2l, t, state.schedule, clamp=True))
        tau = tuple(cfg.tau)
    else:
        i_d, tau = None, (cfg.tau[0], 0.0)
    l_content = content_loss(
        i_e, i_d, x_h01, x_l01, state.phi, tau=tau, squared=cfg.squared_norms
    )
    l_structural = 1.0 - ssim(i_e, x_h01)

    try:
        total = total_loss(l_diff, l_content, l_structural, LossWeights(tuple(cfg.omega), tau))
    except NumericError as e:
        raise NumericError(f"training aborted at step {state.step}: {e}") from e

    lr = current_lr(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for _, p in named_trainables(state)], cfg.grad_clip
        )
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "loss/diff": float(l_diff.detach()),
        "loss/content": float(l_content.detach()),
        "loss/structural": float(l_structural.detach()),
        "loss/total": float(total.detach()),
        "lr": lr,
    }


def _predictor(state: TrainState, path: str):
    def eps_model(x_t, condition, t):
        return state.network.predict_noise(x_t, condition, t, path)

    return eps_model


def enhance(
    x_l: torch.Tensor,
    state: TrainState,
    steps: Optional[int] = None,
    seed: int = 0,
) -> torch.Tensor:
    """Enhance a [0, 1] low-light image (batch): L2H sampling, then RACM.

    The degradation decoder is never invoked here.
    """
    cfg = state.config
    steps = cfg.sample_steps if steps is None else steps
    squeeze = x_l.ndim == 3
    cond = to_core(x_l.unsqueeze(0) if squeeze else x_l)
    with torch.no_grad():
        out = sample(
            _predictor(state, PATH_L2H), cond, state.schedule, steps=steps, seed=seed,
            deterministic=cfg.deterministic_sampler,
        )
        out01 = to_unit(out).clamp(0.0, 1.0)
        if cfg.use_racm:
            out01 = state.racm(out01)
    return out01.squeeze(0) if squeeze else out01


def degrade_demo(
    x_h: torch.Tensor,
    state: TrainState,
    steps: Optional[int] = None,
    seed: int = 0,
) -> torch.Tensor:
    """Synthesize a low-light version of a [0, 1] image via the H2L path."""
    cfg = state.config
    steps = cfg.sample_steps if steps is None else steps
    squeeze = x_h.ndim == 3
    cond = to_core(x_h.unsqueeze(0) if squeeze else x_h)
    with torch.no_grad():
        out = sample(
            _predictor(state, PATH_H2L), cond, state.schedule, steps=steps, seed=seed,
            deterministic=cfg.deterministic_sampler,
        )
        out01 = to_unit(out).clamp(0.0, 1.0)
    return out01.squeeze(0) if squeeze else out01


def trainset_psnr(state: TrainState, dataset: PairedDirDataset, seed: int = 0) -> float:
    """Mean PSNR of enhance() over every pair in the dataset (in memory)."""
    from .metrics import psnr

    vals = []
    for i in range(len(dataset)):
        x_l, x_h = dataset.load_pair(i)
        out = enhance(x_l, state, seed=seed)
        vals.append(psnr(out, x_h))
    return sum(vals) / len(vals)


def train(
    config: Config,
    data_root,
    out_dir=None,
    state: Optional[TrainState] = None,
    stop_at_psnr: Optional[float] = None,
    eval_every: int = 0,
    quiet: bool = False,
) -> TrainState:
    """Run the training loop up to config.steps.

    Writes line-oriented JSON loss records and periodic checkpoints when
    out_dir is given. `stop_at_psnr` + `eval_every` enable early stopping on
    train-set PSNR (used by the desk-scale overfit runs).
    """
    dataset = PairedDirDataset(data_root)
    if state is None:
        state = init_state(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "train_log.jsonl", "a" if state.step > 0 else "w")
    try:
        while state.step < config.steps:
            batch = dataset.batch_at(
                state.step, config.batch_size, config.patch_size,
                augment=config.augment, seed=config.seed,
            )
            scalars = train_step(batch, state)
            if scalars["step"] % config.log_every == 0 or scalars["step"] == 1:
                if log_f is not None:
                    log_f.write(json.dumps(scalars, sort_keys=True) + "\n")
                    log_f.flush()
                if not quiet:
                    print(
                        f"step {scalars['step']:6d}  total {scalars['loss/total']:.4f}  "
                        f"diff {scalars['loss/diff']:.4f}  content {scalars['loss/content']:.4f}  "
                        f"structural {scalars['loss/structural']:.4f}"
                    )
            if out_dir is not None and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / "checkpoint.ckpt")
            if eval_every and stop_at_psnr is not None and state.step % eval_every == 0:
                score = trainset_psnr(state, dataset, seed=config.seed)
                if not quiet:
                    print(f"step {state.step:6d}  train-set psnr {score:.2f} dB")
                if score >= stop_at_psnr:
                    break
    finally:
        if log_f is not None:
            log_f.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint.ckpt")
    return state


# --- checkpoint serialization ---------------------------------------------
#
# Layout: 4-byte magic, u64-le manifest length, UTF-8 JSON manifest, then the
# raw float32-le row-major tensor blobs back to back. The manifest records
# the config snapshot, the step counter, the RNG derivation scheme, and one
# (name, shape, offset, nbytes) entry per tensor, sorted by name.


def _named_tensors(state: TrainState) -> dict:
    tensors = dict(state.network.named_parameters())
    tensors.update({f"racm.{k}": p for k, p in state.racm.named_parameters()})
    tensors.update({f"phi.{k}": p for k, p in state.phi.named_parameters()})
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    trainables = named_trainables(state)
    tensors = {name: p.detach() for name, p in _named_tensors(state).items()}
    step_counts = {}
    for name, p in trainables:
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            tensors[f"optim.{name}.exp_avg"] = opt_state["exp_avg"]
            tensors[f"optim.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"]
            step_counts[name] = int(opt_state["step"])

    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        # asarray (not ascontiguousarray): must keep 0-d shapes as 0-d
        arr = np.asarray(tensors[name].detach().numpy(), dtype="<f4", order="C")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "global_step": state.step,
        "rng": {"scheme": "per-step", "seed": state.config.seed, "next_step": state.step},
        "optimizer": {"kind": "adam", "step_counts": step_counts},
        "tensors": entries,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header at byte offset {len(raw)}")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + mlen > len(raw):
        raise CheckpointError(f"{path}: manifest extends past end of file at byte offset 12")
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest at byte offset 12: {e}") from e
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    base = 12 + mlen
    stored = {}
    for entry in manifest["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(
                f"{path}: tensor {entry['name']} extends past end of file at byte offset {lo}"
            )
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(entry["shape"])
        stored[entry["name"]] = torch.from_numpy(arr.copy())

    config = Config.from_dict(manifest["config"])
    state = init_state(config)
    with torch.no_grad():
        for name, p in _named_tensors(state).items():
            if name not in stored:
                raise CheckpointError(f"{path}: missing tensor {name}")
            p.copy_(stored[name])
    step_counts = manifest["optimizer"]["step_counts"]
    for name, p in named_trainables(state):
        if name in step_counts:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(step_counts[name])),
                "exp_avg": stored[f"optim.{name}.exp_avg"].clone(),
                "exp_avg_sq": stored[f"optim.{name}.exp_avg_sq"].clone(),
            }
    state.step = manifest["global_step"]
    return state
