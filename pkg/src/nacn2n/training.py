"""ADAM training loop for parameter-shared chains.

The learning rate starts at 1e-4 and is halved after every 20 epochs; ADAM
runs with betas (0.9, 0.99) and epsilon 1e-8, batch size 4, 60 epochs. No
gradient clipping, no weight decay. Sample order is reshuffled every epoch
from a stream keyed on (seed, epoch), so a resumed run replays the exact
shuffles of a straight-through run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .imaging import ImageGrid, clip_for_display
from .models import ChainModel, build_chain, BackboneConfig, read_container, write_container
from .noise import rng_from_seed
from .pairs import PairSet

_SHUFFLE_KEY = 0xE90C4

LOSS_KINDS = ("l2", "l1")


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "l2"
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 60
    lr_half_period: int = 20
    seed: int = 0
    checkpoint_every: int = 0
    fresh_noise_per_epoch: bool = False

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"train.loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"train.base_lr must be > 0, got {self.base_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"train.betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ConfigError(f"train.epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.lr_half_period < 1:
            raise ConfigError(f"train.lr_half_period must be >= 1, got {self.lr_half_period}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"train.checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return {
            "loss_kind": self.loss_kind,
            "base_lr": self.base_lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr_half_period": self.lr_half_period,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "fresh_noise_per_epoch": self.fresh_noise_per_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainResult:
    chain: ChainModel
    history: list[dict]
    config: TrainConfig
    checkpoints: list[str] = field(default_factory=list)
    optimizer: torch.optim.Adam | None = None


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise halving: base_lr * 0.5 ** (epoch // half_period)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * 0.5 ** (epoch // cfg.lr_half_period)


def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, ImageGrid):
        return torch.from_numpy(np.ascontiguousarray(value.pixels))
    if isinstance(value, torch.Tensor):
        return value
    return torch.from_numpy(np.ascontiguousarray(value))


def loss(pred, target, kind: str = "l2") -> torch.Tensor:
    if kind not in LOSS_KINDS:
        raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"loss operands differ in shape: {tuple(p.shape)} vs {tuple(t.shape)}")
    diff = p - t
    if kind == "l2":
        return (diff * diff).mean()
    return diff.abs().mean()


def _materialize(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a pair source into (inputs, targets) batch tensors."""
    items = pairs.pairs() if isinstance(pairs, PairSet) else list(pairs)
    if not items:
        raise ConfigError("training requires a non-empty pair set")
    shape = items[0].input.shape
    for p in items:
        if p.input.shape != shape or p.target.shape != shape:
            raise ShapeError(
                f"all training pairs must share one shape; expected {shape}, "
                f"got {p.input.shape}/{p.target.shape} for source '{p.source_id}'"
            )
    xs = np.stack([p.input.pixels for p in items])[:, None, :, :]
    ys = np.stack([p.target.pixels for p in items])[:, None, :, :]
    return torch.from_numpy(xs), torch.from_numpy(ys)


def _build_optimizer(chain: ChainModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        chain.parameters(),
        lr=cfg.base_lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.epsilon,
    )


def _validation_scores(chain, validation) -> dict:
    from .metrics import psnr, ssim

    inputs, references = validation
    ps, ss = [], []
    from .models import apply_chain

    for inp, ref in zip(inputs, references):
        out, _ = apply_chain(chain, inp)
        out = clip_for_display(out)
        ps.append(psnr(out.pixels, ref.pixels))
        ss.append(ssim(out.pixels, ref.pixels))
    return {"val_psnr": float(np.mean(ps)), "val_ssim": float(np.mean(ss))}


def train(
    chain: ChainModel,
    pairs,
    cfg: TrainConfig,
    *,
    log_path=None,
    checkpoint_dir=None,
    validation=None,
    start_epoch: int = 0,
    optimizer: torch.optim.Adam | None = None,
    history: list[dict] | None = None,
) -> TrainResult:
    """Optimize the chain on noisy pairs; returns per-epoch history.

    `start_epoch`, `optimizer`, and `history` let a checkpoint resume run the
    remaining epochs; a fresh call leaves them at the defaults.
    """
    history = list(history) if history else []
    if cfg.epochs == 0 or start_epoch >= cfg.epochs:
        return TrainResult(chain, history, cfg, optimizer=optimizer)

    base_inputs = base_targets = None
    if not (cfg.fresh_noise_per_epoch and isinstance(pairs, PairSet)):
        base_inputs, base_targets = _materialize(pairs)
    elif len(pairs) == 0:
        raise ConfigError("training requires a non-empty pair set")

    if optimizer is None:
        optimizer = _build_optimizer(chain, cfg)

    log_writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a", newline="")
        log_writer = csv.writer(log_file)
        if log_file.tell() == 0:
            log_writer.writerow(["epoch", "loss", "lr", "seconds", "n_batches"])

    checkpoints: list[str] = []
    chain.train()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.monotonic()
            if cfg.fresh_noise_per_epoch and isinstance(pairs, PairSet):
                inputs, targets = _materialize(pairs.with_epoch_salt(epoch))
            else:
                inputs, targets = base_inputs, base_targets
            n = inputs.shape[0]
            order = rng_from_seed(cfg.seed, _SHUFFLE_KEY, epoch).permutation(n)
            lr = lr_schedule(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            total = 0.0
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
                xb = inputs[idx]
                yb = targets[idx]
                optimizer.zero_grad(set_to_none=True)
                batch_loss = loss(chain(xb), yb, cfg.loss_kind)
                value = float(batch_loss.detach())
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, batch {n_batches}"
                    )
                batch_loss.backward()
                optimizer.step()
                total += value * xb.shape[0]
                n_batches += 1

            entry = {
                "epoch": epoch,
                "loss": total / n,
                "lr": lr,
                "seconds": time.monotonic() - t0,
                "n_batches": n_batches,
            }
            is_checkpoint_epoch = (
                cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0
            )
            if validation is not None and (is_checkpoint_epoch or epoch == cfg.epochs - 1):
                entry.update(_validation_scores(chain, validation))
                chain.train()
            history.append(entry)
            if log_writer is not None:
                log_writer.writerow(
                    [entry["epoch"], f"{entry['loss']:.8e}", f"{entry['lr']:.8e}",
                     f"{entry['seconds']:.3f}", entry["n_batches"]]
                )
                log_file.flush()
            if is_checkpoint_epoch and checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                path = Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt"
                checkpoint_save(chain, optimizer, epoch + 1, history, cfg, path)
                checkpoints.append(str(path))
    finally:
        if log_file is not None:
            log_file.close()
    chain.eval()
    return TrainResult(chain, history, cfg, checkpoints, optimizer)


# --- trainer checkpoints ---------------------------------------------------

def checkpoint_save(
    chain: ChainModel,
    optimizer: torch.optim.Adam,
    next_epoch: int,
    history: list[dict],
    cfg: TrainConfig,
    path,
) -> None:
    """Freeze parameters plus ADAM moments so training can resume exactly."""
    if chain.config is None:
        raise CheckpointError("chain has no backbone config; cannot serialize")
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in chain.module.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    steps: dict[str, float] = {}
    named = dict(chain.module.named_parameters())
    for name, param in named.items():
        state = optimizer.state.get(param, {})
        if not state:
            continue
        arrays[f"adam.exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy()
        arrays[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
        step = state["step"]
        steps[name] = float(step.item() if isinstance(step, torch.Tensor) else step)
    manifest = {
        "format": "trainer-checkpoint",
        "version": 1,
        "backbone": chain.config.to_dict(),
        "T": chain.T,
        "init_seed": chain.init_seed,
        "next_epoch": int(next_epoch),
        "adam_steps": steps,
        "train_config": cfg.to_dict(),
        "history": [
            {k: v for k, v in entry.items()} for entry in history
        ],
    }
    write_container(path, manifest, arrays)


def checkpoint_load(path) -> tuple[ChainModel, torch.optim.Adam, int, list[dict], TrainConfig]:
    manifest, arrays = read_container(path)
    if manifest.get("format") != "trainer-checkpoint":
        raise CheckpointError(f"{path}: not a trainer checkpoint")
    if manifest.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    cfg = TrainConfig.from_dict(manifest["train_config"])
    backbone = BackboneConfig.from_dict(manifest["backbone"])
    chain = build_chain(backbone, int(manifest["T"]), int(manifest.get("init_seed", 0)))
    state = {
        name[len("model."):]: torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("model.")
    }
    chain.module.load_state_dict(state)

    optimizer = _build_optimizer(chain, cfg)
    steps = manifest.get("adam_steps", {})
    opt_state = optimizer.state_dict()
    packed = {}
    for index, (name, _) in enumerate(chain.module.named_parameters()):
        avg_key, sq_key = f"adam.exp_avg.{name}", f"adam.exp_avg_sq.{name}"
        if avg_key not in arrays:
            continue
        packed[index] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(arrays[avg_key]),
            "exp_avg_sq": torch.from_numpy(arrays[sq_key]),
        }
    opt_state["state"] = packed
    optimizer.load_state_dict(opt_state)
    return chain, optimizer, int(manifest["next_epoch"]), list(manifest["history"]), cfg


def resume_training(
    path,
    pairs,
    *,
    log_path=None,
    checkpoint_dir=None,
    validation=None,
) -> TrainResult:
    """Continue a checkpointed run through its remaining epochs."""
    chain, optimizer, next_epoch, history, cfg = checkpoint_load(path)
    return train(
        chain,
        pairs,
        cfg,
        log_path=log_path,
        checkpoint_dir=checkpoint_dir,
        validation=validation,
        start_epoch=next_epoch,
        optimizer=optimizer,
        history=history,
    )
