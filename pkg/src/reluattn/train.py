"""Training loop: AdamW with decoupled weight decay, linear warmup into a
cosine schedule, per-epoch evaluation, checkpointing, and a JSON run record.

Everything is deterministic given the config and seed; repeating a run
reproduces the loss curve bit for bit. A NaN loss aborts immediately (at
desk scale an instability is a bug signal, not noise).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .data import Dataset, batches, normalize, num_batches, subset
from .errors import ConfigError, NumericalError, UsageError
from .tensor import Array
from .vit import (
    ViTConfig,
    ViTParams,
    from_flat_dict,
    loss_and_grad,
    named_arrays,
    save_checkpoint,
    to_flat_dict,
    vit_forward,
    vit_init,
)


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1


def decay_exempt(name: str) -> bool:
    """Weight decay skips layernorm gains and the position embeddings."""
    return "gain" in name or name == "pos_embed"


def adamw_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: dict[str, tuple[Array, Array]],
    hyper: AdamHyper,
    step: int,
) -> tuple[dict[str, Array], dict[str, tuple[Array, Array]]]:
    """One bias-corrected AdamW update. Pure: returns new params and state.

    Moments and the update arithmetic are float64; parameters are stored back
    as float32. step counts from 1.
    """
    if step < 1:
        raise ConfigError(f"optimizer step must be >= 1, got {step}")
    new_params: dict[str, Array] = {}
    new_state: dict[str, tuple[Array, Array]] = {}
    bc1 = 1.0 - hyper.beta1**step
    bc2 = 1.0 - hyper.beta2**step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        if name in state:
            m, v = state[name]
        else:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        p64 = p.astype(np.float64)
        if not decay_exempt(name):
            update = update + hyper.weight_decay * p64
        new_params[name] = (p64 - hyper.lr * update).astype(np.float32)
        new_state[name] = (m, v)
    return new_params, new_state


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup 0 -> base over warmup_steps, then cosine decay to 0."""
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainConfig:
    vit: ViTConfig
    dataset: str  # "mnist" or "cifar10"
    subset_size: int
    epochs: int
    batch_size: int
    base_lr: float = 1e-3
    warmup_steps: Optional[int] = None  # None -> 5% of total steps
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r} (want 'mnist' or 'cifar10')")
        for name in ("subset_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("base_lr", "weight_decay", "eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def total_steps(self) -> int:
        return self.epochs * num_batches(self.subset_size, self.batch_size)

    def resolved_warmup(self) -> int:
        total = self.total_steps()
        warmup = self.warmup_steps
        if warmup is None:
            warmup = math.ceil(0.05 * total)
        if total > 0 and warmup >= total:
            raise ConfigError(f"warmup_steps {warmup} must be < total steps {total}")
        return warmup

    def to_dict(self) -> dict:
        return {
            "vit": self.vit.to_dict(),
            "dataset": self.dataset,
            "subset_size": self.subset_size,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["vit"] = ViTConfig.from_dict(d["vit"])
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    eval_accuracy: float
    wall_seconds: float


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list[EpochMetrics]
    final_accuracy: float
    core_seconds: float  # process CPU time, the desk-scale "core hours"
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "epochs": [vars(e) for e in self.epochs],
            "final_accuracy": self.final_accuracy,
            "core_seconds": self.core_seconds,
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=d["config"],
            seed=d["seed"],
            epochs=[EpochMetrics(**e) for e in d["epochs"]],
            final_accuracy=d["final_accuracy"],
            core_seconds=d["core_seconds"],
            wall_seconds=d["wall_seconds"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def load_split(dataset: str, data_dir, split: str) -> Dataset:
    """Locate and load one split under the dataset root."""
    data_dir = Path(data_dir)
    if dataset == "mnist":
        stem = "train" if split == "train" else "t10k"
        base = data_dir / "mnist"
        pair = []
        for kind in (f"{stem}-images-idx3-ubyte", f"{stem}-labels-idx1-ubyte"):
            plain, gz = base / kind, base / (kind + ".gz")
            if plain.exists():
                pair.append(plain)
            elif gz.exists():
                pair.append(gz)
            else:
                raise FileNotFoundError(f"missing MNIST file {plain} (or {gz.name})")
        return data_mod.load_idx(pair[0], pair[1], name="mnist", split=split)
    if dataset == "cifar10":
        return data_mod.load_cifar10(data_dir / "cifar-10-batches-bin", split)
    raise ConfigError(f"unknown dataset {dataset!r}")


def evaluate(params: ViTParams, ds: Dataset, cfg: TrainConfig) -> float:
    """Argmax-match fraction over the full split, batched, order-independent."""
    correct = 0
    for start in range(0, len(ds), cfg.batch_size):
        imgs = normalize(ds.images[start : start + cfg.batch_size])
        logits = vit_forward(params, imgs, cfg.vit)
        correct += int((logits.argmax(axis=1) == ds.labels[start : start + cfg.batch_size]).sum())
    return correct / len(ds)


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def train(cfg: TrainConfig, data_dir, out_dir=None) -> RunRecord:
    """Run the configured training job; optionally write record/checkpoint/CSV.

    With out_dir set, writes runrecord.json, checkpoint.bin, and steps.csv
    (columns step, loss, lr) into it.
    """
    t_wall = time.perf_counter()
    t_cpu = time.process_time()

    train_ds = subset(load_split(cfg.dataset, data_dir, "train"), cfg.subset_size, cfg.seed)
    eval_ds = load_split(cfg.dataset, data_dir, "test")

    params = to_flat_dict(vit_init(cfg.vit, cfg.seed))
    state: dict = {}
    total = cfg.total_steps()
    warmup = cfg.resolved_warmup() if cfg.epochs > 0 else 0

    out_path = Path(out_dir) if out_dir is not None else None
    csv_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out_path / "steps.csv", "w")
        csv_fh.write("step,loss,lr\n")

    epoch_records: list[EpochMetrics] = []
    final_accuracy = None
    try:
        global_step = 0
        for epoch in range(cfg.epochs):
            t_epoch = time.perf_counter()
            loss_sum, n_steps = 0.0, 0
            for imgs, labels in batches(train_ds, cfg.batch_size, _epoch_seed(cfg.seed, epoch)):
                global_step += 1
                lr = lr_at(global_step, cfg.base_lr, warmup, total)
                loss, grads = loss_and_grad(from_flat_dict(cfg.vit, params), imgs, labels, cfg.vit)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at step {global_step}; aborting")
                hyper = AdamHyper(lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
                params, state = adamw_step(params, to_flat_dict(grads), state, hyper, global_step)
                loss_sum += loss
                n_steps += 1
                if csv_fh is not None:
                    csv_fh.write(f"{global_step},{loss!r},{lr!r}\n")
            accuracy = evaluate(from_flat_dict(cfg.vit, params), eval_ds, cfg)
            epoch_records.append(
                EpochMetrics(
                    epoch=epoch,
                    train_loss=loss_sum / n_steps,
                    eval_accuracy=accuracy,
                    wall_seconds=time.perf_counter() - t_epoch,
                )
            )
            final_accuracy = accuracy
    finally:
        if csv_fh is not None:
            csv_fh.close()

    if final_accuracy is None:  # epochs == 0: record the initialization state
        final_accuracy = evaluate(from_flat_dict(cfg.vit, params), eval_ds, cfg)

    record = RunRecord(
        config=cfg.to_dict(),
        seed=cfg.seed,
        epochs=epoch_records,
        final_accuracy=final_accuracy,
        core_seconds=time.process_time() - t_cpu,
        wall_seconds=time.perf_counter() - t_wall,
    )
    if out_path is not None:
        save_checkpoint(
            out_path / "checkpoint.bin",
            from_flat_dict(cfg.vit, params),
            cfg.vit,
            cfg.seed,
            cfg.total_steps(),
        )
        record.save(out_path / "runrecord.json")
    return record
