"""SGD training with warmup + cosine annealing, and resumable checkpoints.

Every step samples a foreground-oversampled patch batch, applies random
flips, and minimizes Dice + cross entropy with momentum SGD; weight decay is
added to the gradient (classical L2), so a zero learning rate leaves the
parameters untouched. A checkpoint stores the parameters, the momentum
buffers, the data-stream RNG state and the epoch, which makes resumption
bit-compatible with an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PatchSpec, random_flip, sample_batch
from .losses import ce_loss, dice_loss, one_hot, softmax_probs
from .network import (
    NetworkConfig,
    ProjectionAttentionUNet,
    build_network,
    config_from_dict,
    load_state,
)
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the message carries the step diagnostics."""


@dataclass
class TrainConfig:
    """Desk-scale defaults; the full-scale protocol uses 500 epochs with a
    50-epoch warmup at the same optimizer settings."""

    epochs: int = 200
    warmup_epochs: int = 10
    batch_size: int = 2
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    steps_per_epoch: int | None = None
    seed: int = 0
    checkpoint_every: int = 50
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(patch_shape=(32, 32, 32)))
    net: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}/{self.epochs}"
            )
        if self.lr0 <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")
        self.net.validate()


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "patch" in d:
        d["patch"] = PatchSpec(**d["patch"])
    if "net" in d:
        d["net"] = config_from_dict(d["net"])
    return TrainConfig(**d)


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    """Linear ramp to lr0 over the warmup, then half-cosine decay to zero."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * epoch / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / span
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


class SGD:
    """Momentum SGD; weight decay enters through the gradient."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self, lr: float):
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


@dataclass
class TrainResult:
    net: ProjectionAttentionUNet
    log: list
    checkpoint_path: str | None
    axis_weight_rows: list


# -- checkpoint container ----------------------------------------------------------

CHECKPOINT_FORMAT = "apaseg-checkpoint-v1"


def save_checkpoint(path, net, opt: SGD, cfg: TrainConfig, epoch: int, rng, log):
    named = list(net.named_parameters())
    blob_p = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named)
    blob_b = b"".join(
        np.ascontiguousarray(opt.buffers[n], dtype="<f4").tobytes() for n, _ in named
    )
    blob = blob_p + blob_b
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "train_config": train_config_to_dict(cfg),
        "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "log": log,
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if "sha256:" + hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ValueError(f"{path}: checksum mismatch, file corrupt")
    params, buffers = {}, {}
    offset = 0
    for target in (params, buffers):
        for spec in manifest["tensors"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = blob[offset : offset + 4 * n]
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated at tensor {spec['name']}")
            target[spec["name"]] = (
                np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()
            )
            offset += 4 * n
    return manifest, params, buffers


# -- the loop ---------------------------------------------------------------------


def train(cfg: TrainConfig, dataset, out_dir=None, resume_from=None) -> TrainResult:
    """Run the full schedule over a dataset of VolumeRecords."""
    cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    num_classes = cfg.net.num_classes
    steps = cfg.steps_per_epoch or math.ceil(len(dataset) / cfg.batch_size)

    net = build_network(cfg.net)
    opt = SGD(net.named_parameters(), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log: list = []
    start_epoch = 0

    if resume_from is not None:
        manifest, params, buffers = load_checkpoint(resume_from)
        load_state(net, params)
        for name, _ in opt.named:
            opt.buffers[name] = buffers[name].astype(np.float32)
        rng.bit_generator.state = manifest["rng_state"]
        start_epoch = manifest["epoch"]
        log = list(manifest["log"])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    ckpt_path = None

    for epoch in range(start_epoch, cfg.epochs):
        losses = []
        lr = 0.0
        for step in range(steps):
            lr = cosine_lr(epoch + (step + 1) / steps, cfg)
            batch = sample_batch(dataset, cfg.patch, cfg.batch_size, rng)
            pairs = [random_flip(im, lb, rng) for im, lb in batch]
            images = np.stack([im for im, _ in pairs])[:, None].astype(np.float32)
            labels = np.stack([lb for _, lb in pairs])
            target = one_hot(labels, num_classes)

            probs = softmax_probs(net(Tensor(images)))
            dice = dice_loss(probs, target)
            ce = ce_loss(probs, target)
            loss = dice + ce
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"lr={lr:.6g} dice={dice.item():.6g} ce={ce.item():.6g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(value)
        log.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr})

        if out_dir is not None and (
            (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs
        ):
            ckpt_path = os.path.join(out_dir, f"checkpoint_{epoch + 1:05d}.bin")
            save_checkpoint(ckpt_path, net, opt, cfg, epoch + 1, rng, log)

    rows = net.axis_weight_rows()
    if out_dir is not None:
        _write_logs(out_dir, log, rows)
    return TrainResult(net=net, log=log, checkpoint_path=ckpt_path, axis_weight_rows=rows)


def axis_weight_table(rows) -> str:
    """Per-level fusion weights in a level x (sagittal, axial, coronal) table."""
    lines = [f"{'level':<12s} {'sagittal':>9s} {'axial':>9s} {'coronal':>9s}"]
    for path, level, w in rows:
        lines.append(f"{path}-{level:<5d} {w[0]:>9.4f} {w[1]:>9.4f} {w[2]:>9.4f}")
    return "\n".join(lines)


def _write_logs(out_dir, log, rows):
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
        for entry in log:
            f.write(json.dumps(entry) + "\n")
    payload = [
        {"path": path, "level": level,
         "sagittal": float(w[0]), "axial": float(w[1]), "coronal": float(w[2])}
        for path, level, w in rows
    ]
    with open(os.path.join(out_dir, "axis_weights.json"), "w") as f:
        json.dump({"rows": payload}, f, indent=2)
    with open(os.path.join(out_dir, "axis_weights.txt"), "w") as f:
        f.write(axis_weight_table(rows) + "\n")
