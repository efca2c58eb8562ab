"""U-shaped segmentation network built from axis-projected attention stages.

Every resolution level runs three parallel single-axis blocks (one per
anatomical plane) whose outputs are mixed on the 3-simplex by per-level
fusion weights. Encoder levels downsample with a channel-doubling 1x1x1
convolution followed by 2x2x2 average pooling; decoder levels upsample
inside their blocks. A 1x1x1 stem lifts the input channels and a 1x1x1 head
emits raw class logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import (
    AXES,
    AxisFusion,
    Cot3dBlock,
    DecoderAttentionBlock,
    PROJECTION_OPS,
    VARIANTS,
    build_encoder_block,
)
from .modules import Conv3d, Module, ModuleList
from .tensor import ShapeError, Tensor, avg_pool3d


class ConfigError(ValueError):
    """A network configuration violates one of its constraints."""


@dataclass
class NetworkConfig:
    """Architectural source of truth; everything is derived from this."""

    levels: int = 5
    base_channels: int = 32
    in_channels: int = 1
    num_classes: int = 2
    variant: str = "apa"
    projection_op: str = "avg_plus_max"
    fusion_mode: str = "learned"
    seed: int = 0
    # Only the learned-kernel projection needs spatial extents at build time;
    # cubic inputs of this extent are then required by the forward pass.
    input_extent: int | None = None

    def validate(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels % 4:
            raise ConfigError(
                f"base_channels must be divisible by 4, got {self.base_channels}"
            )
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.projection_op not in PROJECTION_OPS:
            raise ConfigError(
                f"projection_op must be one of {PROJECTION_OPS}, got {self.projection_op!r}"
            )
        if self.fusion_mode not in ("learned", "mean"):
            raise ConfigError(f"fusion_mode must be 'learned' or 'mean', got {self.fusion_mode!r}")
        if self.projection_op == "conv":
            if self.input_extent is None:
                raise ConfigError("projection_op 'conv' requires input_extent")
            if self.input_extent % 2 ** (self.levels - 1):
                raise ConfigError(
                    f"input_extent {self.input_extent} not divisible by "
                    f"2^(levels-1) = {2 ** (self.levels - 1)}"
                )


class EncoderStage(Module):
    """Three parallel per-axis blocks plus their simplex fusion."""

    def __init__(self, channels, cfg: NetworkConfig, *, rng, dtype, extent):
        super().__init__()
        blocks = []
        for axis in AXES:
            blocks.append(
                build_encoder_block(
                    cfg.variant, channels, axis, rng=rng, dtype=dtype,
                    projection_op=cfg.projection_op, axis_extent=extent,
                )
            )
        self.blocks = ModuleList(blocks)
        self.fusion = AxisFusion(cfg.fusion_mode == "learned", dtype=dtype)

    def __call__(self, x):
        return self.fusion([blk(x)[0] for blk in self.blocks])


class DecoderStage(Module):
    def __init__(self, channels, cfg: NetworkConfig, *, rng, dtype, extent):
        super().__init__()
        blocks = []
        for axis in AXES:
            if cfg.variant == "cot3d":
                # the pure-3D variant has no two-scale form; reuse it on the
                # upsampled path is out of scope, so decoding stays axis-based
                blocks.append(
                    DecoderAttentionBlock(channels, axis, rng=rng, dtype=dtype,
                                          projection_op="avg_plus_max"))
            else:
                blocks.append(
                    DecoderAttentionBlock(channels, axis, rng=rng, dtype=dtype,
                                          projection_op=cfg.projection_op,
                                          axis_extent=extent))
        self.blocks = ModuleList(blocks)
        self.fusion = AxisFusion(cfg.fusion_mode == "learned", dtype=dtype)

    def __call__(self, x_low, x_high):
        return self.fusion([blk(x_low, x_high)[0] for blk in self.blocks])


class ProjectionAttentionUNet(Module):
    def __init__(self, config: NetworkConfig, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        base = config.base_channels
        levels = config.levels

        self.stem = Conv3d(config.in_channels, base, 1, rng=rng, dtype=dtype)
        enc, down = [], []
        c = base
        extent = config.input_extent
        for i in range(levels):
            enc.append(EncoderStage(c, config, rng=rng, dtype=dtype, extent=extent))
            if i < levels - 1:
                down.append(Conv3d(c, 2 * c, 1, rng=rng, dtype=dtype))
                c *= 2
                extent = extent // 2 if extent is not None else None
        dec = []
        c = base
        extent = config.input_extent
        for i in range(levels - 1):
            dec.append(DecoderStage(c, config, rng=rng, dtype=dtype, extent=extent))
            c *= 2
            extent = extent // 2 if extent is not None else None
        self.encoder = ModuleList(enc)
        self.down = ModuleList(down)
        self.decoder = ModuleList(dec)
        self.head = Conv3d(base, config.num_classes, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, return_stages: bool = False):
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"input must be (N, {cfg.in_channels}, H, W, D), got {x.shape}"
            )
        div = 2 ** (cfg.levels - 1)
        if any(s % div for s in x.shape[2:]):
            raise ShapeError(
                f"spatial extents {x.shape[2:]} must be divisible by {div}"
            )
        h = self.stem(x)
        skips, downsampled = [], []
        for i, stage in enumerate(self.encoder):
            y = stage(h)
            skips.append(y)
            if i < cfg.levels - 1:
                h = avg_pool3d(self.down[i](y))
                downsampled.append(h)
            else:
                h = y
        decoded = []
        d = h
        for i in reversed(range(cfg.levels - 1)):
            d = self.decoder[i](d, skips[i])
            decoded.append(d)
        logits = self.head(d)
        if return_stages:
            return logits, {
                "skips": skips,
                "encoder_downsampled": downsampled,
                "decoder": decoded,
            }
        return logits

    def axis_weight_rows(self):
        """Per-level fusion weights: (path, level, [sagittal, axial, coronal]).

        Encoder levels count from the finest scale; decoder levels count from
        the deepest (the order they execute in).
        """
        rows = []
        for i, stage in enumerate(self.encoder):
            rows.append(("encoder", i + 1, stage.fusion.weights_array()))
        for j, i in enumerate(reversed(range(len(self.decoder)))):
            rows.append(("decoder", j + 1, self.decoder[i].fusion.weights_array()))
        return rows


def build_network(config: NetworkConfig, dtype=np.float32) -> ProjectionAttentionUNet:
    return ProjectionAttentionUNet(config, dtype=dtype)


def param_count(net: ProjectionAttentionUNet) -> int:
    return net.param_count()


# -- checkpoint container ---------------------------------------------------------
#
# One file: a UTF-8 JSON manifest line, then the parameters concatenated as
# little-endian float32 in named enumeration order. The manifest carries the
# config, every tensor's name and shape, and a sha256 of the payload.

WEIGHTS_FORMAT = "apaseg-weights-v1"


def config_to_dict(config: NetworkConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> NetworkConfig:
    return NetworkConfig(**d)


def save_weights(net: ProjectionAttentionUNet, path):
    named = list(net.named_parameters())
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named)
    manifest = {
        "format": WEIGHTS_FORMAT,
        "config": config_to_dict(net.config),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_weights(path):
    """Read a weights file back into (config, {name: float32 array})."""
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: not a {WEIGHTS_FORMAT} file")
    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != manifest["checksum"]:
        raise ValueError(f"{path}: checksum mismatch, file corrupt")
    arrays = {}
    offset = 0
    for spec in manifest["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        raw = blob[offset : offset + 4 * n]
        if len(raw) != 4 * n:
            raise ValueError(f"{path}: truncated payload at tensor {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()
        offset += 4 * n
    config = config_from_dict(manifest["config"])
    return config, arrays


def restore_network(path, dtype=np.float32) -> ProjectionAttentionUNet:
    config, arrays = load_weights(path)
    net = build_network(config, dtype=dtype)
    load_state(net, arrays, dtype)
    return net


def load_state(net: Module, arrays: dict, dtype=np.float32):
    for name, p in net.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing tensor {name}")
        a = arrays[name]
        if tuple(a.shape) != p.shape:
            raise ValueError(f"tensor {name}: shape {a.shape} != expected {p.shape}")
        p.data = a.astype(dtype)
