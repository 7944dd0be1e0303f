"""Configurable micro U-Nets for both stages.

An encoder of ``levels`` stages (two conv+norm+relu each, pooled between
stages), a symmetric decoder with skip concatenation and corner-aligned
linear upsampling, and a 1x1(x1) sigmoid head.  Rank 2 builds the slice-wise
localization net (batch norm), rank 3 the patch-wise segmentation net (layer
norm).  Desk-scale channel defaults train on a CPU in minutes; the
full-resolution reference widths are kept as constants for completeness but
nothing here loads pretrained weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamSet, RunningStats, Tensor

__all__ = ["UNetConfig", "Model", "build_unet", "save_checkpoint",
           "load_checkpoint", "CheckpointError", "default_2d_config",
           "default_3d_config"]

# full-resolution reference widths (decoder stages / encoder levels); the
# desk-scale defaults below are what actually runs here
FULL_SCALE_2D_DECODER_CHANNELS = (320, 256, 128, 64, 32)
FULL_SCALE_3D_LEVELS = 4
FULL_SCALE_3D_STEM_FILTERS = 16

_MAGIC = b"LSCK0001"


@dataclass(frozen=True)
class UNetConfig:
    """Topology of one U-Net: rank, depth, widths, norm kind and head."""

    rank: int
    in_channels: int
    levels: int
    channels: tuple[int, ...]
    norm: str = ""            # defaults to batch for rank 2, layer for rank 3
    upsample: str = "linear"
    head: str = "sigmoid"

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.levels or self.levels < 1:
            raise ValueError(
                f"channels {self.channels} must list one width per level ({self.levels})")
        if any(c < 1 for c in self.channels):
            raise ValueError("all channel widths must be positive")
        if not self.norm:
            object.__setattr__(self, "norm", "batch" if self.rank == 2 else "layer")
        if self.norm not in ("batch", "layer"):
            raise ValueError(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        if self.upsample != "linear":
            raise ValueError("only linear upsampling is supported")
        if self.head != "sigmoid":
            raise ValueError("only a sigmoid head is supported")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "in_channels": self.in_channels,
                "levels": self.levels, "channels": list(self.channels),
                "norm": self.norm, "upsample": self.upsample, "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(rank=d["rank"], in_channels=d["in_channels"], levels=d["levels"],
                   channels=tuple(d["channels"]), norm=d["norm"],
                   upsample=d["upsample"], head=d["head"])


def default_2d_config(in_channels: int = 1) -> UNetConfig:
    return UNetConfig(rank=2, in_channels=in_channels, levels=3, channels=(8, 16, 32))


def default_3d_config(in_channels: int = 2) -> UNetConfig:
    return UNetConfig(rank=3, in_channels=in_channels, levels=4, channels=(8, 16, 32, 32))


class Model:
    """A U-Net's parameters plus its mutable training state.

    Mutable pieces (gradients, batch-norm running statistics) make a model
    exclusively owned while training; a model switched to eval mode is
    side-effect free and safe to share.
    """

    def __init__(self, config: UNetConfig, params: ParamSet,
                 norm_state: dict[str, RunningStats]):
        self.config = config
        self.params = params
        self.norm_state = norm_state
        self.mode = "train"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    # -- building blocks -------------------------------------------------

    def _conv_block(self, x: Tensor, prefix: str) -> Tensor:
        for j in (1, 2):
            x = T.conv(x, self.params[f"{prefix}.conv{j}.w"],
                       self.params[f"{prefix}.conv{j}.b"])
            x = T.normalize(x, self.config.norm,
                            self.params[f"{prefix}.norm{j}.gain"],
                            self.params[f"{prefix}.norm{j}.bias"],
                            running=self.norm_state.get(f"{prefix}.norm{j}"),
                            training=self.mode == "train")
            x = T.relu(x)
        return x

    def forward(self, batch) -> Tensor:
        """Run the net; output has one channel and values strictly in (0, 1)."""
        x = T.astensor(batch)
        cfg = self.config
        if x.ndim != cfg.rank + 2:
            raise T.ShapeError(
                f"expected rank-{cfg.rank + 2} batch (batch, channel, spatial...), "
                f"got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise T.ShapeError(
                f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        div = cfg.divisor
        bad = [n for n in x.shape[2:] if n % div != 0]
        if bad:
            raise T.ShapeError(
                f"spatial extents {x.shape[2:]} must be divisible by {div} "
                f"(2^(levels-1) with levels={cfg.levels})")

        skips = []
        for i in range(1, cfg.levels + 1):
            x = self._conv_block(x, f"enc{i}")
            if i < cfg.levels:
                skips.append(x)
                x = T.pool_max(x, 2)
        for i in range(cfg.levels - 1, 0, -1):
            x = T.upsample_linear(x, 2)
            x = T.concat([x, skips[i - 1]], axis=1)
            x = self._conv_block(x, f"dec{i}")
        x = T.conv(x, self.params["head.w"], self.params["head.b"])
        return T.sigmoid(x)

    def __call__(self, batch) -> Tensor:
        return self.forward(batch)


def _he_uniform(rng, shape, fan_in, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float32) -> Model:
    """Initialize a model deterministically from ``seed`` (He-uniform convs,
    unit gains, zero biases)."""
    rng = np.random.default_rng([0x11E7, int(seed)])
    params = ParamSet()
    norm_state: dict[str, RunningStats] = {}
    kernel = (3,) * cfg.rank

    def add_block(prefix: str, c_in: int, c_out: int) -> None:
        for j in (1, 2):
            fan_in = c_in * int(np.prod(kernel))
            params.add(f"{prefix}.conv{j}.w", Tensor(
                _he_uniform(rng, (c_out, c_in) + kernel, fan_in, dtype), track=True))
            params.add(f"{prefix}.conv{j}.b",
                       Tensor(np.zeros(c_out, dtype=dtype), track=True))
            params.add(f"{prefix}.norm{j}.gain",
                       Tensor(np.ones(c_out, dtype=dtype), track=True))
            params.add(f"{prefix}.norm{j}.bias",
                       Tensor(np.zeros(c_out, dtype=dtype), track=True))
            if cfg.norm == "batch":
                norm_state[f"{prefix}.norm{j}"] = RunningStats.identity(c_out)
            c_in = c_out

    c_prev = cfg.in_channels
    for i in range(1, cfg.levels + 1):
        add_block(f"enc{i}", c_prev, cfg.channels[i - 1])
        c_prev = cfg.channels[i - 1]
    for i in range(cfg.levels - 1, 0, -1):
        add_block(f"dec{i}", c_prev + cfg.channels[i - 1], cfg.channels[i - 1])
        c_prev = cfg.channels[i - 1]
    head_kernel = (1,) * cfg.rank
    params.add("head.w", Tensor(
        _he_uniform(rng, (1, c_prev) + head_kernel, c_prev, dtype), track=True))
    params.add("head.b", Tensor(np.zeros(1, dtype=dtype), track=True))
    return Model(cfg, params, norm_state)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    """Checkpoint file malformed or inconsistent with the requested config."""


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    data = arr.astype("<f4", copy=False)
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_blob(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()
    return name, arr


def save_checkpoint(model: Model, path) -> None:
    """Portable little-endian binary: magic, config echo, named float32 blobs."""
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params:
            _write_blob(fh, name, p.data)
        fh.write(struct.pack("<I", 2 * len(model.norm_state)))
        for name in sorted(model.norm_state):
            _write_blob(fh, f"{name}.running_mean", model.norm_state[name].mean)
            _write_blob(fh, f"{name}.running_var", model.norm_state[name].var)


def load_checkpoint(path, expected: UNetConfig | None = None) -> Model:
    """Rebuild a model from disk; rejects a config mismatch with ``expected``."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = UNetConfig.from_dict(json.loads(fh.read(cfg_len).decode("utf-8")))
        if expected is not None and cfg != expected:
            raise CheckpointError(
                f"{path}: checkpoint config {cfg.to_dict()} does not match "
                f"expected {expected.to_dict()}")
        model = build_unet(cfg, seed=0)
        (n_params,) = struct.unpack("<I", fh.read(4))
        loaded = set()
        for _ in range(n_params):
            name, arr = _read_blob(fh)
            if name not in model.params:
                raise CheckpointError(f"{path}: unexpected parameter {name!r}")
            if model.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, "
                    f"expected {model.params[name].data.shape}")
            model.params[name].data = arr
            loaded.add(name)
        missing = set(model.params.names()) - loaded
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
        (n_stats,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_stats):
            name, arr = _read_blob(fh)
            base, _, kind = name.rpartition(".running_")
            if base not in model.norm_state or kind not in ("mean", "var"):
                raise CheckpointError(f"{path}: unexpected statistics blob {name!r}")
            setattr(model.norm_state[base], kind, arr)
    return model.eval()
