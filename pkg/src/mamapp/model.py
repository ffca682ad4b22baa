"""The Mam-App network: conv stem, token flattening, VisionMamba blocks, pooled linear head."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .ssm import VisionMambaBlock
from .tensor import DEFAULT_DTYPE, DimensionError, Tensor, no_grad

REFERENCE_PARAM_COUNT = 51_000
CHECKPOINT_MAGIC = b"MAMAPP01"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class MamAppConfig:
    """Architecture and training hyperparameters. Defaults give the apple (4-class) model."""

    input_size: tuple = (256, 256, 3)
    stem_channels: tuple = (16, 32)
    stem_kernel: int = 3
    stem_strides: tuple = (2, 2)
    stem_padding: int = 1
    num_blocks: int = 5
    d_model: int = 32
    d_inner: int = 32
    d_state: int = 16
    dt_rank: int = 2
    conv1d_kernel: int = 4
    num_classes: int = 4
    label_smoothing: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1000
    seed: int = 0
    augment: bool = True
    normalize_mean: Optional[tuple] = None
    normalize_std: Optional[tuple] = None
    bn_momentum: float = 0.1
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        for name in ("input_size", "stem_channels", "stem_strides", "betas",
                     "normalize_mean", "normalize_std"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                setattr(self, name, tuple(value))

    def validate(self) -> "MamAppConfig":
        problems = []
        if len(self.input_size) != 3 or self.input_size[2] not in (1, 3) or min(self.input_size) < 1:
            problems.append(f"input_size must be (H, W, 3), got {self.input_size}")
        if len(self.stem_channels) != 2 or len(self.stem_strides) != 2:
            problems.append("stem_channels and stem_strides need exactly two entries")
        elif self.d_model != self.stem_channels[1]:
            problems.append(f"d_model ({self.d_model}) must equal stem_channels[1] ({self.stem_channels[1]})")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("num_blocks", "d_model", "d_inner", "d_state", "dt_rank", "conv1d_kernel",
                     "stem_kernel", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            problems.append("label_smoothing must lie in [0, 1)")
        if (self.normalize_mean is None) != (self.normalize_std is None):
            problems.append("normalize_mean and normalize_std must be given together")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def token_grid(self) -> tuple[int, int]:
        """Spatial size of the stem output."""
        h, w = self.input_size[0], self.input_size[1]
        for s in self.stem_strides:
            h = (h + 2 * self.stem_padding - self.stem_kernel) // s + 1
            w = (w + 2 * self.stem_padding - self.stem_kernel) // s + 1
        return h, w

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, data: dict) -> "MamAppConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data).validate()

    def replace(self, **changes) -> "MamAppConfig":
        return dataclasses.replace(self, **changes).validate()


class Stem(Module):
    """Two conv -> batch norm -> GELU stages."""

    def __init__(self, cfg: MamAppConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        c_in = cfg.input_size[2]
        c1, c2 = cfg.stem_channels
        k, p = cfg.stem_kernel, cfg.stem_padding
        self.conv1 = Conv2d(c_in, c1, k, rng, stride=cfg.stem_strides[0], padding=p, dtype=dtype)
        self.bn1 = BatchNorm2d(c1, momentum=cfg.bn_momentum, dtype=dtype)
        self.conv2 = Conv2d(c1, c2, k, rng, stride=cfg.stem_strides[1], padding=p, dtype=dtype)
        self.bn2 = BatchNorm2d(c2, momentum=cfg.bn_momentum, dtype=dtype)

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        x = F.gelu(self.bn1(self.conv1(x)))
        if trace is not None:
            trace.append(("stem1", x.shape))
        x = F.gelu(self.bn2(self.conv2(x)))
        if trace is not None:
            trace.append(("stem2", x.shape))
        return x


class MamApp(Module):
    def __init__(self, cfg: MamAppConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = cfg
        self.stem = Stem(cfg, rng, dtype=dtype)
        self.blocks = [VisionMambaBlock(cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank,
                                        cfg.conv1d_kernel, rng, dtype=dtype)
                       for _ in range(cfg.num_blocks)]
        self.norm = LayerNorm(cfg.d_model, dtype=dtype)
        self.head = Linear(cfg.d_model, cfg.num_classes, rng, dtype=dtype)

    def _check_input(self, images: Tensor) -> None:
        h, w, c = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (c, h, w):
            raise DimensionError(f"expected images [B,{c},{h},{w}], got {images.shape} "
                                 "(inputs are never resized implicitly)")

    def features(self, images: Tensor, trace: Optional[list] = None) -> Tensor:
        """Pooled penultimate representation ``[B, d_model]``."""
        self._check_input(images)
        x = F.flatten_transpose(self.stem(images, trace))
        if trace is not None:
            trace.append(("tokens", x.shape))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if trace is not None:
                trace.append((f"block{i}", x.shape))
        x = self.norm(x)
        if trace is not None:
            trace.append(("norm", x.shape))
        x = F.global_avg_pool(x)
        if trace is not None:
            trace.append(("gap", x.shape))
        return x

    def forward(self, images: Tensor, trace: Optional[list] = None) -> Tensor:
        logits = self.head(self.features(images, trace))
        if trace is not None:
            trace.append(("logits", logits.shape))
        return logits


def build(config: MamAppConfig, seed: Optional[int] = None, dtype=DEFAULT_DTYPE) -> MamApp:
    """Deterministically initialize a model; ``seed`` defaults to ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return MamApp(config, rng, dtype=dtype)


def _as_tensor(images) -> Tensor:
    return images if isinstance(images, Tensor) else Tensor(np.asarray(images))


def forward(model: MamApp, images, mode: str = "eval") -> Tensor:
    """Pre-softmax logits ``[B, K]``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    images = _as_tensor(images)
    if mode == "eval":
        with no_grad():
            return model(images)
    return model(images)


def extract_features(model: MamApp, images) -> np.ndarray:
    """Post-norm, post-pooling features in eval mode."""
    model.eval()
    with no_grad():
        return model.features(_as_tensor(images)).data


def predict_proba(model: MamApp, images) -> np.ndarray:
    logits = forward(model, images, mode="eval")
    return F.softmax(logits, axis=-1).data


def count_params(model: Module) -> tuple[int, "OrderedDict[str, int]"]:
    """Total trainable scalars and a breakdown keyed by owning module."""
    breakdown: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        owner = name.rsplit(".", 1)[0] if "." in name else name
        breakdown[owner] = breakdown.get(owner, 0) + p.size
    return sum(breakdown.values()), breakdown


def summarize_params(breakdown: dict) -> "OrderedDict[str, int]":
    """Collapse a per-module breakdown into stem / block / final-norm / head groups."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, n in breakdown.items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("stem", "blocks") else parts[0]
        out[key] = out.get(key, 0) + n
    return out


# ------------------------------------------------------------------ checkpoint
def save_checkpoint(model: MamApp, config: MamAppConfig, path, extra: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Write parameters, buffers and the inline config.

    Layout (little-endian): magic, u32 version, u64 JSON length + JSON,
    u32 tensor count, then per tensor u32 name length + name, u32 rank,
    u64 dims, raw float32 values. ``extra`` tensors (e.g. optimizer moments)
    are appended after the model tensors.
    """
    header = config.to_dict()
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(model.state_dict().items()) + list((extra or {}).items())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict, "OrderedDict[str, np.ndarray]"]:
    """Parse a checkpoint into (config dict, meta dict, tensors)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a Mam-App checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n_json,) = r.unpack("<Q", "config length")
    try:
        header = json.loads(r.take(n_json, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed config block ({exc})") from exc
    meta = header.pop("meta", {})
    (count,) = r.unpack("<I", "tensor count")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n_name,) = r.unpack("<I", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * n, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after last tensor")
    return header, meta, tensors


def load_checkpoint(path, config: Optional[MamAppConfig] = None) -> tuple[MamApp, MamAppConfig]:
    """Rebuild the model stored at ``path``.

    When ``config`` is given the tensors are loaded into a model built from it
    instead, and any shape disagreement is reported by tensor name.
    """
    header, _, tensors = read_checkpoint(path)
    try:
        stored = MamAppConfig.from_dict(header)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid stored config ({exc})") from exc
    cfg = config if config is not None else stored
    model = build(cfg)
    expected = model.state_dict()
    for name, arr in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for tensor {name}: checkpoint has "
                                  f"{tensors[name].shape}, config expects {arr.shape}")
    model.load_state_dict({k: tensors[k] for k in expected})
    return model, cfg
