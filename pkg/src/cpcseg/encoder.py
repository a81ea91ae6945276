"""Trainable feature encoders, momentum SGD and checkpoint files.

The toy encoder is a stack of 3x3 conv blocks with zero "same" padding; the
last ``log2(downsample)`` blocks use stride 2, so the output grid of an
``H x W`` image is ``ceil(H/s) x ceil(W/s)``.  Any other ``nn.Module`` can be
plugged in through :class:`BackboneAdapter`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError, OptimizerError

CHECKPOINT_FORMAT = "cpcseg-checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "relu": nn.ReLU,
    "softplus": nn.Softplus,
}


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (32, 64, 64)
    downsample: int = 4
    activation: str = "silu"
    final_activation: bool = True
    init_gain: float = math.sqrt(2.0)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.downsample not in (2, 4, 8):
            raise ConfigError(f"downsample must be 2, 4 or 8, got {self.downsample}")
        n_strided = int(math.log2(self.downsample))
        if len(self.widths) < n_strided:
            raise ConfigError(f"{len(self.widths)} blocks cannot downsample by {self.downsample}")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.widths[-1] < 8:
            raise ConfigError(f"feature dim must be >= 8, got {self.widths[-1]}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def strides(self) -> tuple[int, ...]:
        n_strided = int(math.log2(self.downsample))
        return (1,) * (len(self.widths) - n_strided) + (2,) * n_strided

    def init_std(self, fan_in: int) -> float:
        return self.init_gain / math.sqrt(fan_in)


class ToyEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        # nn.Conv2d's default init draws from the global RNG; keep it untouched
        with torch.random.fork_rng(devices=[]):
            self._build(config, seed)

    def _build(self, config, seed):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.stride = config.downsample
        self.feature_dim = config.feature_dim
        layers = []
        c_in = config.in_channels
        last = len(config.widths) - 1
        for i, (width, stride) in enumerate(zip(config.widths, config.strides)):
            layers.append(nn.Conv2d(c_in, width, 3, stride=stride, padding=1))
            if i < last or config.final_activation:
                layers.append(_ACTIVATIONS[config.activation]())
            c_in = width
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class BackboneAdapter(nn.Module):
    """Wraps an external ``(B,C,H,W) -> (B,D,h,w)`` module as an encoder."""

    def __init__(self, module: nn.Module, stride: int, feature_dim: int):
        super().__init__()
        self.module = module
        self.stride = int(stride)
        self.feature_dim = int(feature_dim)

    def forward(self, x):
        return self.module(x)


def init_toy_encoder(config: EncoderConfig | None = None, seed: int = 0,
                     dtype=torch.float32) -> ToyEncoder:
    """Build a toy encoder with weights ~ N(0, (gain / sqrt(fan_in))^2), zero biases.

    Initialization draws from a private generator, so the global torch RNG is
    left untouched.
    """
    config = config or EncoderConfig()
    enc = ToyEncoder(config, seed)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in enc.body:
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                w = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                module.weight.copy_(w * config.init_std(fan_in))
                module.bias.zero_()
    return enc.to(dtype)


def encoder_dtype(encoder: nn.Module) -> torch.dtype:
    # parameter-free backbones (fixed feature maps) run in float32
    p = next(encoder.parameters(), None)
    return torch.float32 if p is None else p.dtype


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """H x W x C array in [0, 1] -> 1 x C x H x W tensor."""
    t = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if t.ndim == 2:
        t = t[..., None]
    if t.ndim != 3:
        raise InvalidInputError(f"image must be H x W x C, got shape {tuple(t.shape)}")
    return t.to(dtype).permute(2, 0, 1).unsqueeze(0)


def check_finite_parameters(encoder: nn.Module):
    for name, p in encoder.named_parameters():
        if not torch.isfinite(p).all():
            raise InvalidInputError(f"parameter {name!r} has non-finite values")


def encode(encoder: nn.Module, image) -> torch.Tensor:
    """Feature map of one image, shaped ``(ceil(H/s), ceil(W/s), D)``.

    Differentiable w.r.t. the encoder parameters when grad mode is on.
    """
    x = image_to_tensor(image, encoder_dtype(encoder))
    if not torch.isfinite(x).all():
        raise InvalidInputError("image has non-finite values")
    check_finite_parameters(encoder)
    c = getattr(getattr(encoder, "config", None), "in_channels", None)
    if c is not None and x.shape[1] != c:
        raise InvalidInputError(f"encoder expects {c} channels, image has {x.shape[1]}")
    out = encoder(x)
    return out[0].permute(1, 2, 0)


def feature_shape(encoder: nn.Module, height: int, width: int) -> tuple[int, int]:
    s = encoder.stride
    return -(-height // s), -(-width // s)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


def init_optimizer(encoder: nn.Module, lr: float, momentum: float = 0.9) -> OptimizerState:
    buffers = {name: torch.zeros_like(p) for name, p in encoder.named_parameters()}
    return OptimizerState(lr=lr, momentum=momentum, buffers=buffers)


def sgd_step(encoder: nn.Module, gradients: dict[str, torch.Tensor],
             state: OptimizerState) -> tuple[nn.Module, OptimizerState]:
    """Classical momentum: ``buf = momentum * buf + grad; param -= lr * buf``.

    Parameters are updated in place; all gradients are validated before any
    parameter moves.
    """
    params = dict(encoder.named_parameters())
    for name, p in params.items():
        g = gradients.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise OptimizerError(f"gradient shape {tuple(g.shape)} != parameter shape "
                                 f"{tuple(p.shape)} for {name!r}", name)
        if not torch.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}", name)
    with torch.no_grad():
        for name, p in params.items():
            g = gradients.get(name)
            if g is None:
                continue
            buf = state.buffers.get(name)
            if buf is None:
                buf = torch.zeros_like(p)
            buf = state.momentum * buf + g.to(p.dtype)
            state.buffers[name] = buf
            p.sub_(state.lr * buf)
    return encoder, state


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(encoder: nn.Module, path, extra: dict | None = None):
    """Write a self-describing ``.npz`` container.

    ``__meta__`` holds a JSON record with the format tag and version, the
    architecture config, the seed and one ``(name, shape, dtype)`` entry per
    parameter; each parameter is stored as a row-major array under its name.
    """
    if not isinstance(encoder, ToyEncoder):
        raise ConfigError("checkpoints are only supported for the toy encoder")
    arrays = {}
    entries = []
    for name, t in encoder.state_dict().items():
        a = np.ascontiguousarray(t.detach().cpu().numpy())
        arrays[name] = a
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoder.config),
        "seed": encoder.seed,
        "parameters": entries,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ToyEncoder:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        config = EncoderConfig(**meta["config"])
        state = {}
        for entry in meta["parameters"]:
            a = data[entry["name"]]
            if list(a.shape) != entry["shape"] or a.dtype.str != entry["dtype"]:
                raise ConfigError(f"{path}: parameter {entry['name']} does not match its header")
            state[entry["name"]] = torch.from_numpy(a.copy())
    dtype = next(iter(state.values())).dtype
    enc = ToyEncoder(config, meta["seed"]).to(dtype)
    enc.load_state_dict(state)
    return enc


def parameter_digest(encoder: nn.Module) -> str:
    """SHA-256 over all parameter bytes, for mutation checks."""
    h = hashlib.sha256()
    for name, t in encoder.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
