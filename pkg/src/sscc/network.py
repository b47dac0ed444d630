"""Twin network: convolutional backbone plus softmax projection head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .losses import LossConfig, loss_terms

CHECKPOINT_MAGIC = b"SSCKPT1"


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite activations or loss."""


@dataclass
class NetworkConfig:
    """Backbone and head shape.

    ``conv_blocks`` lists ``(out_channels, kernel_size, stride)``; with
    ``residual`` each entry becomes a two-convolution residual block,
    otherwise a single convolution followed by ReLU. ``padding`` selects
    "same" zero padding; without it every convolution shrinks the patch.
    """

    input_channels: int = 8
    input_side: int = 13
    conv_blocks: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(32, 3, 1), (64, 3, 1), (128, 3, 1)]
    )
    residual: bool = True
    padding: bool = True
    latent_dim: int = 256
    head_hidden: int = 512
    cluster_count: int = 4

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in block) for block in self.conv_blocks]

    def validate(self):
        if self.cluster_count < 2:
            raise ConfigError(f"cluster_count must be >= 2, got {self.cluster_count}")
        if self.latent_dim < self.cluster_count:
            raise ConfigError("latent_dim must be at least cluster_count")
        if self.input_channels < 1 or self.head_hidden < 1:
            raise ConfigError("input_channels and head_hidden must be positive")
        if self.input_side < 1 or self.input_side % 2 == 0:
            raise ConfigError("input_side must be a positive odd integer")
        if not self.conv_blocks:
            raise ConfigError("at least one conv block is required")
        for out_ch, k, s in self.conv_blocks:
            if out_ch < 1 or k < 1 or s < 1 or k % 2 == 0:
                raise ConfigError(f"invalid conv block {(out_ch, k, s)}: need positive sizes, odd kernel")
            if self.residual and not self.padding and s != 1:
                raise ConfigError("residual blocks without padding support stride 1 only")
        side = output_side(self, self.input_side)
        if side < 1:
            raise ConfigError(f"conv stack reduces a {self.input_side}-pixel patch below 1 pixel")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def output_side(config: NetworkConfig, side: int) -> int:
    """Spatial extent left after the conv stack for a ``side``-pixel input."""
    for _, k, s in config.conv_blocks:
        pad = k // 2 if config.padding else 0
        side = (side + 2 * pad - k) // s + 1
        if config.residual:
            side = side + 2 * pad - k + 1
        if side < 1:
            return side
    return side


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, pad):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=pad)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel, 1, padding=pad)
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride)
        # valid convolutions shrink the main path; crop the skip path to match
        self.trim = 2 * (kernel // 2) - 2 * pad

    def forward(self, x):
        out = self.conv2(torch.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        if self.trim:
            t = self.trim
            skip = skip[:, :, t:skip.shape[2] - t, t:skip.shape[3] - t]
        return torch.relu(out + skip)


class Network(nn.Module):
    """Backbone ``f`` (conv stack, global average pool, linear) and head ``g``."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        layers = []
        in_ch = config.input_channels
        for out_ch, k, s in config.conv_blocks:
            pad = k // 2 if config.padding else 0
            if config.residual:
                layers.append(ResidualBlock(in_ch, out_ch, k, s, pad))
            else:
                layers += [nn.Conv2d(in_ch, out_ch, k, s, padding=pad), nn.ReLU()]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.embed = nn.Linear(in_ch, config.latent_dim)
        self.head = nn.Sequential(
            nn.Linear(config.latent_dim, config.head_hidden),
            nn.ReLU(),
            nn.Linear(config.head_hidden, config.cluster_count),
        )

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        """Latent representations for an ``(M, channels, side, side)`` batch."""
        return self.embed(self.features(x).mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor):
        """Return ``(latent, logits)``."""
        latent = self.backbone(x)
        return latent, self.head(latent)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def init_parameters(net: Network, seed: int) -> None:
    """Kaiming-normal (fan-in) weights and zero biases, drawn in declaration order."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in net.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                nn.init.kaiming_normal_(param, mode="fan_in", nonlinearity="relu", generator=gen)


def build_network(config: NetworkConfig, seed: int) -> Network:
    net = Network(config)
    init_parameters(net, seed)
    return net


def to_tensor(batch, dtype=None) -> torch.Tensor:
    """Convert a list of patches or an ``(M, side, side, channels)`` array to NCHW."""
    if isinstance(batch, torch.Tensor):
        return batch
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("empty batch")
        batch = np.stack([p.values for p in batch])
    array = np.asarray(batch)
    if array.ndim != 4 or array.shape[0] == 0:
        raise ValueError(f"expected a non-empty (M, side, side, channels) batch, got {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2))).to(dtype or torch.float32)


def _check_input(net: Network, x: torch.Tensor):
    cfg = net.config
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"batch has {x.shape[1]} channels, network expects {cfg.input_channels}")
    if x.shape[2] != x.shape[3] or x.shape[2] % 2 == 0:
        raise ValueError(f"patches must be square with odd side, got {x.shape[2]}x{x.shape[3]}")
    if output_side(cfg, x.shape[2]) < 1:
        raise ValueError(f"patch side {x.shape[2]} too small for the conv stack")


def label_forward(net: Network, x: torch.Tensor):
    """Differentiable ``(latent, softmax labels)`` for an NCHW tensor."""
    _check_input(net, x)
    latent, logits = net(x.to(next(net.parameters()).dtype))
    if not torch.isfinite(logits).all():
        raise DivergenceError("non-finite activations in forward pass")
    return latent, softmax(logits)


def forward(net: Network, batch):
    """Latent and label representations as numpy arrays (no gradient)."""
    with torch.no_grad():
        latent, labels = label_forward(net, to_tensor(batch))
    return latent.numpy(), labels.numpy()


def forward_with_gradients(net: Network, batch_a, batch_b, loss_config: LossConfig):
    """Total loss on a view pair and its gradient for every named parameter."""
    net.zero_grad(set_to_none=True)
    dtype = next(net.parameters()).dtype
    _, ya = label_forward(net, to_tensor(batch_a, dtype))
    _, yb = label_forward(net, to_tensor(batch_b, dtype))
    loss, _, _ = loss_terms(ya, yb, loss_config)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }
    return loss.item(), grads


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    """Write magic, a length-prefixed JSON header, then float32 parameters."""
    header = json.dumps({"network": net.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    for _, param in net.named_parameters():
        chunks.append(param.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: NetworkConfig | None = None):
    """Return ``(network, extra)``; ``expected`` must match the stored config if given."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset:offset + size])
    offset += size
    config = NetworkConfig.from_dict(header["network"])
    if expected is not None and expected.to_dict() != config.to_dict():
        raise ConfigError(f"{path}: checkpoint config {config} does not match {expected}")
    net = Network(config)
    with torch.no_grad():
        for name, param in net.named_parameters():
            n = param.numel()
            chunk = raw[offset:offset + 4 * n]
            if len(chunk) != 4 * n:
                raise ConfigError(f"{path}: truncated at parameter {name}")
            param.copy_(torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(param.shape).copy()))
            offset += 4 * n
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes")
    return net, header["extra"]
