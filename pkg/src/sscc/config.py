"""Flat ``key = value`` run configuration with dotted section prefixes.

Keys are ``seed``, ``data.<field>``, ``pool.<field>``, ``net.<field>``,
``train.<field>`` and ``loss.<field>``, mirroring the module dataclasses.
Sequences are comma separated; conv blocks are written ``32:3:1,64:3:1``.
Later sources win: defaults, then the config file, then command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationPool
from .losses import LossConfig
from .network import NetworkConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    """Preprocessing: PCA components (0 keeps all bands) and patch side."""

    pca_components: int = 8
    patch_side: int = 13

    def __post_init__(self):
        if self.pca_components < 0:
            raise ValueError("pca_components must be nonnegative")
        if self.patch_side < 1 or self.patch_side % 2 == 0:
            raise ValueError("patch_side must be a positive odd integer")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    pool: AugmentationPool = field(default_factory=AugmentationPool)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def sections(self) -> dict:
        return {"data": self.data, "pool": self.pool, "net": self.net, "train": self.train, "loss": self.loss}


# fields derived from the data or owned by another section
_SKIP = {("train", "loss"), ("train", "seed"), ("net", "input_channels"), ("net", "input_side")}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ",".join(":".join(str(v) for v in block) for block in value)
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(text: str, current):
    """Parse ``text`` into the type of ``current`` (the field's present value)."""
    text = text.strip()
    if isinstance(current, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (list, tuple)):
        items = [t for t in text.split(",") if t.strip()]
        if current and isinstance(current[0], (list, tuple)):
            return [tuple(int(v) for v in item.split(":")) for item in items]
        kind = type(current[0]) if current else float
        return tuple(kind(item) for item in items)
    return text


def to_flat(config: RunConfig) -> dict[str, str]:
    flat = {"seed": str(config.seed)}
    for section, obj in config.sections().items():
        for f in dataclasses.fields(obj):
            if (section, f.name) not in _SKIP:
                flat[f"{section}.{f.name}"] = format_value(getattr(obj, f.name))
    return flat


def dump_config(config: RunConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in to_flat(config).items())


def parse_lines(text: str) -> dict[str, str]:
    pairs = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def apply_pairs(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a new validated config with ``pairs`` applied."""
    values = {name: dataclasses.asdict(obj) if name != "pool" else obj.to_dict()
              for name, obj in config.sections().items()}
    values["train"].pop("loss")
    seed = config.seed
    known = to_flat(config)
    for key, text in pairs.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        if key == "seed":
            seed = int(text)
            continue
        section, name = key.split(".", 1)
        values[section][name] = parse_value(text, values[section][name])
    loss = LossConfig(**values["loss"])
    net = NetworkConfig(**values["net"])
    result = RunConfig(
        seed=seed,
        data=DataConfig(**values["data"]),
        pool=AugmentationPool(**values["pool"]),
        net=net,
        train=TrainConfig(**{**values["train"], "loss": loss, "seed": seed}),
    )
    return result


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return apply_pairs(base or RunConfig(), parse_lines(Path(path).read_text()))
