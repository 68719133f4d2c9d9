"""Run configuration: dotted ``section.key = value`` text files.

Lists are comma separated, booleans are ``true``/``false``. Unknown keys are
an error so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .kgc import default_widths
from .model import ModelConfig


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    occlusion_level: float = 0.5
    test_occlusion_level: float = 0.5
    hand_seed: int = 20230714


@dataclass
class KgcConfig:
    variant: str = "gcn"
    depth: int = 4
    widths: list = field(default_factory=list)   # empty -> default ramp for the depth
    K: int = 2
    normalize: bool = True
    noise_sigma: float = 2.0
    mlp_hidden: list = field(default_factory=lambda: [256, 512])


@dataclass
class CatConfig:
    variant: str = "cat"
    blocks: int = 2
    heads: int = 4
    d_model: int = 256


@dataclass
class NetConfig:
    backbone_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    fused_channels: int = 256
    hourglass_width: int = 256
    heatmap_channels: int = 256
    regressor_hidden: int = 512


@dataclass
class OptimConfig:
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 70
    decay_factor: float = 0.7
    decay_every: int = 10
    max_steps: int = 0          # 0 -> no cap
    checkpoint_every: int = 0   # epochs; 0 -> only at the end


@dataclass
class LossConfig:
    heatmaps: float = 1.0
    theta: float = 1.0
    beta: float = 1.0
    joints: float = 1.0
    verts: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)
    kgc: KgcConfig = field(default_factory=KgcConfig)
    cat: CatConfig = field(default_factory=CatConfig)
    model: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone_widths=tuple(self.model.backbone_widths),
            kgc_variant=self.kgc.variant, kgc_depth=self.kgc.depth,
            kgc_widths=self._kgc_widths(), kgc_K=self.kgc.K,
            kgc_normalize=self.kgc.normalize, mlp_hidden=tuple(self.kgc.mlp_hidden),
            cat_variant=self.cat.variant, cat_blocks=self.cat.blocks, cat_heads=self.cat.heads,
            cat_d_model=self.cat.d_model, fused_channels=self.model.fused_channels,
            hourglass_width=self.model.hourglass_width, heatmap_channels=self.model.heatmap_channels,
            regressor_hidden=self.model.regressor_hidden, hand_seed=self.data.hand_seed,
        )

    def _kgc_widths(self):
        w = list(self.kgc.widths)
        if not w:
            return None
        if len(w) != self.kgc.depth:
            return default_widths(self.kgc.depth, first=w[0])
        return w

    def loss_weights(self) -> dict:
        return dataclasses.asdict(self.loss)

    # -- flat key/value view -----------------------------------------------------
    def items(self) -> dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for g in dataclasses.fields(val):
                    out[f"{f.name}.{g.name}"] = getattr(val, g.name)
            else:
                out[f.name] = val
        return out

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        target = self
        if name:
            if section not in {f.name for f in dataclasses.fields(self)}:
                raise KeyError(f"unknown config section {section!r}")
            target = getattr(self, section)
        else:
            name = section
        if name not in {f.name for f in dataclasses.fields(target)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(value, current, key))

    def update(self, pairs: dict) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def copy(self) -> "RunConfig":
        return parse_config(dump_config(self))

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if not 1 <= self.kgc.depth <= 5:
            raise ValueError("kgc.depth must lie in 1..5")
        if self.kgc.variant not in ("gcn", "mlp", "none"):
            raise ValueError(f"kgc.variant {self.kgc.variant!r} not in gcn|mlp|none")
        if self.cat.variant not in ("cat", "plain_transformer", "none"):
            raise ValueError(f"cat.variant {self.cat.variant!r} not in cat|plain_transformer|none")
        if not 1 <= self.cat.blocks <= 3:
            raise ValueError("cat.blocks must lie in 1..3")
        if self.kgc.noise_sigma < 0:
            raise ValueError("kgc.noise_sigma must be >= 0")
        if self.optimizer.batch < 1 or self.optimizer.epochs < 1:
            raise ValueError("optimizer.batch and optimizer.epochs must be positive")


def _coerce(value, current, key):
    if not isinstance(value, str):
        return value
    value = value.strip()
    if isinstance(current, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, list):
        return [int(v) for v in value.split(",") if v.strip()]
    return value


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.items().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def desk_profile() -> RunConfig:
    """Width-reduced profile sized for a single CPU core."""
    return RunConfig().update({
        "data.n_train": 2000, "data.n_test": 500,
        "kgc.widths": [16, 64, 256, 1024], "kgc.mlp_hidden": [64, 128],
        "cat.d_model": 32, "cat.heads": 2,
        "model.backbone_widths": [8, 16, 32, 32], "model.fused_channels": 32,
        "model.hourglass_width": 32, "model.heatmap_channels": 32, "model.regressor_hidden": 128,
        "optimizer.epochs": 10, "optimizer.batch": 4, "optimizer.lr": 1e-3,
    })


PROFILES = {"full": RunConfig, "desk": desk_profile}
