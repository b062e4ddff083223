"""Flat key=value run configuration shared by the CLI and checkpoints.

One plain-text schema covers dataset generation, model wiring and the
training recipe.  Values round-trip through a canonical text form
(sorted keys, one ``key=value`` per line) so configs are diffable and
checkpoints can embed them verbatim.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields, replace

from . import backbone as bb
from .errors import ConfigError
from .graphmod import MultiStageGraphConfig
from .model import ModelConfig
from .patchenc import PatchConfig
from .trainer import TrainConfig

__all__ = ["RunConfig"]


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    # synthetic data
    classes: tuple[str, ...] = ("checkerboard", "stripes", "dots", "blobs")
    per_class: int = 100
    image_size: int = 64
    jitter: float = 1.0
    # split
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    # backbone
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    blocks: int = 1
    # graph layers
    cag_stage: int = -1
    attn_channels: int = 0  # 0 -> ceil(C/2)
    cag_embedded: bool = True
    cag_residual: bool = True
    mag_stage0: int = -2
    mag_stage1: int = -1
    dilation: int = 2
    context_kernel: int = 3
    neighbors: int = 4
    # patch encoding
    patch_sizes: tuple[int, ...] = (3, 5, 7)
    patch_weights: tuple[float, ...] = (0.35, 0.45, 0.2)
    patch_stride: int = 1
    codebook_k: int = 16
    encode_dim: int = 8
    # ablation switches
    enable_cag: bool = True
    enable_mag: bool = True
    enable_pe: bool = True
    # classifier / training
    num_classes: int = 4
    lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 8
    epochs: int = 50
    patience: int = 5
    lr_drop: float = 10.0
    min_improve: float = 1e-4
    seed: int = 0

    @classmethod
    def _field_map(cls):
        return {f.name: f for f in fields(cls)}

    @classmethod
    def parse_value(cls, key: str, raw: str):
        fmap = cls._field_map()
        if key not in fmap:
            hint = difflib.get_close_matches(key, fmap, n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown config key {key!r}{extra}")
        ftype = fmap[key].type
        try:
            if ftype in ("bool", bool):
                return _parse_bool(raw)
            if ftype in ("int", int):
                return int(raw)
            if ftype in ("float", float):
                return float(raw)
            if "str" in str(ftype):
                return _parse_strs(raw)
            if "float" in str(ftype):
                return _parse_floats(raw)
            return _parse_ints(raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            values[key] = cls.parse_value(key, raw.strip())
        return cls(**values)

    def to_text(self) -> str:
        """Canonical form: sorted keys, one per line."""
        fmap = self._field_map()
        return "\n".join(f"{k}={_fmt(getattr(self, k))}" for k in sorted(fmap)) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        parsed = {k: self.parse_value(k, v) for k, v in overrides.items()}
        return replace(self, **parsed)

    # builders ---------------------------------------------------------

    def backbone_config(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(stages=self.stages, channels=self.channels, blocks=self.blocks)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            backbone=self.backbone_config(),
            cag_stage=self.cag_stage,
            attn_channels=self.attn_channels or None,
            cag_embedded=self.cag_embedded,
            cag_residual=self.cag_residual,
            mag=MultiStageGraphConfig(
                stage_pair=(self.mag_stage0, self.mag_stage1),
                dilation=self.dilation,
                kernel=self.context_kernel,
                neighbors=self.neighbors,
            ),
            patches=PatchConfig(
                sizes=self.patch_sizes, weights=self.patch_weights, stride=self.patch_stride
            ),
            codebook_k=self.codebook_k,
            encode_dim=self.encode_dim,
            enable_cag=self.enable_cag,
            enable_mag=self.enable_mag,
            enable_pe=self.enable_pe,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            lr_drop=self.lr_drop,
            min_improve=self.min_improve,
            seed=self.seed,
        )

    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)
