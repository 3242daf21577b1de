"""Flat key=value experiment configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .types import ConfigError, VoxelGridSpec


def _tuple_float(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def _tuple_int(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def _tuple_str(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ValueError(f"expected boolean, got {s!r}")


@dataclass
class Config:
    """Defaults follow the full-scale recipe where one exists; grid and
    channel widths are overridden by the toy configs in practice."""

    classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    range_min: tuple[float, ...] = (0.0, -40.0, -3.0)
    range_max: tuple[float, ...] = (70.4, 40.0, 1.0)
    voxel_size: tuple[float, ...] = (0.05, 0.05, 0.1)

    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    n_res: int = 1
    tower_channels: int = 128
    n_lvl: int = 2
    c2: int = 256
    head_channels: int = 128
    rot_bins: int = 12

    gamma_offset: float = 1.0
    gamma_z: float = 1.0
    gamma_size: float = 1.0
    gamma_rot: float = 1.0
    gamma_corner: float = 1.0

    iou_samples_m: int = 24
    top_k: int = 50
    mu_cls: float = 0.5
    detach_iou: bool = False
    size_prior: tuple[float, ...] = (3.0, 1.6, 1.5)

    seed: int = 0
    epochs: int = 50
    batch_size: int = 2
    lr_max: float = 0.01
    div_factor: float = 10.0
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    weight_decay: float = 0.01
    warmup_frac: float = 0.4
    grad_clip: float = 10.0

    augment: bool = True
    max_paste: int = 8
    workers: int = 1

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def grid_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(self.range_min), tuple(self.range_max), tuple(self.voxel_size))

    def gammas(self) -> tuple[float, float, float, float, float]:
        return (self.gamma_offset, self.gamma_z, self.gamma_size, self.gamma_rot, self.gamma_corner)

    def validate(self) -> "Config":
        if self.num_classes < 1:
            raise ConfigError("classes: need at least one class")
        if self.rot_bins < 2:
            raise ConfigError("rot_bins: need at least 2")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels: expected 4 stage widths")
        if not (0.0 < self.warmup_frac < 1.0):
            raise ConfigError("warmup_frac: must lie in (0, 1)")
        for key in ("range_min", "range_max", "voxel_size", "size_prior"):
            if len(getattr(self, key)) != 3:
                raise ConfigError(f"{key}: expected 3 comma-separated values")
        try:
            self.grid_spec()
        except ValueError as e:
            raise ConfigError(f"voxel grid: {e}") from e
        return self

    @classmethod
    def parse(cls, text: str, path: str = "<config>") -> "Config":
        spec = {f.name: f.type for f in fields(cls) if not f.name.startswith("_")}
        # dataclass stores annotations as strings under `from __future__`
        typemap = {
            "tuple[str, ...]": _tuple_str,
            "tuple[float, ...]": _tuple_float,
            "tuple[int, ...]": _tuple_int,
            "int": int,
            "float": float,
            "bool": _bool,
        }
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in spec:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser = typemap[str(spec[key])]
            try:
                values[key] = parser(val)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
        return cls(**values).validate()

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.parse(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())
