"""Run configuration stored as plain ``key=value`` text."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .backbone import POOL, BackboneConfig
from .balancer import AugmentationPolicy, BalancingSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # network
    input_side: int = 128
    blocks: tuple = (16, POOL, 32, POOL, 64, POOL, 64, POOL, 128, POOL)
    head_mode: str = "mil_max"
    # loss
    alpha: float = 0.7
    # batch balancing
    w0: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    wf: tuple = (0.5, 2.0, 2.0, 3.0, 3.0)
    r: float = 0.99
    f: int = 300
    rounding: str = "stochastic"
    # augmentation
    flips: bool = True
    max_angle: float = 25.0
    max_brightness: float = 0.15
    contrast_min: float = 0.85
    contrast_max: float = 1.15
    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # schedule
    epochs: int = 60
    batch_size: int = 30
    steps_per_epoch: int = 0      # 0: training images // batch size
    val_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    # analysis
    explain_threshold: float = 0.3
    u_threshold_start: float = 0.15
    u_thresholds: int = 50
    eval_batch: int = 64

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        try:
            self.backbone()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(input_side=self.input_side, blocks=self.blocks, head_mode=self.head_mode)

    def schedule(self) -> BalancingSchedule:
        return BalancingSchedule(self.w0, self.wf, self.r, self.f)

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.flips, self.max_angle, self.max_brightness,
                                  (self.contrast_min, self.contrast_max))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for fl in fields(self):
            v = getattr(self, fl.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{fl.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(f"# config_digest={self.digest()}\n")
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        known = {fl.name: fl for fl in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(raw, getattr(defaults, key), key)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), path)


def _parse(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected true/false, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if key == "blocks":
            return tuple(POOL if s == POOL else int(s) for s in items)
        return tuple(float(s) for s in items)
    return raw
