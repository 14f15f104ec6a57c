"""Run configuration shared by the pipeline, training loop and command line."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

from .kernels import KernelDims, Scheme


class ConfigError(ValueError):
    """A configuration value violates a precondition."""


def _default_scales():
    return [1 / math.sqrt(2), 1.0, math.sqrt(2)]


@dataclass
class RunConfig:
    scheme: str = "psi"
    kernel_6d: list = field(default_factory=lambda: [5, 5, 3])
    kernel_4d: list = field(default_factory=lambda: [5, 5])
    engine: str = "dense"
    S: int = 3
    scale_factors: list = field(default_factory=_default_scales)
    rho: int = 4
    H: int = 15
    W: int = 15
    H_up: int = 30
    W_up: int = 30
    sigma_g: float = 5.0
    tau: float = 2.5
    sigma_rhm: float = 1.0
    seed: int = 0
    levels: int = 2
    init_spread: float = 0.01
    init_center_boost: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_projection: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        try:
            Scheme(self.scheme)
        except ValueError:
            raise ConfigError(f"unknown scheme {self.scheme!r}") from None
        try:
            k6 = KernelDims.parse(self.kernel_6d)
            k4 = KernelDims.parse(self.kernel_4d)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if k6.s is None or k4.s is not None:
            raise ConfigError("kernel_6d needs (h, w, s) and kernel_4d needs (h, w)")
        if self.engine not in ("dense", "cp"):
            raise ConfigError(f"engine must be 'dense' or 'cp', got {self.engine!r}")
        if self.engine == "cp" and not Scheme(self.scheme).center_pivot:
            raise ConfigError(f"engine 'cp' needs a cp_* scheme, got {self.scheme!r}")
        if self.S < 1 or len(self.scale_factors) != self.S:
            raise ConfigError(f"need S >= 1 scale factors, got S={self.S}, factors={self.scale_factors}")
        if any(f <= 0 for f in self.scale_factors):
            raise ConfigError("scale factors must be positive")
        for name in ("rho", "H", "W", "H_up", "W_up"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sigma_g <= 0 or self.tau <= 0 or self.sigma_rhm <= 0:
            raise ConfigError("sigma_g, tau and sigma_rhm must be positive")
        if self.levels not in (1, 2):
            raise ConfigError(f"levels must be 1 or 2, got {self.levels}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    @property
    def dims_6d(self):
        return KernelDims.parse(self.kernel_6d)

    @property
    def dims_4d(self):
        return KernelDims.parse(self.kernel_4d)

    @property
    def base(self):
        return (self.H, self.W)

    @property
    def upsampled(self):
        return (self.H_up, self.W_up)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from None
        if "CHM_SEED" in os.environ:
            try:
                cfg.seed = int(os.environ["CHM_SEED"])
            except ValueError:
                raise ConfigError(f"CHM_SEED must be an integer, got {os.environ['CHM_SEED']!r}") from None
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        return dataclasses.asdict(self)
