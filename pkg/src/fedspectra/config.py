"""Line-based `key = value` run configuration.

Strict parsing: unknown keys are hard errors (silent hyperparameter typos
ruin experiments). `#` starts a comment. The resolved configuration is
serialized back in the same format and must re-parse to an identical
config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from .datasynth import SynthSpec, default_class_counts, default_style
from .errors import ConfigError
from .federation import FederationConfig
from .nn import LrSchedule
from .spectral import CfaSchedule


@dataclass
class RunConfig:
    profile: str = "full"
    # federation
    num_clients: int = 4
    comm_interval: int = 10
    total_epochs: int = 300
    aggregator: str = "cfa"
    s0: float = 0.26
    s1: float = 0.55
    lambda1: float = 0.6
    lambda2: float = 0.8
    batch_size: int = 20
    lr_initial: float = 3e-3
    lr_halve_every: int = 30
    fedprox_mu: float = 0.0
    fedbn_exclude_bn: bool = False
    cto_enabled: bool = True
    refine_trains_deputy: bool = True
    seed: int = 0
    domain_mode: str = "complex"
    arch: str = "smallcnn"
    augment: bool = True
    save_checkpoints: bool = True
    # synthetic data
    classes: int = 3
    image_channels: int = 1
    image_height: int = 32
    image_width: int = 32
    count_scale: float = 0.1
    noise_level: float = 0.05
    jitter: bool = True
    # io
    dataset_dir: str = ""
    out_dir: str = "run_out"

    def federation_config(self) -> FederationConfig:
        cfg = FederationConfig(
            num_clients=self.num_clients,
            comm_interval=self.comm_interval,
            total_epochs=self.total_epochs,
            aggregator=self.aggregator,
            cfa=CfaSchedule(self.s0, self.s1, self.total_epochs),
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            batch_size=self.batch_size,
            lr=LrSchedule(self.lr_initial, self.lr_halve_every),
            fedprox_mu=self.fedprox_mu,
            fedbn_exclude_bn=self.fedbn_exclude_bn,
            cto_enabled=self.cto_enabled,
            seed=self.seed,
            domain_mode=self.domain_mode,
            arch=self.arch,
            refine_trains_deputy=self.refine_trains_deputy,
            augment=self.augment,
            save_checkpoints=self.save_checkpoints,
        )
        cfg.validate()
        return cfg

    def synth_spec(self) -> SynthSpec:
        brightness, contrast = default_style(self.num_clients)
        return SynthSpec(
            classes=self.classes,
            channels=self.image_channels,
            height=self.image_height,
            width=self.image_width,
            client_class_counts=default_class_counts(
                self.num_clients, self.count_scale
            ),
            brightness=brightness,
            contrast=contrast,
            noise_level=self.noise_level,
            jitter=self.jitter,
            seed=self.seed,
        )

    def validate(self) -> None:
        try:
            self.federation_config()
        except (ConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.count_scale <= 0:
            raise ConfigError("count_scale must be positive")
        if min(self.image_channels, self.image_height, self.image_width) < 1:
            raise ConfigError("image dimensions must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    ftype = _FIELDS[key].type
    raw = raw.strip()
    try:
        if ftype == "bool" or ftype is bool:
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(f"expected true/false, got {raw!r}")
        if ftype == "int" or ftype is int:
            return int(raw)
        if ftype == "float" or ftype is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def apply_setting(cfg: RunConfig, key: str, raw: str, where: str = "override") -> None:
    if key not in _FIELDS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(cfg, key, _convert(key, raw, where))


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`")
        key, raw = stripped.split("=", 1)
        apply_setting(cfg, key.strip(), raw, where=f"{source}:{lineno}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
