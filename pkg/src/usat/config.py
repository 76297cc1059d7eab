"""Configuration: model/train/adapt dataclasses and flat key=value files.

Config files are plain text, one `key = value` per line, `#` comments.
Keys are the union of the three dataclasses' field names (all unique).
Presets ship under `usat/data/presets/`; `resolve_config` accepts either a
preset name or a file path, plus programmatic overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import DataError

ADAPTER_SCHEMES = ("H-Res", "H-Seq", "X-Res", "X-Seq")
ADAPTER_KINDS = ("conv", "linear")


@dataclass
class ModelConfig:
    """Architecture sizes; defaults are moderate, presets shrink or grow them."""

    sample_rate: int = 22050
    window_length: int = 1024
    frame_shift: int = 256
    fft_size: int = 1024
    mel_bins: int = 80
    mel_fmin: float = 0.0
    latent_dim: int = 192
    posterior_layers: int = 8
    posterior_hidden: int = 192
    memory_entries: int = 64
    decoder_channels: int = 256
    decoder_factors: tuple[int, ...] = (8, 8, 4)
    flow_layers: int = 4
    flow_hidden: int = 192
    spk_dim: int = 192
    spk_channels: int = 192
    enc_layers: int = 4
    enc_heads: int = 2
    enc_hidden: int = 192
    enc_ffn: int = 768
    enc_window: int = 4
    dur_hidden: int = 192
    dur_layers: int = 2
    leakage_hidden: int = 256
    leakage_layers: int = 3

    def validate(self) -> None:
        if self.latent_dim % 2 != 0:
            raise DataError("latent_dim must be even (flow coupling split)")
        prod = 1
        for f in self.decoder_factors:
            prod *= f
        if prod != self.frame_shift:
            raise DataError(
                f"decoder_factors product {prod} must equal frame_shift {self.frame_shift}")
        if self.enc_hidden % self.enc_heads != 0:
            raise DataError("enc_hidden must be divisible by enc_heads")
        if self.window_length > self.fft_size:
            raise DataError("window_length must not exceed fft_size")


@dataclass
class TrainConfig:
    """Pre-training loop hyperparameters."""

    lambda_re: float = 1.0
    lambda_se: float = 8.0
    lambda_d: float = 8.0
    overlap_min: float = 0.2
    overlap_max: float = 0.4
    batch_size: int = 8
    lr: float = 2e-4
    lr_decay: float = 0.9999
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    total_steps: int = 2000
    seed: int = 0
    segment_frames: int = 32
    checkpoint_every: int = 1000
    log_every: int = 50

    def validate(self) -> None:
        if not (0.0 < self.overlap_min <= self.overlap_max < 1.0):
            raise DataError("overlap range must satisfy 0 < min <= max < 1")
        for name in ("lambda_re", "lambda_se", "lambda_d", "lr", "lr_decay",
                     "batch_size"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


@dataclass
class AdaptConfig:
    """Fine-grained adaptation defaults: headline scheme, conv kind, r=8."""

    scheme: str = "H-Res"
    kind: str = "conv"
    r: int = 8
    adapt_steps: int = 1500
    adapt_lr: float = 1e-4
    adapt_seconds: float = 60.0

    def validate(self) -> None:
        if self.scheme not in ADAPTER_SCHEMES:
            raise DataError(f"unknown adapter scheme {self.scheme!r}; choose from {ADAPTER_SCHEMES}")
        if self.kind not in ADAPTER_KINDS:
            raise DataError(f"unknown adapter kind {self.kind!r}; choose from {ADAPTER_KINDS}")
        if self.r < 1:
            raise DataError("r must be a positive integer")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.adapt.validate()

    def to_flat_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in (self.model, self.train, self.adapt):
            for f in fields(section):
                v = getattr(section, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), sort_keys=True)

    @classmethod
    def from_flat_dict(cls, flat: dict[str, Any]) -> "Config":
        cfg = cls()
        owners = _field_owners()
        for key, value in flat.items():
            if key not in owners:
                raise DataError(f"unknown config key {key!r}")
            section_name, f = owners[key]
            section = getattr(cfg, section_name)
            setattr(section, key, _coerce(f, value, key))
        cfg.validate()
        return cfg


def _field_owners() -> dict[str, tuple[str, dataclasses.Field]]:
    owners: dict[str, tuple[str, dataclasses.Field]] = {}
    for section_name, section_cls in (
        ("model", ModelConfig), ("train", TrainConfig), ("adapt", AdaptConfig),
    ):
        for f in fields(section_cls):
            if f.name in owners:
                raise AssertionError(f"duplicate config field name {f.name}")
            owners[f.name] = (section_name, f)
    return owners


def _coerce(f: dataclasses.Field, value: Any, key: str) -> Any:
    if f.type in ("tuple[int, ...]",):
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        return tuple(int(v) for v in str(value).replace(",", " ").split())
    try:
        if f.type == "int":
            return int(str(value))
        if f.type == "float":
            return float(str(value))
        if f.type == "str":
            return str(value)
    except ValueError as exc:
        raise DataError(f"config key {key!r}: cannot parse {value!r}") from exc
    return value


def parse_config_text(text: str) -> dict[str, str]:
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise DataError(f"config line {lineno}: empty key or value")
        flat[key] = value
    return flat


def preset_path(name: str) -> Path:
    res = resources.files("usat").joinpath(f"data/presets/{name}.cfg")
    with resources.as_file(res) as p:
        if not p.exists():
            raise DataError(f"no bundled preset named {name!r}")
        return Path(p)


def load_config(source: str | Path | None, overrides: dict[str, Any] | None = None) -> Config:
    """Build a Config from a preset name or file path plus overrides."""
    flat: dict[str, Any] = {}
    raw_text = ""
    if source is not None:
        p = Path(source)
        if not p.exists():
            p = preset_path(str(source))
        raw_text = p.read_text()
        flat.update(parse_config_text(raw_text))
    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})
    cfg = Config.from_flat_dict(flat)
    cfg._raw_text = raw_text  # type: ignore[attr-defined]  # kept for config-echo logging
    return cfg
