"""Experiment configuration: one INI file, one section per module plus ``global``."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .encoders import BasePretrainConfig, EncoderConfig
from .losses import LossConfig
from .pareto import ParetoConfig
from .trainer import TrainConfig


class ConfigInvalid(ValueError):
    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


@dataclass
class GlobalSection:
    seed: int = 0
    out: str = ""


@dataclass
class RvegenSection:
    count: int = 436
    image_size: int = 64
    noise: bool = True
    stratified: bool = False


@dataclass
class EncodersSection:
    d: int = 128
    patch_size: int = 8
    vision_dim: int = 64
    vision_layers: int = 4
    vision_heads: int = 4
    tab_dim: int = 64
    tab_layers: int = 2
    tab_heads: int = 4
    mlp_ratio: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    freeze_base: bool = True
    aux_count: int = 1200
    base_epochs: int = 16
    base_lr: float = 1e-3
    base_batch: int = 64


@dataclass
class DownstreamSection:
    ks: str = "1,5,10"
    lr: float = 5e-4
    epochs: int = 100
    patience: int = 20
    batch_size: int = 32
    split_seed: int = 1
    sort_by: str = "elongation"


@dataclass
class DiffgenSection:
    K: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-4
    prior_epochs: int = 200
    decoder_epochs: int = 200
    batch_size: int = 32
    size: int = 32
    prior_hidden: int = 256
    decoder_hidden: int = 512
    n_samples: int = 16


SECTIONS: dict[str, type] = {
    "global": GlobalSection,
    "rvegen": RvegenSection,
    "encoders": EncodersSection,
    "losses": LossConfig,
    "pareto": ParetoConfig,
    "trainer": TrainConfig,
    "downstream": DownstreamSection,
    "diffgen": DiffgenSection,
}


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=lambda: {name: cls() for name, cls in SECTIONS.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def seed(self) -> int:
        return self.sections["global"].seed

    def encoder_config(self) -> EncoderConfig:
        e = self.sections["encoders"]
        keys = {f.name for f in dataclasses.fields(EncoderConfig)}
        kw = {k: v for k, v in dataclasses.asdict(e).items() if k in keys}
        return EncoderConfig(image_size=self.sections["rvegen"].image_size, **kw)

    def base_config(self) -> BasePretrainConfig:
        e = self.sections["encoders"]
        return BasePretrainConfig(epochs=e.base_epochs, lr=e.base_lr, batch_size=e.base_batch, seed=self.seed)

    def ks(self) -> list[int]:
        return [int(k) for k in str(self.sections["downstream"].ks).split(",") if k.strip()]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name, sec in self.sections.items():
            cp[name] = {k: "none" if v is None else str(v) for k, v in dataclasses.asdict(sec).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin is typing.Union or (args and type(None) in typing.get_args(hint)):
        if raw.strip().lower() in ("", "none"):
            return None
        hint = args[0]
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigInvalid(f"{key}: not a boolean: {raw!r}", [key])
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r} as {hint.__name__}", [key]) from None
    return raw.strip()


def load_config(path=None, text: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI file (or text); unknown sections or keys raise ``ConfigInvalid`` naming them all.

    ``overrides`` maps "section.key" to a raw string value.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    if text is not None:
        cp.read_string(text)
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        raw.setdefault(sec, {})[key] = str(value)

    bad = [f"[{s}]" for s in raw if s not in SECTIONS]
    for s, items in raw.items():
        if s in SECTIONS:
            names = {f.name for f in dataclasses.fields(SECTIONS[s])}
            bad += [f"{s}.{k}" for k in items if k not in names]
    if bad:
        raise ConfigInvalid(f"unknown config keys: {', '.join(bad)}", bad)

    sections = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kw = {k: _convert(v, hints[k], f"{name}.{k}") for k, v in raw.get(name, {}).items()}
        try:
            sections[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"[{name}] {exc}", [f"{name}.{k}" for k in kw]) from None
    return ExperimentConfig(sections)
