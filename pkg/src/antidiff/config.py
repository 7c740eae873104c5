"""Run configuration as sectioned key = value text (INI), plus the dict echo used in manifests."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .core.model import ModelConfig
from .core.train import PretrainConfig
from .metrics import TrialConfig
from .pipeline import ProtectionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EditConfig:
    t_edit_frac: float = 0.6
    n_steps: int = 20
    target_shape: str = "circle"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    protect: ProtectionConfig = field(default_factory=ProtectionConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)
    edit: EditConfig = field(default_factory=EditConfig)

    def pretrain_config(self) -> PretrainConfig:
        return replace(self.pretrain, model=self.model)

    def to_dict(self) -> dict:
        d = {
            "model": dataclasses.asdict(self.model),
            "pretrain": {k: v for k, v in dataclasses.asdict(self.pretrain).items() if k != "model"},
            "protect": _flat_protect(self.protect),
            "prompt": dataclasses.asdict(self.protect.prompt),
            "budget": dataclasses.asdict(self.protect.budget),
            "trial": dataclasses.asdict(self.trial),
            "edit": dataclasses.asdict(self.edit),
        }
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return apply_sections(cls(), d, typed=True)


def _flat_protect(p: ProtectionConfig) -> dict:
    return {k: v for k, v in dataclasses.asdict(p).items() if k not in ("prompt", "budget")}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _convert(raw: Any, default: Any, key: str, typed: bool):
    if typed and not isinstance(raw, str):
        if isinstance(default, tuple) or (default is None and isinstance(raw, list)):
            return tuple(raw) if raw is not None else None
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or default is None:
            if text.lower() in ("", "none"):
                return None
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _update(obj, values: dict, section: str, typed: bool):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known or key in ("model", "prompt", "budget"):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        changes[key] = _convert(raw, getattr(obj, key), f"{section}.{key}", typed)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def apply_sections(cfg: RunConfig, sections: dict[str, dict], typed: bool = False) -> RunConfig:
    protect = cfg.protect
    for name, values in sections.items():
        if name == "model":
            cfg = replace(cfg, model=_update(cfg.model, values, name, typed))
        elif name == "pretrain":
            cfg = replace(cfg, pretrain=_update(cfg.pretrain, values, name, typed))
        elif name == "protect":
            protect = _update(protect, values, name, typed)
        elif name == "prompt":
            protect = replace(protect, prompt=_update(protect.prompt, values, name, typed))
        elif name == "budget":
            protect = replace(protect, budget=_update(protect.budget, values, name, typed))
        elif name == "trial":
            cfg = replace(cfg, trial=_update(cfg.trial, values, name, typed))
        elif name == "edit":
            cfg = replace(cfg, edit=_update(cfg.edit, values, name, typed))
        else:
            raise ConfigError(f"unknown section [{name}]")
    return replace(cfg, protect=protect)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (the model has a field named T)
    for section, values in cfg.to_dict().items():
        parser[section] = {k: _format(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (the model has a field named T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {name: dict(parser[name]) for name in parser.sections()}
    return apply_sections(base or RunConfig(), sections)

