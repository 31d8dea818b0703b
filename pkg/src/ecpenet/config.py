"""Run configuration: sectioned ``key = value`` files merged with flag overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .network import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration file or value."""


# section -> key -> (target object, attribute)
_ALIASES = {
    ("loss", "lambda"): ("train", "lam"),
    ("loss", "omega"): ("train", "omega"),
    ("loss", "ecp"): ("train", "ecp_enabled"),
}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(
        scales=3, channels=16, rir_blocks=2, res_blocks_per_rir=2, windows=(7, 5, 3)))
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: Dict[str, Any] = field(default_factory=dict)

    def sync(self) -> "RunConfig":
        """Mirror the ablation flags into the network config."""
        self.network.ecp = self.train.ecp_enabled
        self.network.ife = self.train.ife_enabled
        return self

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "train": dataclasses.asdict(self.train), "data": dict(self.data)}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, annotation) -> Any:
    text = text.strip()
    hint = annotation
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        hint = args[0]
        origin = typing.get_origin(hint)
    if hint is bool:
        return parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if origin in (tuple, list):
        return tuple(int(v) for v in text.replace("{", "").replace("}", "").split(",") if v.strip())
    return text


def _field_types(obj) -> Dict[str, Any]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def set_value(cfg: RunConfig, section: str, key: str, text: str) -> None:
    section, key = section.strip().lower(), key.strip().lower()
    section, key = _ALIASES.get((section, key), (section, key))
    if section == "data":
        cfg.data[key] = text.strip()
        return
    target = {"network": cfg.network, "train": cfg.train}.get(section)
    if target is None:
        raise ConfigError(f"unknown section [{section}]")
    types = _field_types(target)
    if key not in types:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        setattr(target, key, _convert(text, types[key]))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc


def load_config(path, cfg: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``[section]`` headers and ``key = value`` lines; ``#``/``;`` start comments."""
    cfg = cfg or RunConfig()
    section = None
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: unterminated section header")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside of any section")
        key, value = line.split("=", 1)
        try:
            set_value(cfg, section, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render a config in the same format ``load_config`` reads."""
    out = []
    d = cfg.to_dict()
    for section in ("network", "train", "data"):
        out.append(f"[{section}]")
        for key, value in d[section].items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "on" if value else "off"
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)
