"""Run configuration: ``[section]`` headers and flat ``key = value`` lines.

Unknown sections or keys are errors.  Comments start with ``#`` or ``;``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .occtoy import NetSpec, TrainConfig
from .units import BDCUnitConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("->", ",").split(",") if v.strip())


SCHEMA = {
    "run": {"seed": int},
    "data": {"grid": _ints, "n_class": int, "n_views": int, "image": int,
             "n_train": int, "n_test": int, "n_boxes": int},
    "model": {"variant": str, "n_mulbiconv": int, "kernels": _ints, "scope": str,
              "stem_channels": int, "bev_blocks": int},
    "train": {"lr": float, "weight_decay": float, "steps": int, "batch_size": int},
    "output": {"dir": str, "report": str, "checkpoint": str},
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=dict)
    text: str = ""

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    @property
    def hash(self) -> str:
        canon = "\n".join(
            f"{s}.{k}={self.values[s][k]!r}" for s in sorted(self.values) for k in sorted(self.values[s])
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def net_spec(self) -> NetSpec:
        unit = BDCUnitConfig(
            variant=self.get("model", "variant", "V3"),
            n_mulbiconv=self.get("model", "n_mulbiconv", 2),
            kernels=self.get("model", "kernels", (3, 1)),
        )
        return NetSpec(
            grid=self.get("data", "grid", (16, 16, 4)),
            n_class=self.get("data", "n_class", 4),
            n_views=self.get("data", "n_views", 2),
            image=self.get("data", "image", 32),
            stem_channels=self.get("model", "stem_channels", 8),
            unit=unit,
            scope=self.get("model", "scope", "base"),
            bev_blocks=self.get("model", "bev_blocks", 2),
        )

    def train_config(self) -> TrainConfig:
        d = TrainConfig()
        return TrainConfig(
            steps=self.get("train", "steps", d.steps),
            batch_size=self.get("train", "batch_size", d.batch_size),
            lr=self.get("train", "lr", d.lr),
            weight_decay=self.get("train", "weight_decay", d.weight_decay),
            seed=self.get("run", "seed", d.seed),
            n_train=self.get("data", "n_train", d.n_train),
            n_test=self.get("data", "n_test", d.n_test),
            n_boxes=self.get("data", "n_boxes", d.n_boxes),
        )


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    cfg = RunConfig(values, text)
    try:
        cfg.net_spec()
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
