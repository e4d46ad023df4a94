"""Flat ``key = value`` run configuration covering model, training and phantom fields."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .segnet import SegConfig
from .synthdata import PhantomSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _int_list(s: str) -> list:
    return [int(v) for v in s.replace(",", " ").split()]


def _triple(s: str) -> tuple:
    v = _int_list(s)
    return tuple(v * 3) if len(v) == 1 else tuple(v)


def _float_pair(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


# key -> (section, field name, parser)
KEYS = {
    "variant": ("seg", "variant", str),
    "in_channels": ("seg", "in_channels", int),
    "num_classes": ("seg", "num_classes", int),
    "stem_channels": ("seg", "stem_channels", int),
    "stage_depths": ("seg", "stage_depths", _int_list),
    "channels": ("seg", "channels", _int_list),
    "state_dim": ("seg", "state_dim", int),
    "window": ("seg", "window", int),
    "heads": ("seg", "heads", int),
    "epochs": ("train", "epochs", int),
    "lr": ("train", "lr", float),
    "batch_size": ("train", "batch_size", int),
    "dice_weight": ("train", "dice_weight", float),
    "ce_weight": ("train", "ce_weight", float),
    "val_interval": ("train", "val_interval", int),
    "precision": ("train", "precision", str),
    "seed": ("run", "seed", int),
    "regime": ("data", "regime", str),
    "size": ("data", "size", _triple),
    "noise_std": ("data", "noise_std", float),
    "roi_fraction": ("data", "roi_fraction", _float_pair),
    "n_distractors": ("data", "n_distractors", int),
    "n_train": ("split", "n_train", int),
    "n_val": ("split", "n_val", int),
    "n_test": ("split", "n_test", int),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def set(self, key: str, raw, where: str = "flag"):
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        parser = KEYS[key][2]
        if isinstance(raw, (list, tuple)):
            raw = " ".join(map(str, raw))
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {raw!r} ({exc})") from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            cfg.set(key, val, f"{source}:{n}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def _section(self, name: str) -> dict:
        return {KEYS[k][1]: v for k, v in self.values.items() if KEYS[k][0] == name}

    def seg_config(self) -> SegConfig:
        kw = self._section("seg")
        kw["seed"] = self.seed
        if "precision" in self.values:
            kw["precision"] = self.values["precision"]
        if "channels" in kw:
            kw.setdefault("stem_channels", kw["channels"][0])
            kw.setdefault("stage_depths", [1] * len(kw["channels"]))
        return SegConfig(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self._section("train"))

    def phantom_spec(self) -> PhantomSpec:
        kw = self._section("data")
        if "num_classes" in self.values:
            kw["num_classes"] = self.values["num_classes"]
        elif kw.get("regime") == "multi_organ":
            kw["num_classes"] = 5
        return PhantomSpec(seed=self.seed, **kw)

    def splits(self) -> tuple:
        s = self._section("split")
        return s.get("n_train", 32), s.get("n_val", 4), s.get("n_test", 4)

    def digest(self) -> str:
        """Short stable hash of the effective values."""
        blob = json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
