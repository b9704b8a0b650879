"""Run configuration: strict loading, overrides, hashing.

A run config has the sections ``data, model, train, attack, attacks,
sinkhorn, eval, output``. Unknown keys are rejected with their dotted path.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .data import MelConfig
from .losses import SinkhornConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    manifest: str | None = None
    eval_manifest: str | None = None
    toy_seed: int = 0
    toy_size: int = 60
    eval_toy_seed: int = 1
    eval_toy_size: int = 20
    mel_bins: int = 128
    win_length: int = 400
    hop_length: int = 160
    log_floor: float = 1e-6
    normalize: bool = True

    @property
    def mel(self) -> MelConfig:
        return MelConfig(self.mel_bins, self.win_length, self.hop_length, self.log_floor,
                         normalize=self.normalize)


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 10
    suite: str = "whitebox"          # whitebox | transfer | custom
    mifgsm_steps: int = 10
    surrogate_rnn_hidden: int | None = None   # None -> half the target width
    surrogate_cnn_channels: int | None = None
    surrogate_seed_offset: int = 1000


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"
    force: bool = False


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    attacks: list[AttackConfig] = field(default_factory=list)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "attack": self.attack.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "sinkhorn": asdict(self.sinkhorn),
            "eval": asdict(self.eval),
            "output": asdict(self.output),
        }
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path):
        d = self.to_dict()
        d["config_hash"] = self.config_hash
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


_SECTIONS = {
    "data": DataSection, "model": ModelConfig, "train": TrainConfig,
    "attack": AttackConfig, "sinkhorn": SinkhornConfig, "eval": EvalSection,
    "output": OutputSection,
}


def _build(cls, values, where):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def from_dict(raw: dict) -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig` (fail closed)."""
    raw = copy.deepcopy(raw or {})
    raw.pop("config_hash", None)
    unknown = sorted(set(raw) - set(_SECTIONS) - {"attacks"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    parts = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    attacks = raw.get("attacks") or []
    if not isinstance(attacks, list):
        raise ConfigError("attacks: expected a list")
    parts["attacks"] = [_build(AttackConfig, a, f"attacks[{i}]") for i, a in enumerate(attacks)]
    model = parts["model"]
    n_mels = (raw.get("model") or {}).get("n_mels")
    if n_mels is None:
        model = dataclasses.replace(model, n_mels=parts["data"].mel_bins)
    elif n_mels != parts["data"].mel_bins:
        raise ConfigError(f"model.n_mels={n_mels} disagrees with data.mel_bins={parts['data'].mel_bins}")
    parts["model"] = model
    return RunConfig(**parts)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def read_raw(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: cannot parse ({err})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load(path=None, overrides=None, base: dict | None = None) -> RunConfig:
    raw = copy.deepcopy(base or {})
    if path is not None:
        _merge(raw, read_raw(path))
    return from_dict(apply_overrides(raw, overrides))


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v
    return dst


# Desk-scale profile: small enough to train every regime on one CPU core in
# about a minute, with an attack budget that visibly hurts an undefended model.
DESK_PROFILE = {
    "data": {"toy_size": 60, "eval_toy_size": 20, "mel_bins": 32},
    "model": {"cnn_channels": 8, "n_rescnn_blocks": 1, "n_birnn_layers": 1,
              "rnn_hidden": 48, "conv_downsample_factor": 3},
    "train": {"epochs": 40, "inner_iters": 4, "epsilon": 0.1, "eta2": 5e-3,
              "batch_size": 10},
    "attack": {"family": "pgd", "epsilon": 0.1, "n_steps": 20},
}


def desk_config(seed: int = 0, overrides=None) -> RunConfig:
    base = copy.deepcopy(DESK_PROFILE)
    base["train"]["seed"] = seed
    base["attack"]["seed"] = seed
    base["data"]["toy_seed"] = 1000 + seed
    base["data"]["eval_toy_seed"] = 2000 + seed
    return from_dict(apply_overrides(base, overrides))
