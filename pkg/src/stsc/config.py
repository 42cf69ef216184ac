"""Experiment configuration tree, its defaults and override parsing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .attacks import AttackConfig
from .channel import ChannelSpec, stream_seed
from .codec import CodecConfig
from .data import PartitionSpec
from .federation import FederationConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CodecSection:
    H: int = 32
    W: int = 32
    C: int = 32
    window_size: int = 4
    num_heads: int = 4
    depth_per_stage: int = 1
    mlp_ratio: float = 4.0
    wmsa_position_bias: bool = False


@dataclass
class ChannelSection:
    kind: str = "awgn"
    snr_db: float = 12.0
    rician_k: float = 10.0
    csi: str = "perfect"


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 32
    local_epochs: int = 1
    optimizer: str = "adam"
    snr_mode: str = "fixed"
    snr_min: float = 0.0
    snr_max: float = 18.0
    grad_clip: float | None = 1.0


@dataclass
class EvalSection:
    snr_grid: list = field(default_factory=lambda: [0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0])
    channels: list = field(default_factory=lambda: ["awgn"])
    repeats: int = 1
    batch_size: int = 250


@dataclass
class FederationSection:
    num_clients: int = 3
    rounds: int = 60
    participants_per_round: int = 3
    partition: str = "iid"
    alpha: float = 1.0
    eval_samples: int = 500
    checkpoint_every: int = 10


@dataclass
class AttackSection:
    iterations: int = 300
    batch_sizes: list = field(default_factory=lambda: [1, 32])
    optimizer: str = "lbfgs"
    known_pairs: int = 500
    inversion_epochs: int = 100
    num_images: int = 100
    opt_iterations: int = 300
    capture_mode: str = "gradient"


@dataclass
class IOSection:
    data_root: str = "data"
    out_dir: str = "runs"
    experiment_id: str = "stsc"
    series: str = "global"
    subset_fraction: float = 1.0
    strict_dataset: bool = True
    checkpoint: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    codec: CodecSection = field(default_factory=CodecSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    federation: FederationSection = field(default_factory=FederationSection)
    attack: AttackSection = field(default_factory=AttackSection)
    io: IOSection = field(default_factory=IOSection)

    # --- derived objects -------------------------------------------------

    def sub_seed(self, component: str, *parts: object) -> int:
        return stream_seed(self.seed, component, *parts)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(**dataclasses.asdict(self.codec), seed=self.sub_seed("codec"))

    def channel_spec(self, kind: str | None = None) -> ChannelSpec:
        c = self.channel
        return ChannelSpec(kind or c.kind, float(c.snr_db), float(c.rician_k), c.csi, self.sub_seed("channel"))

    def train_config(self, channel: ChannelSpec | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=float(t.learning_rate), batch_size=int(t.batch_size), local_epochs=int(t.local_epochs),
            optimizer=t.optimizer, channel=channel or self.channel_spec(), snr_mode=t.snr_mode,
            snr_range=(float(t.snr_min), float(t.snr_max)),
            grad_clip=None if t.grad_clip is None else float(t.grad_clip), seed=self.sub_seed("train"),
        )

    def partition_spec(self) -> PartitionSpec:
        f = self.federation
        return PartitionSpec("iid" if f.partition == "iid" else "dirichlet", float(f.alpha), int(f.num_clients),
                             self.sub_seed("partition"))

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(int(f.num_clients), int(f.rounds), int(f.participants_per_round),
                                self.partition_spec(), self.train_config(), int(f.eval_samples),
                                self.sub_seed("federation"))

    def attack_config(self, attack: str = "dlg", batch_size: int = 1) -> AttackConfig:
        a = self.attack
        return AttackConfig(attack, int(a.iterations), int(batch_size), a.optimizer, int(a.known_pairs),
                            inversion_epochs=int(a.inversion_epochs), capture_mode=a.capture_mode,
                            seed=self.sub_seed("attack", attack))

    def validate(self) -> None:
        """Build every derived object so invalid values surface with their key path."""
        for section, build in (("codec", self.codec_config), ("channel", self.channel_spec),
                               ("train", self.train_config), ("federation", self.federation_config)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        if self.federation.partition not in ("iid", "dirichlet"):
            raise ConfigError(f"federation.partition: must be 'iid' or 'dirichlet', got {self.federation.partition!r}")
        if not 0 < self.io.subset_fraction <= 1:
            raise ConfigError("io.subset_fraction: must be in (0, 1]")
        for ch in self.eval.channels:
            if ch not in ("awgn", "rician", "rayleigh"):
                raise ConfigError(f"eval.channels: unknown channel kind {ch!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = [yaml.safe_load(v) for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return str(value)
    return value


def _apply(obj: Any, tree: Mapping[str, Any], prefix: str = "") -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path}: expected a mapping")
            _apply(current, value, path + ".")
        else:
            if key == "grad_clip" and value is None:
                setattr(obj, key, None)
                continue
            setattr(obj, key, _coerce(path, value, current if current is not None else 1.0))


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw) if raw.strip() else ""


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        tree = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        if tree is not None:
            if not isinstance(tree, Mapping):
                raise ConfigError(f"{p}: top level must be a mapping")
            _apply(cfg, tree)
    for item in overrides or []:
        keys, value = parse_override(item)
        nested: Any = value
        for k in reversed(keys):
            nested = {k: nested}
        _apply(cfg, nested)
    if seed is not None:
        cfg.seed = int(seed)
    cfg.validate()
    return cfg
