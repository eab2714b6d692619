"""Run configuration: nested dataclasses <-> flat ``section.key = value`` text.

Example file::

    # toy run on 20% labels
    split.labeled_fraction = 0.2
    train.epochs_pretrain = 30
    ablate.gate_off_from_epoch1 = true

Unknown keys are rejected.  ``canonical()`` renders every resolved value in
sorted order; its SHA-256 is the config hash stored in checkpoints.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple

from .data import DatasetManifest, SplitSpec
from .gate import GateConfig
from .losses import LossWeights
from .network import NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    format: str = "synthetic"
    name: str = "synthetic"
    train: str = ""  # comma separated paths
    test: str = ""
    label_bytes: int = 1
    synthetic_train: int = 2000
    synthetic_test: int = 1000
    synthetic_noise: float = 0.35
    seed: int = 0

    def manifest(self, net: NetworkConfig) -> DatasetManifest:
        paths = lambda s: [p.strip() for p in s.split(",") if p.strip()]
        return DatasetManifest(
            name=self.name, format=self.format, num_classes=net.num_classes, img_size=net.img_size,
            train=paths(self.train), test=paths(self.test), label_bytes=self.label_bytes,
            synthetic_train=self.synthetic_train, synthetic_test=self.synthetic_test,
            synthetic_noise=self.synthetic_noise, seed=self.seed,
        )


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    schedule: str = "constant"  # constant | cosine
    batch_labeled: int = 16
    batch_unlabeled: int = 32


@dataclass
class TrainConfig:
    epochs_pretrain: int = 200
    epochs_finetune: int = 100
    mask_ratio: float = 0.75
    recon_reduction: str = "patch_norm"  # patch_norm | elementwise_mean
    recon_target: str = "normalized"  # normalized | raw
    checkpoint_every: int = 10
    val_cap: int = 512
    eval_batch: int = 256


@dataclass
class AblationFlags:
    recon_off: bool = False
    consistency_off: bool = False
    gate_off_from_epoch1: bool = False
    gate_no_val_threshold: bool = False
    pseudo_off: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    net: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    gate: GateConfig = field(default_factory=GateConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.optim.schedule not in ("constant", "cosine"):
            raise ConfigError(f"optim.schedule must be constant or cosine, got {self.optim.schedule!r}")
        if self.train.recon_reduction not in ("patch_norm", "elementwise_mean"):
            raise ConfigError(f"unknown train.recon_reduction {self.train.recon_reduction!r}")
        if self.train.recon_target not in ("normalized", "raw"):
            raise ConfigError(f"unknown train.recon_target {self.train.recon_target!r}")
        if not 0.0 <= self.train.mask_ratio < 1.0:
            raise ConfigError(f"train.mask_ratio must lie in [0, 1), got {self.train.mask_ratio}")
        a = self.ablate
        if a.gate_off_from_epoch1 and a.gate_no_val_threshold:
            raise ConfigError("gate_off_from_epoch1 and gate_no_val_threshold are mutually exclusive")

    # -- profiles -----------------------------------------------------------

    @classmethod
    def paper(cls) -> "RunConfig":
        return cls()

    @classmethod
    def toy(cls) -> "RunConfig":
        return cls(
            net=NetworkConfig.toy(num_classes=4),
            gate=GateConfig(T_warmup=5),
            optim=OptimConfig(lr=1e-3),
            # per-element recon keeps the two objectives on a similar scale at this size
            train=TrainConfig(epochs_pretrain=30, epochs_finetune=5, checkpoint_every=5,
                              recon_reduction="elementwise_mean"),
            data=DataConfig(synthetic_noise=0.1),
        )

    @classmethod
    def profile(cls, name: str) -> "RunConfig":
        if name == "paper":
            return cls.paper()
        if name == "toy":
            return cls.toy()
        raise ConfigError(f"unknown profile {name!r} (expected paper or toy)")

    # -- derived ------------------------------------------------------------

    def gate_config(self) -> GateConfig:
        a = self.ablate
        if a.pseudo_off:
            mode = "off"
        elif a.gate_off_from_epoch1:
            mode = "always_on"
        elif a.gate_no_val_threshold:
            mode = "warmup_only"
        else:
            mode = "dynamic"
        return replace(self.gate, mode=mode)

    # -- flat form ----------------------------------------------------------

    def to_flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if (sec, f.name) in _HIDDEN:
                    continue
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def canonical(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.to_flat().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, pairs: Dict[str, str]) -> "RunConfig":
        """Return a copy with ``section.key`` string values parsed and applied."""
        flat = self.to_flat()
        for key, raw in pairs.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _parse(raw, type(flat[key]), key)
        return RunConfig.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        sections: Dict[str, Dict[str, Any]] = {s: {} for s in _SECTIONS}
        seed = cls().seed
        for key, value in flat.items():
            if key == "seed":
                seed = value
                continue
            sec, _, name = key.partition(".")
            if sec not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = value
        try:
            built = {s: _SECTION_TYPES[s](**kw) for s, kw in sections.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(seed=seed, **built)


_SECTIONS = ("net", "loss", "gate", "split", "data", "optim", "train", "ablate")
_SECTION_TYPES = {
    "net": NetworkConfig, "loss": LossWeights, "gate": GateConfig, "split": SplitSpec,
    "data": DataConfig, "optim": OptimConfig, "train": TrainConfig, "ablate": AblationFlags,
}
_HIDDEN = {("gate", "mode")}


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ: type, key: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} is not a {typ.__name__}") from None


def parse_config_text(text: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path=None, profile: str = "paper", overrides: Dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig.profile(profile)
    pairs: Dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        pairs.update(parse_config_text(p.read_text()))
    pairs.update(overrides or {})
    return cfg.with_overrides(pairs) if pairs else cfg


def config_from_canonical(text: str) -> RunConfig:
    return RunConfig().with_overrides(parse_config_text(text))
