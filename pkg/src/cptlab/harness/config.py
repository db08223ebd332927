"""Run configuration: nested dataclasses loaded from YAML/JSON with dotted overrides.

Every field is addressable as a dotted key, e.g. ``precision.b_min=3``.
Unknown keys are rejected.
"""

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from cptlab.schedule import LRSchedule, PrecisionSchedule, clr_at, static_schedule


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "digits"  # idx | csv | digits | blobs | bitgated
    path: str = ""  # directory of IDX files (idx) or synthetic cache (digits)
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    train_csv: str = ""
    test_csv: str = ""
    n_classes: int = 0  # 0 = infer from labels
    n_train: int = 4000
    n_test: int = 2000
    image_size: int = 16
    n_features: int = 16
    spread: float = 3.0
    bit_k: int = 4
    n_signal: int = 8
    n_distractor: int = 4
    seed: int = 1234  # generator seed, independent of the training seed


@dataclass
class LRConfig:
    kind: str = "staircase"  # staircase | clr | constant
    boundaries: Optional[List[int]] = None  # default: 50% / 75% / 100% of epochs
    lrs: List[float] = field(default_factory=lambda: [0.05, 0.005, 0.0005])
    lr_max: float = 0.05
    lr_min: float = 0.0005
    cycle_epochs: int = 10


@dataclass
class PrecisionConfig:
    pattern: str = "static"
    b_min: int = 8
    b_max: int = 8
    num_cycles: int = 32
    triangular_phase: str = "rising"
    bw_bits: int = 8
    per_iteration: bool = False
    cpt_start_epoch: int = 0
    gradient_cpt: bool = False
    bw_b_min: Optional[int] = None
    eval_bits: Optional[int] = None  # default: b_max
    fw_bits_by_epoch: Optional[List[int]] = None  # explicit per-epoch plan (protocol runs)
    bw_bits_by_epoch: Optional[List[int]] = None


@dataclass
class QuantizerConfig:
    weight: str = "max_scale_symmetric"
    activation: str = "max_scale_unsigned"
    error_rounding: str = "stochastic"
    gradient_rounding: str = "stochastic"


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class TrainConfig:
    name: str = "run"
    model: str = "cnn6"  # cnn6 | mlp3 | probe
    hidden: int = 128
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 40
    batch_size: int = 64
    lr: LRConfig = field(default_factory=LRConfig)
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    quantizers: QuantizerConfig = field(default_factory=QuantizerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 1
    checkpoint_every: int = 0

    # -- derived views -------------------------------------------------
    def fw_schedule(self) -> PrecisionSchedule:
        p = self.precision
        if p.pattern == "static" or p.b_min == p.b_max:
            return static_schedule(p.b_max, self.epochs)
        return PrecisionSchedule(p.b_min, p.b_max, self.epochs, p.num_cycles, p.pattern,
                                 p.triangular_phase)

    def bw_schedule(self) -> Optional[PrecisionSchedule]:
        p = self.precision
        if not p.gradient_cpt:
            return None
        lo = p.bw_b_min if p.bw_b_min is not None else p.b_min
        return PrecisionSchedule(lo, p.bw_bits, self.epochs, p.num_cycles, p.pattern, p.triangular_phase)

    def fw_bits(self, epoch: int) -> int:
        p = self.precision
        if p.fw_bits_by_epoch is not None:
            return int(p.fw_bits_by_epoch[epoch])
        if epoch < p.cpt_start_epoch:
            return p.b_min
        return self.fw_schedule().bits_at(epoch)

    def bw_bits(self, epoch: int) -> int:
        p = self.precision
        if p.bw_bits_by_epoch is not None:
            return int(p.bw_bits_by_epoch[epoch])
        sched = self.bw_schedule()
        return sched.bits_at(epoch) if sched is not None else p.bw_bits

    def eval_bits(self) -> int:
        p = self.precision
        return p.eval_bits if p.eval_bits is not None else p.b_max

    def lr_boundaries(self):
        b = self.lr.boundaries
        if b is None:
            e = self.epochs
            b = [max(1, e // 2), max(2, (3 * e) // 4), e]
            # collapse duplicates for very short runs
            out = []
            for v in b:
                if not out or v > out[-1]:
                    out.append(v)
            b = out
        return list(b)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        if lr.kind == "constant":
            return float(lr.lrs[0])
        if lr.kind == "clr":
            return clr_at(epoch, lr.lr_max, lr.lr_min, lr.cycle_epochs)
        b = self.lr_boundaries()
        return LRSchedule(tuple(b), tuple(lr.lrs[: len(b)])).lr_at(epoch)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.model not in ("cnn6", "mlp3", "probe"):
            raise ConfigError(f"unknown model preset {self.model!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        p = self.precision
        if not 0 <= p.cpt_start_epoch < self.epochs:
            raise ConfigError("cpt_start_epoch must lie in [0, epochs)")
        for name in ("fw_bits_by_epoch", "bw_bits_by_epoch"):
            v = getattr(p, name)
            if v is not None and len(v) != self.epochs:
                raise ConfigError(f"precision.{name} needs one entry per epoch")
        if self.lr.kind not in ("staircase", "clr", "constant"):
            raise ConfigError(f"unknown lr kind {self.lr.kind!r}")
        if self.lr.kind == "staircase" and len(self.lr.lrs) < len(self.lr_boundaries()):
            raise ConfigError("lr.lrs needs one value per stage boundary")
        try:
            self.fw_schedule()
            self.bw_schedule()
            for t in range(self.epochs):
                self.lr_at(t)
                for b in (self.fw_bits(t), self.bw_bits(t)):
                    if not 2 <= b <= 32:
                        raise ConfigError(f"bitwidth {b} at epoch {t} outside [2, 32]")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _build(cls, values, prefix=""):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        f = fields[key]
        sub = _nested_type(f)
        kwargs[key] = _build(sub, val, f"{prefix}{key}.") if sub is not None else val
    return cls(**kwargs)


def _nested_type(f):
    t = f.type
    if isinstance(t, str):
        t = {c.__name__: c for c in (DataConfig, LRConfig, PrecisionConfig, QuantizerConfig,
                                     OptimConfig)}.get(t)
    return t if dataclasses.is_dataclass(t) else None


def config_from_dict(d) -> TrainConfig:
    return _build(TrainConfig, d or {})


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(d)


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Return a new config with ``key.sub=value`` overrides merged in."""
    d = config_to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(text)
    return config_from_dict(d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def precision_preset(name: str, epochs: int, num_cycles: int = 32) -> PrecisionConfig:
    """Parse shorthand like ``fw3-8_bw8`` (cyclic) or ``fw8_bw8`` (static)."""
    try:
        fw, bw = name.lower().split("_")
        assert fw.startswith("fw") and bw.startswith("bw")
        bw_bits = int(bw[2:])
        if "-" in fw:
            lo, hi = (int(v) for v in fw[2:].split("-"))
            return PrecisionConfig(pattern="cosine", b_min=lo, b_max=hi, num_cycles=num_cycles,
                                   bw_bits=bw_bits)
        b = int(fw[2:])
        return PrecisionConfig(pattern="static", b_min=b, b_max=b, bw_bits=bw_bits)
    except (ValueError, AssertionError) as exc:
        raise ConfigError(f"cannot parse precision preset {name!r} (expected e.g. fw3-8_bw8)") from exc
