"""Declarative experiment configuration.

A single TOML file describes one experiment: dataset, network shape,
training, linearization budgets, distillation, mitigation, seeds and output
location.  Parsing validates eagerly and names the offending field; the
emitter writes a canonical form so parse -> serialize -> parse round-trips.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from .model import NetworkShape
from .trainer import KDConfig, TrainConfig

SCHEMES = ("snl", "alternating", "dr")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "toy_boundary"          # toy_boundary | gaussian_mixture | csv
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("toy_boundary", "gaussian_mixture", "csv"):
            raise ConfigError(f"dataset.kind: unknown kind {self.kind!r}")
        if self.kind == "csv":
            for key in ("path", "feature_cols", "label_col", "group_col"):
                if key not in self.args:
                    raise ConfigError(f"dataset.{key}: required for csv datasets")


@dataclass(frozen=True)
class LinearizeSpec:
    scheme: str = "snl"
    budgets: tuple[float, ...] = (1.0, 0.5, 0.2, 0.1)
    dr_layers: tuple[int, ...] = ()
    snl_epochs: int = 10
    gate_l1_weight: float = 1e-3
    finetune_epochs: int = 10
    # distillation gradients are hotter than plain cross-entropy; the base
    # model's step size routinely diverges here, so finetuning has its own
    finetune_learning_rate: float = 0.01

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"linearize.scheme: unknown scheme {self.scheme!r}")
        if not self.budgets:
            raise ConfigError("linearize.budgets: at least one budget required")
        for b in self.budgets:
            if not 0.0 < b <= 1.0:
                raise ConfigError(f"linearize.budgets: budget {b} outside (0, 1]")
        if any(u <= v for u, v in zip(self.budgets, self.budgets[1:])):
            raise ConfigError("linearize.budgets: budgets must be strictly decreasing")
        if self.snl_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("linearize.snl_epochs/finetune_epochs: must be >= 0")
        if self.finetune_learning_rate <= 0.0:
            raise ConfigError("linearize.finetune_learning_rate: must be > 0")


@dataclass(frozen=True)
class MitigationSpec:
    enabled: bool = False
    mu: float = 0.05

    def __post_init__(self):
        if self.enabled and self.mu <= 0.0:
            raise ConfigError("mitigation.mu: must be > 0 when mitigation is enabled")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    shape: NetworkShape
    train: TrainConfig
    linearize: LinearizeSpec
    kd: KDConfig
    mitigation: MitigationSpec
    seeds: tuple[int, ...]
    out_dir: str
    train_fraction: float = 0.8

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicates not allowed")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction: must lie in (0, 1)")


def _take(table: dict, section: str, cls, renames: dict | None = None):
    """Build a frozen config dataclass from a TOML table, checking keys."""
    renames = renames or {}
    allowed = set(cls.__dataclass_fields__)
    kwargs = {}
    for key, value in table.items():
        name = renames.get(key, key)
        if name not in allowed:
            raise ConfigError(f"{section}.{key}: unknown field")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    known = {"dataset", "shape", "train", "linearize", "kd", "mitigation",
             "seeds", "out_dir", "train_fraction"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown section or field")

    ds_table = dict(doc.get("dataset", {}))
    kind = ds_table.pop("kind", "toy_boundary")
    dataset = DatasetSpec(kind, ds_table)

    shape_table = doc.get("shape")
    if not shape_table:
        raise ConfigError("shape: section required")
    shape = _take(shape_table, "shape", NetworkShape)

    train = _take(doc.get("train", {}), "train", TrainConfig)
    linear = _take(doc.get("linearize", {}), "linearize", LinearizeSpec)
    kd = _take(doc.get("kd", {}), "kd", KDConfig)
    mitigation = _take(doc.get("mitigation", {}), "mitigation", MitigationSpec)

    seeds = doc.get("seeds")
    if seeds is None:
        raise ConfigError("seeds: required")
    if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a list of integers")

    out_dir = doc.get("out_dir")
    if not out_dir or not isinstance(out_dir, str):
        raise ConfigError("out_dir: required string")

    return ExperimentConfig(dataset=dataset, shape=shape, train=train,
                            linearize=linear, kd=kd, mitigation=mitigation,
                            seeds=tuple(seeds), out_dir=out_dir,
                            train_fraction=float(doc.get("train_fraction", 0.8)))


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    return from_dict(doc)


# -- canonical emitter ----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "inf" in text) else text + ".0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__}")


def to_toml(cfg: ExperimentConfig) -> str:
    lines = []
    lines.append(f"seeds = {_fmt(list(cfg.seeds))}")
    lines.append(f"out_dir = {_fmt(cfg.out_dir)}")
    lines.append(f"train_fraction = {_fmt(cfg.train_fraction)}")

    lines.append("")
    lines.append("[dataset]")
    lines.append(f"kind = {_fmt(cfg.dataset.kind)}")
    for key in sorted(cfg.dataset.args):
        lines.append(f"{key} = {_fmt(cfg.dataset.args[key])}")

    lines.append("")
    lines.append("[shape]")
    for name in ("input_dim", "hidden_widths", "num_classes"):
        lines.append(f"{name} = {_fmt(getattr(cfg.shape, name))}")

    for section, obj in (("train", cfg.train), ("linearize", cfg.linearize),
                         ("kd", cfg.kd), ("mitigation", cfg.mitigation)):
        lines.append("")
        lines.append(f"[{section}]")
        for name, value in asdict(obj).items():
            lines.append(f"{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


EXAMPLE_CONFIG = """\
# Experiment definition: dense nets on the curved-boundary toy task.
# Budgets are fractions of rectifier units retained; they must decrease.

seeds = [0, 1, 2]
out_dir = "runs/toy"
train_fraction = 0.8            # stratified train/eval split

[dataset]
kind = "toy_boundary"           # toy_boundary | gaussian_mixture | csv
n = 4000
minority_fraction = 0.07
noise = 0.03
seed = 0

[shape]
input_dim = 2
hidden_widths = [12, 12, 12]
num_classes = 2

[train]
epochs = 20
batch_size = 128
learning_rate = 0.05
optimizer = "sgd_momentum"      # sgd | sgd_momentum | adam
momentum = 0.9

[linearize]
scheme = "snl"                  # snl | alternating | dr
budgets = [1.0, 0.5, 0.2, 0.1]
snl_epochs = 10
gate_l1_weight = 0.001
finetune_epochs = 10
finetune_learning_rate = 0.01

[kd]
temperature = 4.0
distill_weight = 0.9

[mitigation]
enabled = true
mu = 0.05
"""
