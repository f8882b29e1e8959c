"""Experiment configuration: TOML parsing and canonical snapshots.

Every run directory gets a config.toml snapshot whose text fully determines
the run (dataset source, splits, model dims, losses, schedule, ablations);
its sha256 becomes the config hash recorded in metrics.json.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import MODALITIES, SyntheticSpec
from .errors import ConfigError
from .integration import IntegrationOptions, ThresholdSchedule
from .objectives import DEFAULT_WEIGHTS, LossConfig
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    synthetic: SyntheticSpec | None = None
    train_ratio: float = 0.2
    valid_fraction: float = 0.1
    split_seed: int = 0
    modalities: tuple = MODALITIES
    drop_modalities: tuple = ()
    hidden_dim: int = 300
    gat_layers: int = 2
    leaky_slope: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    disable_relevance: bool = False
    disable_freezing: bool = False
    disable_fusion_weighting: bool = False
    static_epoch: int | None = None
    disable_cm_loss: bool = False
    candidate_pool: str = "test"
    out_dir: str | None = None

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.drop_modalities = tuple(self.drop_modalities)
        for m in self.modalities + self.drop_modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}")
        if not set(self.drop_modalities) <= set(self.modalities):
            raise ConfigError("drop_modalities must be a subset of the configured modalities")
        if not self.active_modalities:
            raise ConfigError("at least one modality must remain after drops")
        if self.dataset_path is None and self.synthetic is None:
            raise ConfigError("config needs a dataset path or a synthetic spec")
        if not (0.0 < self.train_ratio <= 1.0) or not (0.0 <= self.valid_fraction < 1.0):
            raise ConfigError("train_ratio must lie in (0,1], valid_fraction in [0,1)")

    @property
    def active_modalities(self) -> tuple:
        return tuple(m for m in self.modalities if m not in self.drop_modalities)

    def integration_options(self) -> IntegrationOptions:
        return IntegrationOptions(
            relevance_disabled=self.disable_relevance,
            freezing_disabled=self.disable_freezing,
            fusion_weighting_disabled=self.disable_fusion_weighting,
            static_epoch=self.static_epoch,
        )

    def split_ratios(self) -> tuple[float, float]:
        # a slice of the seed budget is held out for validation / early stopping
        return (self.train_ratio * (1.0 - self.valid_fraction),
                self.train_ratio * self.valid_fraction)


def _take(table: dict, cls, section: str):
    known = {f.name for f in fields(cls)}
    extra = set(table) - known
    if extra:
        raise ConfigError(f"[{section}]: unknown keys {sorted(extra)}")
    return table


def parse_synthetic_table(table: dict) -> SyntheticSpec:
    return SyntheticSpec(**_take(dict(table), SyntheticSpec, "synthetic"))


def parse_experiment_toml(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None

    dataset = dict(doc.get("dataset", {}))
    synthetic = dataset.pop("synthetic", None)
    kwargs = {
        "dataset_path": dataset.pop("path", None),
        "synthetic": parse_synthetic_table(synthetic) if synthetic else None,
        "train_ratio": dataset.pop("train_ratio", 0.2),
        "valid_fraction": dataset.pop("valid_fraction", 0.1),
        "split_seed": dataset.pop("split_seed", 0),
    }
    if dataset:
        raise ConfigError(f"[dataset]: unknown keys {sorted(dataset)}")

    kwargs["modalities"] = tuple(doc.get("modalities", {}).get("use", MODALITIES))

    model = dict(doc.get("model", {}))
    kwargs["hidden_dim"] = model.pop("hidden_dim", 300)
    kwargs["gat_layers"] = model.pop("gat_layers", 2)
    kwargs["leaky_slope"] = model.pop("leaky_slope", 0.2)
    if model:
        raise ConfigError(f"[model]: unknown keys {sorted(model)}")

    loss = dict(doc.get("loss", {}))
    weights = dict(DEFAULT_WEIGHTS)
    weights.update(loss.pop("weights", {}))
    try:
        kwargs["loss"] = LossConfig(weights=weights, **loss)
    except TypeError as exc:
        raise ConfigError(f"[loss]: {exc}") from None

    try:
        kwargs["train"] = TrainConfig(**doc.get("train", {}))
        kwargs["schedule"] = ThresholdSchedule(**doc.get("schedule", {}))
    except TypeError as exc:
        raise ConfigError(f"bad [train]/[schedule] section: {exc}") from None

    ablation = dict(doc.get("ablation", {}))
    kwargs["disable_relevance"] = ablation.pop("disable_relevance", False)
    kwargs["disable_freezing"] = ablation.pop("disable_freezing", False)
    kwargs["disable_fusion_weighting"] = ablation.pop("disable_fusion_weighting", False)
    static = ablation.pop("static_epoch", -1)
    kwargs["static_epoch"] = None if static < 0 else int(static)
    kwargs["disable_cm_loss"] = ablation.pop("disable_cm_loss", False)
    kwargs["drop_modalities"] = tuple(ablation.pop("drop_modalities", ()))
    if ablation:
        raise ConfigError(f"[ablation]: unknown keys {sorted(ablation)}")

    output = dict(doc.get("output", {}))
    kwargs["out_dir"] = output.pop("dir", None)
    kwargs["candidate_pool"] = output.pop("candidate_pool", "test")
    return ExperimentConfig(**kwargs)


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    return parse_experiment_toml(path.read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return repr(value)


def experiment_toml_text(config: ExperimentConfig) -> str:
    """Canonical snapshot of a resolved experiment configuration."""
    lines = ["[dataset]"]
    if config.dataset_path is not None:
        lines.append(f"path = {_fmt(config.dataset_path)}")
    lines += [
        f"train_ratio = {_fmt(config.train_ratio)}",
        f"valid_fraction = {_fmt(config.valid_fraction)}",
        f"split_seed = {_fmt(config.split_seed)}",
    ]
    if config.synthetic is not None:
        lines.append("")
        lines.append("[dataset.synthetic]")
        for f in fields(SyntheticSpec):
            lines.append(f"{f.name} = {_fmt(getattr(config.synthetic, f.name))}")
    lines += ["", "[modalities]", f"use = {_fmt(list(config.modalities))}"]
    lines += ["", "[model]",
              f"hidden_dim = {_fmt(config.hidden_dim)}",
              f"gat_layers = {_fmt(config.gat_layers)}",
              f"leaky_slope = {_fmt(config.leaky_slope)}"]
    lines += ["", "[loss]",
              f"temperature = {_fmt(config.loss.temperature)}",
              f"negatives = {_fmt(config.loss.negatives)}",
              f"ckg_literal_sum = {_fmt(config.loss.ckg_literal_sum)}",
              "", "[loss.weights]"]
    lines += [f"{m} = {_fmt(config.loss.weights[m])}" for m in sorted(config.loss.weights)]
    lines += ["", "[schedule]",
              f"delta0 = {_fmt(config.schedule.delta0)}",
              f"factor = {_fmt(config.schedule.factor)}",
              f"cap = {_fmt(config.schedule.cap)}"]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_fmt(getattr(config.train, f.name))}" for f in fields(TrainConfig)]
    lines += ["", "[ablation]",
              f"disable_relevance = {_fmt(config.disable_relevance)}",
              f"disable_freezing = {_fmt(config.disable_freezing)}",
              f"disable_fusion_weighting = {_fmt(config.disable_fusion_weighting)}",
              f"static_epoch = {_fmt(-1 if config.static_epoch is None else config.static_epoch)}",
              f"disable_cm_loss = {_fmt(config.disable_cm_loss)}",
              f"drop_modalities = {_fmt(list(config.drop_modalities))}"]
    # the output directory is deliberately left out: runs that differ only in
    # where they write must hash identically
    lines += ["", "[output]", f"candidate_pool = {_fmt(config.candidate_pool)}"]
    return "\n".join(lines) + "\n"


def config_hash(snapshot_text: str) -> str:
    return hashlib.sha256(snapshot_text.encode("utf-8")).hexdigest()
