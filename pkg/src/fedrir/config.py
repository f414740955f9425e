"""Sectioned key-value experiment configuration and experiment assembly."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import data as D
from .federation import FederationConfig, TrainingResult, run_training
from .learning import MaskSpec, ModelDims, TrainConfig
from .rng import stream


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ratio(text: str) -> tuple[float, float]:
    parts = [float(t) for t in text.replace(" ", "").split(",") if t]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ValueError(f"join ratio must be a value or 'lo,hi', got {text!r}")


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple[Any, str]]] = {
    "data": {
        "source": (str, "synthetic"),
        "classes": (int, "6"),
        "per_class": (int, "200"),
        "dim": (int, "64"),
        "spread": (float, repr(D.CALIBRATED_SPREAD)),
        "images": (str, ""),
        "labels": (str, ""),
        "limit": (int, "0"),
    },
    "partition": {
        "kind": (str, "pathological"),
        "classes_per_client": (int, "2"),
        "alpha": (float, "0.1"),
        "train_fraction": (float, "0.75"),
    },
    "federation": {
        "clients": (int, "20"),
        "join_ratio": (_ratio, "1.0"),
        "rounds": (int, "50"),
        "algorithm": (str, "fedrir"),
        "seed": (int, "0"),
        "workers": (int, "1"),
        "reset_opt_on_broadcast": (_bool, "false"),
    },
    "model": {
        "k_cs": (int, "32"),
        "k_g": (int, "32"),
        "hidden": (_ints, "128,128"),
        "idm_hidden": (_ints, "64,64,64"),
    },
    "train": {
        "lr": (float, "0.0005"),
        "batch_size": (int, "100"),
        "local_epochs": (int, "1"),
        "mask_ratio": (float, "0.6"),
        "mask_mode": (str, "elementwise"),
        "patch": (int, "2"),
        "idm_mode": (str, "alternating"),
        "ablation": (str, "none"),
    },
}


@dataclass
class ExperimentConfig:
    """Raw text values per section; typed access through ``get``."""

    values: dict[str, dict[str, str]]

    @classmethod
    def defaults(cls) -> ExperimentConfig:
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str, overrides: Iterable[str] = ()) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        cfg = cls.defaults()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be section.key=value, got {item!r}")
            path, value = item.split("=", 1)
            cfg.set(path.strip(), value.strip())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, overrides)

    def set(self, path: str, value: str) -> None:
        section, _, key = path.partition(".")
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r} (in {path!r})")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {path!r}")
        self.values[section][key] = str(value)

    def get(self, path: str):
        section, _, key = path.partition(".")
        parser, _ = SCHEMA[section][key]
        raw = self.values[section][key]
        try:
            return parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {path}: {raw!r} ({exc})") from exc

    def with_values(self, flat: Mapping[str, Any]) -> ExperimentConfig:
        out = ExperimentConfig({s: dict(v) for s, v in self.values.items()})
        for path, value in flat.items():
            out.set(path, value)
        out.validate()
        return out

    def override(self, path: str, value: Any) -> ExperimentConfig:
        out = ExperimentConfig({s: dict(v) for s, v in self.values.items()})
        out.set(path, value if isinstance(value, str) else repr(value))
        out.validate()
        return out

    def validate(self) -> None:
        for section, keys in SCHEMA.items():
            for key in keys:
                self.get(f"{section}.{key}")
        try:
            self.federation_config(ModelDims())
            self.partition_spec()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if self.get("data.source") not in ("synthetic", "idx"):
            raise ConfigError("data.source must be 'synthetic' or 'idx'")

    def echo(self) -> str:
        """Canonical text form; loading it reproduces this config."""
        buf = io.StringIO()
        for section, keys in SCHEMA.items():
            buf.write(f"[{section}]\n")
            for key in keys:
                buf.write(f"{key} = {self.values[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def as_dict(self) -> dict[str, dict[str, str]]:
        return {s: dict(self.values[s]) for s in SCHEMA}

    def section(self, name: str) -> Mapping[str, str]:
        return dict(self.values[name])

    # assembly ---------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.get("federation.seed")

    def partition_spec(self) -> D.PartitionSpec:
        return D.PartitionSpec(
            kind=self.get("partition.kind"),
            num_clients=self.get("federation.clients"),
            classes_per_client=self.get("partition.classes_per_client"),
            alpha=self.get("partition.alpha"),
            train_fraction=self.get("partition.train_fraction"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.get("train.lr"),
            batch_size=self.get("train.batch_size"),
            local_epochs=self.get("train.local_epochs"),
            mask=MaskSpec(self.get("train.mask_ratio"), self.get("train.mask_mode"), self.get("train.patch")),
            idm_mode=self.get("train.idm_mode"),
            ablation=self.get("train.ablation"),
        )

    def model_dims(self, d: int, classes: int) -> ModelDims:
        return ModelDims(
            d=d,
            classes=classes,
            k_cs=self.get("model.k_cs"),
            k_g=self.get("model.k_g"),
            hidden=self.get("model.hidden"),
            idm_hidden=self.get("model.idm_hidden"),
        )

    def federation_config(self, dims: ModelDims) -> FederationConfig:
        return FederationConfig(
            num_clients=self.get("federation.clients"),
            join_ratio=self.get("federation.join_ratio"),
            rounds=self.get("federation.rounds"),
            algorithm=self.get("federation.algorithm"),
            train=self.train_config(),
            dims=dims,
            seed=self.seed,
            workers=self.get("federation.workers"),
            reset_opt_on_broadcast=self.get("federation.reset_opt_on_broadcast"),
        )

    def build_dataset(self) -> D.Dataset:
        if self.get("data.source") == "idx":
            images, labels = self.get("data.images"), self.get("data.labels")
            if not images or not labels:
                raise ConfigError("data.source = idx needs data.images and data.labels")
            try:
                ds = D.load_idx(images, labels)
            except OSError as exc:
                raise D.DataError(str(exc)) from exc
            limit = self.get("data.limit")
            if limit:
                ds = D.Dataset(ds.samples[:limit], ds.labels[:limit], ds.num_classes, ds.source)
            return ds
        return D.synth_dataset(
            self.get("data.classes"),
            self.get("data.per_class"),
            self.get("data.dim"),
            self.get("data.spread"),
            stream(self.seed, "data"),
        )

    def build_clients(self, ds: D.Dataset | None = None) -> list[D.ClientDataset]:
        ds = ds if ds is not None else self.build_dataset()
        return D.partition(ds, self.partition_spec(), stream(self.seed, "partition"))


@dataclass
class Experiment:
    config: ExperimentConfig
    dataset: D.Dataset
    clients: list[D.ClientDataset]
    federation: FederationConfig

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> Experiment:
        ds = cfg.build_dataset()
        clients = cfg.build_clients(ds)
        dims = cfg.model_dims(ds.dim, ds.num_classes)
        return cls(cfg, ds, clients, cfg.federation_config(dims))

    def run(self) -> TrainingResult:
        return run_training(self.federation, self.clients)
