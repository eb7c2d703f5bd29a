"""Run configuration shared by all CLI stages."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .classifiers import ForestConfig, LogRegConfig, MlpConfig
from .imaging import CleaningConfig
from .synth import SynthConfig

MODEL_KINDS = ("logreg", "forest", "mlp")
AGGREGATIONS = ("mean", "vote")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "run"
    manifest: str | None = None  # defaults to <out>/synth/manifest.csv
    split_fractions: tuple[float, ...] = (0.8, 0.2)
    model: str = "logreg"
    logreg: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    normalize: bool = True
    aggregation: str = "mean"
    matching_key: str = "birth_year"
    matching_ratio: int = 5
    risk_folds: int = 3
    risk_draws: int = 100
    predict_split: str = "test"  # test | validation | train | all
    subgroups: tuple[str, ...] = ("age_bin", "cancer_status", "bus_birads")
    synth: dict = field(default_factory=dict)
    cleaning: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        raw = dict(raw)
        for key in ("split_fractions", "subgroups"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.matching_key not in ("birth_year", "mammogram_year"):
            raise ConfigError("matching_key must be birth_year or mammogram_year")
        if self.matching_ratio < 1 or self.risk_folds < 2 or self.risk_draws < 1:
            raise ConfigError("matching_ratio >= 1, risk_folds >= 2 and risk_draws >= 1 are required")
        if self.predict_split not in ("test", "validation", "train", "all"):
            raise ConfigError("predict_split must be test, validation, train or all")
        try:
            self.synth_config()
            self.cleaning_config()
            self.model_config()
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad nested configuration: {err}") from None

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.out) / "synth" / "manifest.csv"

    def synth_config(self) -> SynthConfig:
        params = {"seed": self.seed, **self.synth}
        for key in ("density_prior", "class_intensity_means", "image_shape", "true_log_odds", "age_range"):
            if key in params:
                params[key] = tuple(params[key])
        return SynthConfig(**params)

    def cleaning_config(self) -> CleaningConfig:
        return CleaningConfig(**self.cleaning)

    def model_config(self):
        if self.model == "logreg":
            return LogRegConfig(**self.logreg)
        if self.model == "forest":
            return ForestConfig(**{"seed": self.seed, **self.forest})
        return MlpConfig(**{"seed": self.seed, **self.mlp})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        """Hash of every setting except the output location."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()
