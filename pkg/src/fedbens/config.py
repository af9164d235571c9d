"""Experiment configuration: JSON documents validated against a strict schema."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import Dataset, gen_synthetic_blobs, load_csv, load_idx, normalize
from .federation import FedConfig
from .nn import ModelSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlobsData(_Strict):
    kind: Literal["blobs"] = "blobs"
    n_classes: int = Field(5, ge=2)
    d_in: int = Field(20, ge=2)
    n_per_class: int = Field(800, ge=1)
    n_test_per_class: int = Field(200, ge=1)
    spread: float = Field(1.0, gt=0)
    seed: int = 123


class IdxData(_Strict):
    kind: Literal["idx"]
    images: str
    labels: str
    test_images: str
    test_labels: str
    n_classes: int = Field(10, ge=2)
    subsample: Optional[int] = Field(None, ge=1)
    test_subsample: Optional[int] = Field(None, ge=1)
    seed: int = 0


class CsvData(_Strict):
    kind: Literal["csv"]
    path: str
    test_path: str
    n_classes: Optional[int] = Field(None, ge=2)


class DatasetSection(_Strict):
    source: Annotated[Union[BlobsData, IdxData, CsvData], Field(discriminator="kind")] = BlobsData()
    normalize: Literal["per_feature_standardize", "none"] = "per_feature_standardize"


class ModelSection(_Strict):
    hidden: list[Annotated[int, Field(ge=1)]] = [32]
    activation: Literal["relu", "tanh"] = "relu"


class FederationSection(_Strict):
    n_mixtures: int = Field(3, ge=1)
    n_clients: int = Field(5, ge=1)
    alpha: float = Field(0.1, gt=0)
    client_epochs: int = Field(20, ge=0)
    client_lr: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    server_steps: int = Field(300, ge=0)
    server_lr: float = Field(1e-3, gt=0)
    eval_every: int = Field(30, ge=1)
    temperature: float = Field(0.1, gt=0)
    prior_var: float = Field(0.1, gt=0)
    hessian: Literal["diagonal", "diag_last_full", "kronecker"] = "kronecker"
    kfac_mode: Literal["exact_classes", "sampled"] = "exact_classes"
    kfac_draws: int = Field(1, ge=1)
    n_val: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _cadence(self):
        if self.server_steps > 0 and self.eval_every > self.server_steps:
            raise ValueError("eval_every must not exceed server_steps")
        return self


class BaselineSection(_Strict):
    fedavg: bool = True
    fisher_merge: bool = True


class OutputSection(_Strict):
    dir: str = "runs/default"
    record_timing: bool = False


class ExperimentConfig(_Strict):
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    federation: FederationSection = FederationSection()
    baselines: BaselineSection = BaselineSection()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output: OutputSection = OutputSection()

    def fed_config(self, seed: int, threads: int = 1) -> FedConfig:
        return FedConfig(seed=seed, threads=threads, **self.federation.model_dump())

    def baseline_names(self) -> list[str]:
        return [name for name, on in self.baselines.model_dump().items() if on]


class ConfigError(ValueError):
    """Raised for unreadable or schema-invalid configs (CLI exit code 2)."""


def load_config(path: str | Path) -> ExperimentConfig:
    from pydantic import ValidationError

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"{path}: invalid config\n  " + "\n  ".join(lines)) from exc


def _subsample(ds: Dataset, n: int | None, seed: int) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.subset(idx)


def load_datasets(cfg: ExperimentConfig, base_dir: Path | None = None) -> tuple[Dataset, Dataset]:
    """(train, test), with the test set normalized by training statistics."""
    src = cfg.dataset.source

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or base_dir is None else base_dir / path

    if isinstance(src, BlobsData):
        train = gen_synthetic_blobs(src.n_classes, src.d_in, src.n_per_class, src.spread, seed=src.seed)
        test = gen_synthetic_blobs(
            src.n_classes, src.d_in, src.n_test_per_class, src.spread, seed=src.seed, sample_seed=src.seed + 1
        )
    elif isinstance(src, IdxData):
        train = _subsample(load_idx(resolve(src.images), resolve(src.labels), src.n_classes), src.subsample, src.seed)
        test = _subsample(
            load_idx(resolve(src.test_images), resolve(src.test_labels), src.n_classes), src.test_subsample, src.seed + 1
        )
    else:
        train = load_csv(resolve(src.path), src.n_classes)
        test = load_csv(resolve(src.test_path), train.n_classes)
    train, stats = normalize(train, cfg.dataset.normalize)
    return train, stats.apply(test)


def model_spec(cfg: ExperimentConfig, train: Dataset) -> ModelSpec:
    return ModelSpec((train.n_features, *cfg.model.hidden, train.n_classes), cfg.model.activation)
