"""Run configuration schema, validated before any computation starts."""

from __future__ import annotations

import hashlib
import json
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from . import augment as A
from . import training as TR


class AugmentSettings(BaseModel):
    kind: Literal["augmix", "cutout", "confetti", "all"] = "all"
    severity: int = Field(default=3, ge=1, le=10)
    depth_range: Tuple[int, int] = (1, 3)
    cutout_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    confetti_count: Tuple[int, int] = (1, 6)
    confetti_side: Tuple[float, float] = (0.02, 0.10)

    def to_spec(self) -> A.AugmentSpec:
        return A.AugmentSpec(
            kind=self.kind,
            severity=self.severity,
            depth_range=tuple(self.depth_range),
            cutout_fraction=self.cutout_fraction,
            confetti_count=tuple(self.confetti_count),
            confetti_side=tuple(self.confetti_side),
        )


class TrainSettings(BaseModel):
    objective: Literal["mahalanobis", "svdd", "hsc"] = "mahalanobis"
    aggregation: Literal["max", "mean"] = "max"
    gaussian_mode: Literal["global", "tied", "local"] = "tied"
    lr: float = Field(default=1e-6, gt=0)
    batch_size: int = Field(default=8, ge=1)
    patience: int = Field(default=20, ge=0)
    max_epochs: int = Field(default=250, ge=1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    stopping: Literal["vrm_auroc", "val_loss", "fixed_epochs"] = "vrm_auroc"
    augment: AugmentSettings = Field(default_factory=AugmentSettings)
    anomalous_fraction: float = Field(default=0.7, ge=0.0, le=1.0)
    oversample: int = Field(default=10, ge=1)
    svdd_weight_decay: float = Field(default=1e-4, ge=0.0)
    svdd_norm: Literal["l1", "l2"] = "l2"
    hsc_spatial: bool = True
    seed: int = 0

    def to_train_config(self, seed: Optional[int] = None) -> TR.TrainConfig:
        return TR.TrainConfig(
            objective=self.objective,
            aggregation=self.aggregation,
            gaussian_mode=self.gaussian_mode,
            lr=self.lr,
            batch_size=self.batch_size,
            patience=self.patience,
            max_epochs=self.max_epochs,
            train_fraction=self.train_fraction,
            stopping=self.stopping,
            augment=self.augment.to_spec(),
            anomalous_fraction=self.anomalous_fraction,
            oversample=self.oversample,
            svdd_weight_decay=self.svdd_weight_decay,
            svdd_norm=self.svdd_norm,
            hsc_spatial=self.hsc_spatial,
            seed=self.seed if seed is None else seed,
        )


class CorpusSettings(BaseModel):
    kind: Literal["synthetic", "mvtec"] = "synthetic"
    # synthetic
    categories: int = Field(default=4, ge=1)
    train_per_category: int = Field(default=60, ge=1)
    test_per_category: int = Field(default=20, ge=2)
    size: int = Field(default=64, ge=16)
    defects: List[Literal["blob", "scratch_line", "texture_swap"]] = Field(
        default=["blob", "scratch_line", "texture_swap"]
    )
    seed: int = 7
    # mvtec
    root: Optional[str] = None
    category_filter: Optional[List[str]] = None

    @field_validator("size")
    @classmethod
    def _size_divisible(cls, v):
        if v % 16:
            raise ValueError("size must be divisible by 16 (4 pooling levels)")
        return v


class ExtractorSettings(BaseModel):
    channels: List[int] = Field(default=[16, 32, 64, 128])
    activation: Literal["silu", "relu"] = "silu"
    tap_levels: Optional[List[int]] = None
    init_seed: int = 1


class PretrainSettings(BaseModel):
    epochs: int = Field(default=20, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    seed: int = 11
    batch_size: int = Field(default=32, ge=2)
    # the pretraining corpus is generated fresh (transfer-source surrogate)
    classes: int = Field(default=4, ge=2)
    images_per_class: int = Field(default=80, ge=4)
    corpus_seed: int = 1234


class RunConfig(BaseModel):
    output_dir: str = "out"
    corpus: CorpusSettings = Field(default_factory=CorpusSettings)
    extractor: ExtractorSettings = Field(default_factory=ExtractorSettings)
    pretrain: PretrainSettings = Field(default_factory=PretrainSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    folds: int = Field(default=5, ge=1)
    seed: int = 0
    workers: int = Field(default=0, ge=0)  # 0 = auto
    variants: List[str] = Field(default=["frozen", "finetuned"])

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))
