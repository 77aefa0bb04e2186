"""Pydantic models for spmatch configuration and serialized records.

This module defines:
- Parameter models (features, distance, search, fusion, regularization)
- The resolved run configuration
- Library manifest entries
- Serialized records (ANN field lines, metrics and oracle reports)

All models use Pydantic v2 for validation and serialization.
"""

from __future__ import annotations

import hashlib
import math
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

FeatureKind = Literal["mean-color", "cumulative-histogram", "orientation-histogram", "concat"]
BlockKind = Literal["mean-color", "cumulative-histogram", "orientation-histogram"]
MetricName = Literal["euclidean", "sqeuclidean"]


# ============================================================================
# Feature and distance parameters
# ============================================================================


class FeatureBlock(BaseModel):
    """One block of a concatenated descriptor."""

    kind: BlockKind
    weight: float = Field(default=1.0, gt=0, description="Scaling applied after block normalization")

    model_config = {"extra": "forbid", "frozen": True}


class FeatureConfig(BaseModel):
    """Per-superpixel descriptor configuration."""

    kind: FeatureKind = Field(default="mean-color", description="Descriptor kind")
    bins: int = Field(default=16, ge=2, description="Histogram bins per channel")
    orientation_bins: int = Field(
        default=9, ge=2, alias="orientation-bins", description="Unsigned orientation bins over [0, pi)"
    )
    color: Literal["rgb", "gray"] = Field(default="rgb", description="Color space features use")
    blocks: tuple[FeatureBlock, ...] = Field(
        default=(FeatureBlock(kind="mean-color"), FeatureBlock(kind="orientation-histogram")),
        description="Blocks of a concat descriptor",
    )

    model_config = {"extra": "forbid", "populate_by_name": True, "frozen": True}

    def fingerprint(self) -> str:
        """Stable hash of this configuration, used as part of feature cache keys."""
        return hashlib.sha256(self.model_dump_json(by_alias=True).encode("utf-8")).hexdigest()


class DistanceParams(BaseModel):
    """Scaling parameters of the superpatch distance.

    sigma2 may be infinite, which makes the center-distance weight constant 1.
    In degenerate mode the pair weight is the indicator of equal offsets.
    """

    sigma1: float = Field(..., gt=0)
    sigma2: float = Field(..., gt=0)
    metric: MetricName = "euclidean"
    degenerate: bool = False

    model_config = {"extra": "forbid", "frozen": True}


# ============================================================================
# Search parameters
# ============================================================================


class RandomSearchParams(BaseModel):
    """Decaying-box sampling schedule; initial_radius None means the image's largest side."""

    initial_radius: float | None = Field(default=None, gt=0)
    ratio: float = Field(default=0.5, gt=0, lt=1)
    floor: float = Field(default=1.0, gt=0)

    model_config = {"extra": "forbid", "frozen": True}


class SpmParams(BaseModel):
    """Parameters of the k independent superpatch searches."""

    radius: float = Field(default=0.0, ge=0, description="Superpatch radius R in pixels")
    k: int = Field(default=1, ge=1, description="Number of independent searches")
    iterations: int = Field(default=5, ge=1)
    seed: int = 0
    random_search: RandomSearchParams = Field(default_factory=RandomSearchParams)
    threads: int | None = Field(default=None, ge=1, description="Worker cap; None = CPU count")

    model_config = {"extra": "forbid", "frozen": True}


# ============================================================================
# Labeling parameters
# ============================================================================


class FusionParams(BaseModel):
    """Label fusion weights; beta = inf disables the position prior."""

    alpha: float = Field(default=2.0, gt=0)
    beta: float = Field(default=4.0, gt=0)
    epsilon: float = Field(default=1e-12, gt=0)
    num_labels: int = Field(default=3, ge=1)

    model_config = {"extra": "forbid", "frozen": True, "ser_json_inf_nan": "constants"}


class RegularizationParams(BaseModel):
    """Graph regularization of the fused labeling."""

    gamma: float = Field(default=0.5, gt=0)
    neighborhood: Literal["adjacency", "superpatch"] = "adjacency"
    max_sweeps: int = Field(default=10, ge=1)

    model_config = {"extra": "forbid", "frozen": True}


class DecomposeParams(BaseModel):
    """SLIC-style decomposition parameters."""

    superpixels: int = Field(default=250, ge=1)
    compactness: float = Field(default=0.1, gt=0)
    iterations: int = Field(default=10, ge=1)
    jitter: float = Field(default=0.0, ge=0, lt=1)

    model_config = {"extra": "forbid", "frozen": True}


# ============================================================================
# Run configuration
# ============================================================================


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI run."""

    feature: FeatureConfig = Field(default_factory=FeatureConfig)
    spm: SpmParams = Field(default_factory=SpmParams)
    sigma1: float | None = Field(default=None, gt=0, description="Override for sigma1")
    sigma2: float | None = Field(default=None, gt=0, description="Override for sigma2")
    metric: MetricName = "euclidean"
    fusion: FusionParams = Field(default_factory=FusionParams)
    regularization: RegularizationParams = Field(default_factory=RegularizationParams)
    decompose: DecomposeParams = Field(default_factory=DecomposeParams)
    cache: bool = True

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}


# ============================================================================
# Library manifest
# ============================================================================


class ManifestEntry(BaseModel):
    """One exemplar: an image (or aligned single-channel stack), optional labels and decomposition.

    Relative paths are resolved against the manifest's directory.
    """

    image: str | list[str]
    labels: str | None = Field(default=None, description="Pixel-wise label map (PNG or CSV)")
    decomposition: str | None = Field(default=None, description="16-bit superpixel label PNG")

    model_config = {"extra": "forbid"}

    @field_validator("image")
    @classmethod
    def validate_image(cls, v: str | list[str]) -> str | list[str]:
        """Require at least one image path."""
        if isinstance(v, list) and not v:
            raise ValueError("image list must not be empty")
        if isinstance(v, str) and not v:
            raise ValueError("image path must not be empty")
        return v

    @property
    def image_paths(self) -> list[str]:
        return [self.image] if isinstance(self.image, str) else list(self.image)


# ============================================================================
# Serialized records
# ============================================================================


class MatchRecord(BaseModel):
    """One match in an AnnField JSON line."""

    img: int
    sp: int
    d: float

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}


class AnnRecord(BaseModel):
    """One AnnField JSON line: a test superpixel and its k matches."""

    i: int
    matches: list[MatchRecord]

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}


class RocCurve(BaseModel):
    """Threshold sweep for one label treated as positive."""

    thresholds: list[float]
    tpr: list[float]
    fpr: list[float]
    auc: float = Field(..., description="Area under the curve; NaN when truth holds one class")

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}

    @field_validator("auc")
    @classmethod
    def validate_auc(cls, v: float) -> float:
        if not math.isnan(v) and not 0.0 <= v <= 1.0:
            raise ValueError(f"AUC must lie in [0, 1], got {v}")
        return v


class MetricsReport(BaseModel):
    """Evaluation of one labeled test image."""

    superpixel_accuracy: float | None = Field(default=None, ge=0, le=1)
    pixel_accuracy: float | None = Field(default=None, ge=0, le=1)
    dice: dict[int, float] = Field(default_factory=dict)
    roc: dict[int, RocCurve] = Field(default_factory=dict)
    wall_time_sec: dict[str, float] = Field(default_factory=dict)
    distance_evaluations: int | None = Field(
        default=None, ge=0, description="Total superpatch distance evaluations of the search"
    )

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}

    @field_validator("dice")
    @classmethod
    def validate_dice(cls, v: dict[int, float]) -> dict[int, float]:
        """Dice values are fractions."""
        for label, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"dice for label {label} outside [0, 1]: {value}")
        return v


class OracleEntry(BaseModel):
    """Search quality of one test superpixel against the exhaustive minimum."""

    i: int
    oracle: float
    spm: float
    ratio: float

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}


class OracleReport(BaseModel):
    """Per-superpixel oracle comparison with summary statistics."""

    entries: list[OracleEntry]
    quantiles: dict[str, float]
    fraction_within: float = Field(..., ge=0, le=1)
    tolerance: float = 1.05

    model_config = {"extra": "forbid", "ser_json_inf_nan": "constants"}

    @model_validator(mode="after")
    def check_ratios(self) -> OracleReport:
        """Exact search can never be beaten."""
        for entry in self.entries:
            if not math.isnan(entry.ratio) and entry.ratio < 1.0 - 1e-9:
                raise ValueError(f"superpixel {entry.i}: search beat the oracle")
        return self
