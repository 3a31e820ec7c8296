import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from guided_dml.datapipe.main import (
    DEFAULT_CLASSES,
    MASK_THRESHOLD,
    MAX_OVERLAP,
    PATCH_SIZE,
    View,
    default_class_names,
)
from guided_dml.errors import ConfigurationError
from guided_dml.evaluation.main import SweepGrid
from guided_dml.fusion.main import Strategy
from guided_dml.losses.main import GeminiLossParams, HybridLossParams
from guided_dml.models.main import BackboneSpec, GlobalSpec, StreamSpec, StudentConfig, TeacherConfig
from guided_dml.training.main import MAX_EPOCHS, RunConfig

OUTPUT_ROOT_ENV = "GDML_OUTPUT_ROOT"
DEFAULT_MANIFEST = Path(__file__).resolve().parent.parent / "artifacts" / "experiment.yaml"


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(Section):
    n_classes: int = Field(6, ge=2)
    images_per_class: int = Field(20, ge=2)
    image_size: Tuple[int, int] = (512, 512)
    seed: int = 0


class DatasetSection(Section):
    root: Optional[Path] = Field(None, description="Image tree laid out as <root>/<view>/<class>/")
    synthetic: Optional[SyntheticSpec] = Field(None, description="Procedural stand-in dataset")
    views: List[View] = [View.SUR, View.SEC]
    class_names: List[str] = list(DEFAULT_CLASSES)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    patch_size: int = Field(PATCH_SIZE, ge=8)
    max_overlap: int = Field(MAX_OVERLAP, ge=0)
    mask_threshold: float = Field(MASK_THRESHOLD, ge=0.0, le=1.0)
    split_seed: int = 0

    @model_validator(mode="before")
    def check_source(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if not isinstance(values, dict):
            return values
        has_root = values.get("root") is not None
        has_synthetic = values.get("synthetic") is not None
        if has_root == has_synthetic:
            raise ValueError("Exactly one of 'root' and 'synthetic' must be given")
        return values

    @model_validator(mode="after")
    def check_overlap(self) -> "DatasetSection":
        if self.max_overlap >= self.patch_size:
            raise ValueError("max_overlap must be smaller than patch_size")
        return self

    @property
    def resolved_class_names(self) -> List[str]:
        if self.synthetic is not None:
            return default_class_names(self.synthetic.n_classes)
        return self.class_names


class ModelSection(Section):
    stream_spec: StreamSpec = StreamSpec()
    global_spec: GlobalSpec = GlobalSpec()
    backbone_spec: BackboneSpec = BackboneSpec()


class LossSection(Section):
    gemini: GeminiLossParams = GeminiLossParams()
    hybrid: HybridLossParams = HybridLossParams()
    baseline_margin: float = Field(1.0, gt=0.0)


class TrainingSection(Section):
    max_epochs: int = Field(20, ge=1, le=MAX_EPOCHS)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-3, gt=0.0)
    triplets_per_epoch: Optional[int] = Field(None, ge=1)


class SweepSection(Section):
    embedding_dims: List[int] = Field([16, 128], min_length=1)
    k_values: List[int] = Field([1, 3, 5, 7, 10, 100, 1000], min_length=1)
    seeds: List[int] = Field([0, 1, 2], min_length=1)

    def grid(self) -> SweepGrid:
        """Evaluation needs at least two seeds for its confidence intervals."""
        return SweepGrid(**self.model_dump())


class FusionSection(Section):
    strategy: Strategy = "stack_maxpool"
    surface_dim: int = 128
    section_dim: int = 16
    epochs: int = Field(10, ge=1, le=MAX_EPOCHS)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(32, ge=1)


class ExperimentManifest(Section):
    dataset: DatasetSection
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    training: TrainingSection = TrainingSection()
    sweep: SweepSection = SweepSection()
    fusion: FusionSection = FusionSection()
    output_dir: Path = Path("runs")

    @property
    def n_classes(self) -> int:
        return len(self.dataset.resolved_class_names)

    def teacher_config(self, embedding_dim: int) -> TeacherConfig:
        return TeacherConfig(
            n_classes=self.n_classes,
            stream_spec=self.model.stream_spec,
            global_spec=self.model.global_spec,
            embedding_dim=embedding_dim,
            patch_size=self.dataset.patch_size,
        )

    def student_config(self, embedding_dim: int) -> StudentConfig:
        return StudentConfig(
            backbone_spec=self.model.backbone_spec,
            embedding_dim=embedding_dim,
            n_classes=self.n_classes,
            patch_size=self.dataset.patch_size,
        )

    def run_config(self, seed: int, checkpoint_dir: Optional[Path] = None) -> RunConfig:
        return RunConfig(
            seed=seed,
            max_epochs=self.training.max_epochs,
            batch_size=self.training.batch_size,
            learning_rate=self.training.learning_rate,
            triplets_per_epoch=self.training.triplets_per_epoch,
            checkpoint_dir=checkpoint_dir,
        )


def load_manifest(path: Path) -> ExperimentManifest:
    """Loads and validates the experiment YAML; ``GDML_OUTPUT_ROOT`` overrides ``output_dir``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found at {path}")

    try:
        with open(path, "r") as file:
            content = yaml.safe_load(file) or {}
    except yaml.YAMLError as exc:
        logging.error(f"Could not parse manifest {path}: {exc}")
        raise ConfigurationError(f"Malformed manifest {path}") from exc

    if os.getenv(OUTPUT_ROOT_ENV):
        content["output_dir"] = os.getenv(OUTPUT_ROOT_ENV)
    return ExperimentManifest.model_validate(content)


def with_overrides(manifest: ExperimentManifest, overrides: Dict[str, Any]) -> ExperimentManifest:
    """Re-validates the manifest with fields replaced; ``None`` leaves a field untouched.

    Section names map to dicts of field values, ``output_dir`` maps to a plain value.
    """
    content = manifest.model_dump()
    for section, fields in overrides.items():
        if isinstance(fields, dict):
            content[section].update({key: value for key, value in fields.items() if value is not None})
        elif fields is not None:
            content[section] = fields
    return ExperimentManifest.model_validate(content)
