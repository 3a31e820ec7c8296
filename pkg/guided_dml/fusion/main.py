import logging
from pathlib import Path
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from guided_dml.datapipe.main import ClassLabel, PatchRecord
from guided_dml.errors import ConfigurationError, RejectedInputError
from guided_dml.evaluation.main import MetricsRow, compute_metrics
from guided_dml.models.main import (
    ModelState,
    TrainingMeta,
    embed_patches,
    load_checkpoint,
    penultimate_features,
    read_checkpoint_files,
)
from guided_dml.training.main import MAX_EPOCHS

STRATEGIES = ("concat", "stack_maxpool")
Strategy = Literal["concat", "stack_maxpool"]
STANDARDISE_EPS = 1e-6


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: Strategy
    surface_checkpoint: Path
    section_checkpoint: Path
    epochs: int = Field(10, ge=1, le=MAX_EPOCHS)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0


class FusionHeadConfig(BaseModel):
    strategy: Strategy
    in_features: int = Field(..., ge=1)
    n_classes: int = Field(..., ge=2)


class PairedSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    surface_patch: PatchRecord
    section_patch: PatchRecord
    label: ClassLabel

    @model_validator(mode="after")
    def check_labels(self) -> "PairedSample":
        if self.surface_patch.label != self.label or self.section_patch.label != self.label:
            raise ValueError("Both views of a pair must carry the pair label")
        return self


class FusionRun(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    state: ModelState
    metrics: MetricsRow
    fused_dim: int
    epochs_run: int
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray


class FusionHead(nn.Module):
    """Single fully connected classification layer over the fused features.

    Inputs are standardised with the training-set statistics held in the
    ``feature_mean`` and ``feature_scale`` buffers, which travel with the
    checkpoint.
    """

    def __init__(self, config: FusionHeadConfig):
        super().__init__()
        self.register_buffer("feature_mean", torch.zeros(config.in_features))
        self.register_buffer("feature_scale", torch.ones(config.in_features))
        self.classifier = nn.Linear(config.in_features, config.n_classes)

    def fit_standardisation(self, fused: torch.Tensor) -> None:
        fused = fused.detach().to(self.feature_mean.dtype)
        self.feature_mean.copy_(fused.mean(dim=0))
        # constant features come out as zeros
        self.feature_scale.copy_(fused.std(dim=0, unbiased=False).clamp_min(STANDARDISE_EPS))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.classifier((fused - self.feature_mean) / self.feature_scale)


def fuse_concat(surface_emb: torch.Tensor, section_emb: torch.Tensor) -> torch.Tensor:
    """Surface entries first, then section entries."""
    return torch.cat([torch.as_tensor(surface_emb), torch.as_tensor(section_emb)], dim=-1)


def fuse_stack_maxpool(surface_feat: torch.Tensor, section_feat: torch.Tensor) -> torch.Tensor:
    """Stack (H, W, C) maps on a view axis, max over views, then max over channels to (H, W, 1).

    Leading batch axes are kept.
    """
    surface_feat = torch.as_tensor(surface_feat)
    section_feat = torch.as_tensor(section_feat)
    if surface_feat.shape != section_feat.shape:
        raise RejectedInputError(
            f"View feature maps differ: {tuple(surface_feat.shape)} vs {tuple(section_feat.shape)}"
        )
    stacked = torch.stack([surface_feat, section_feat], dim=-1)
    return stacked.amax(dim=-1).amax(dim=-1, keepdim=True)


def make_paired_samples(
    surface: Sequence[PatchRecord], section: Sequence[PatchRecord], seed: int
) -> List[PairedSample]:
    """Every surface patch gets a seeded random section patch of the same class."""
    by_class: Dict[int, List[PatchRecord]] = {}
    for patch in section:
        by_class.setdefault(patch.label.index, []).append(patch)
    rng = np.random.default_rng(seed)
    pairs = []
    for patch in surface:
        partners = by_class.get(patch.label.index)
        if not partners:
            raise ConfigurationError(f"No section patch of class {patch.label.name} to pair with")
        partner = partners[rng.integers(len(partners))]
        pairs.append(PairedSample(surface_patch=patch, section_patch=partner, label=patch.label))
    return pairs


def _frozen(directory: Path) -> ModelState:
    if not Path(directory).exists():
        raise FileNotFoundError(f"Per-view checkpoint not found: {directory}")
    state = load_checkpoint(directory)
    state.network.eval()
    state.network.requires_grad_(False)
    return state


def _view_features(state: ModelState, patches: Sequence[PatchRecord], strategy: Strategy) -> torch.Tensor:
    if strategy == "concat":
        return embed_patches(state, patches)[0]
    return penultimate_features(state, patches)


def _fuse(surface: torch.Tensor, section: torch.Tensor, strategy: Strategy) -> torch.Tensor:
    if strategy == "concat":
        return fuse_concat(surface, section)
    return fuse_stack_maxpool(surface, section).flatten(start_dim=1)


def _repair_within_class(labels: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    # new same-class section partner for every surface patch, one draw per epoch
    rng = np.random.default_rng([seed, epoch])
    partner = np.arange(labels.size)
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        partner[members] = rng.permutation(members)
    return partner


def train_fusion(
    pairs: Sequence[PairedSample], cfg: FusionConfig, test_pairs: Sequence[PairedSample]
) -> FusionRun:
    """Trains a classification head on fused features from two frozen per-view students."""
    surface_state = _frozen(cfg.surface_checkpoint)
    section_state = _frozen(cfg.section_checkpoint)
    n_classes = surface_state.config.n_classes
    if section_state.config.n_classes != n_classes:
        raise ConfigurationError("Per-view models disagree on the number of classes")

    def features(selected: Sequence[PairedSample]) -> Tuple[torch.Tensor, torch.Tensor, np.ndarray]:
        surface = _view_features(surface_state, [p.surface_patch for p in selected], cfg.strategy)
        section = _view_features(section_state, [p.section_patch for p in selected], cfg.strategy)
        return surface, section, np.array([p.label.index for p in selected])

    train_surface, train_section, train_labels = features(pairs)
    test_surface, test_section, test_labels = features(test_pairs)
    fused_dim = _fuse(train_surface[:1], train_section[:1], cfg.strategy).shape[1]

    torch.manual_seed(cfg.seed)
    head_config = FusionHeadConfig(strategy=cfg.strategy, in_features=fused_dim, n_classes=n_classes)
    head = FusionHead(head_config)
    head.fit_standardisation(_fuse(train_surface, train_section, cfg.strategy))
    optimizer = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate)
    targets = torch.from_numpy(train_labels).long()
    curve = []

    for epoch in range(1, cfg.epochs + 1):
        head.train()
        partner = torch.from_numpy(_repair_within_class(train_labels, cfg.seed, epoch))
        fused = _fuse(train_surface, train_section[partner], cfg.strategy)
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(train_labels))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            rows = torch.from_numpy(order[start : start + cfg.batch_size])
            loss = nn.functional.cross_entropy(head(fused[rows]), targets[rows])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        curve.append((epoch, float(np.mean(losses))))
        logging.info(f"[fusion/{cfg.strategy}] epoch {epoch}/{cfg.epochs} loss={curve[-1][1]:.6f}")

    head.eval()
    train_fused = _fuse(train_surface, train_section, cfg.strategy)
    test_fused = _fuse(test_surface, test_section, cfg.strategy)
    with torch.no_grad():
        predicted = head(test_fused).argmax(dim=1).numpy()

    state = ModelState(
        config=head_config,
        network=head,
        training_meta=TrainingMeta(seed=cfg.seed, epoch=cfg.epochs, loss_curve=curve),
    )
    return FusionRun(
        state=state,
        metrics=compute_metrics(test_labels, predicted, n_classes, seed=cfg.seed),
        fused_dim=fused_dim,
        epochs_run=len(curve),
        train_features=train_fused.double().numpy(),
        train_labels=train_labels,
        test_features=test_fused.double().numpy(),
        test_labels=test_labels,
    )


def load_fusion_checkpoint(directory: Path) -> ModelState:
    header, meta, parameters = read_checkpoint_files(directory)
    if header["kind"] != "fusionhead":
        raise RejectedInputError(f"Checkpoint in {directory} holds a {header['kind']} model")
    config = FusionHeadConfig(**header["config"])
    head = FusionHead(config)
    head.load_state_dict(parameters)
    return ModelState(config=config, network=head, training_meta=meta)
