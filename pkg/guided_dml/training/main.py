import copy
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import polars as pl
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from guided_dml.datapipe.main import DatasetSplit, PatchRecord
from guided_dml.errors import ConfigurationError, TrainingError
from guided_dml.losses.main import (
    GeminiLossParams,
    HybridLossParams,
    Reduction,
    contrastive_loss,
    euclidean,
    gemini_loss,
    hybrid_loss_terms,
    triplet_margin_loss,
)
from guided_dml.models.main import (
    ModelState,
    StudentConfig,
    TeacherConfig,
    build_student,
    build_teacher,
    class_indices,
    embed_patches,
    patches_to_tensor,
    save_checkpoint,
    teacher_embed,
)
from guided_dml.sampling.main import (
    make_pairs,
    make_triplet_batches,
    make_triplets,
    mine_semi_hard_batch,
)

MAX_EPOCHS = 60
PROGRESS_FILE = "progress.pt"
BaselineKind = Literal["siamese", "triplet", "classifier"]
Curve = List[Tuple[int, float]]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    max_epochs: int = Field(20, ge=1, le=MAX_EPOCHS)
    batch_size: int = Field(32, ge=2)
    optimizer: Literal["adam"] = "adam"
    learning_rate: float = Field(1e-3, gt=0.0)
    triplets_per_epoch: Optional[int] = Field(None, ge=1)
    loss_reduction: Reduction = "mean"
    checkpoint_dir: Optional[Path] = None


class TrainRun(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: Dict
    seed: int
    max_epochs: int = Field(..., le=MAX_EPOCHS)
    optimizer: Dict
    loss_curve: Curve
    component_curves: Dict[str, Curve] = {}
    best_epoch: int
    state: ModelState

    @model_validator(mode="after")
    def check_curve(self) -> "TrainRun":
        if len(self.loss_curve) > self.max_epochs:
            raise ValueError("Loss curve is longer than max_epochs")
        if not all(math.isfinite(value) for _, value in self.loss_curve):
            raise ValueError("Loss curve holds non-finite values")
        return self


class DistillationTargets(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    targets: Dict[str, torch.Tensor]
    embedding_dim: int


class TripletStats(BaseModel):
    mean_margin: float
    accuracy: float


def _step(
    optimizer: torch.optim.Optimizer,
    loss: torch.Tensor,
    state: ModelState,
    run_cfg: RunConfig,
    epoch: int,
    batch_id: int,
) -> float:
    if not torch.isfinite(loss):
        snapshot = None
        if run_cfg.checkpoint_dir is not None:
            snapshot = save_checkpoint(state, Path(run_cfg.checkpoint_dir) / "diagnostic")
        logging.error(f"Non-finite loss at epoch {epoch}, batch {batch_id}; snapshot: {snapshot}")
        raise TrainingError(
            f"Non-finite loss at epoch {epoch}, batch {batch_id}", snapshot_dir=snapshot
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _fit(
    state: ModelState,
    run_cfg: RunConfig,
    config_snapshot: Dict,
    run_epoch: Callable[[int, torch.optim.Optimizer], Dict[str, float]],
) -> TrainRun:
    """Epoch-capped loop with per-epoch resumable progress; keeps the lowest-loss epoch."""
    network = state.network
    optimizer = torch.optim.Adam(network.parameters(), lr=run_cfg.learning_rate)
    curve: Curve = []
    components: Dict[str, Curve] = {}
    best_loss, best_epoch, best_state = math.inf, 0, None
    start_epoch = 1

    progress_path = None
    if run_cfg.checkpoint_dir is not None:
        progress_path = Path(run_cfg.checkpoint_dir) / "last" / PROGRESS_FILE
        if progress_path.exists():
            progress = torch.load(progress_path, weights_only=True)
            network.load_state_dict(progress["network"])
            optimizer.load_state_dict(progress["optimizer"])
            curve = [tuple(point) for point in progress["loss_curve"]]
            components = {
                name: [tuple(point) for point in points]
                for name, points in progress["components"].items()
            }
            best_loss, best_epoch = progress["best_loss"], progress["best_epoch"]
            best_state = progress["best_state"]
            start_epoch = progress["epoch"] + 1
            logging.info(f"Resuming from epoch {start_epoch} ({progress_path})")

    for epoch in range(start_epoch, run_cfg.max_epochs + 1):
        network.train()
        values = run_epoch(epoch, optimizer)
        loss = values.pop("loss")
        curve.append((epoch, loss))
        for name, value in values.items():
            components.setdefault(name, []).append((epoch, value))
        if loss < best_loss:
            best_loss, best_epoch = loss, epoch
            best_state = copy.deepcopy(network.state_dict())
        logging.info(f"[{state.kind}] epoch {epoch}/{run_cfg.max_epochs} loss={loss:.6f}")

        if progress_path is not None:
            progress_path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(
                {
                    "epoch": epoch,
                    "network": network.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "loss_curve": [list(point) for point in curve],
                    "components": {name: [list(p) for p in points] for name, points in components.items()},
                    "best_loss": best_loss,
                    "best_epoch": best_epoch,
                    "best_state": best_state,
                },
                progress_path,
            )

    if best_state is not None:
        network.load_state_dict(best_state)
    network.eval()
    state.training_meta.epoch = best_epoch
    state.training_meta.loss_curve = list(curve)
    return TrainRun(
        config=config_snapshot,
        seed=run_cfg.seed,
        max_epochs=run_cfg.max_epochs,
        optimizer={"method": run_cfg.optimizer, "learning_rate": run_cfg.learning_rate},
        loss_curve=curve,
        component_curves=components,
        best_epoch=best_epoch,
        state=state,
    )


def _require_classes(split: DatasetSplit) -> None:
    if len(split.class_labels) < 2:
        raise ConfigurationError("Training needs at least two classes in the split")


def _shuffled_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    return [order[start : start + batch_size] for start in range(0, n_items, batch_size)]


def train_teacher(
    split: DatasetSplit,
    teacher_cfg: TeacherConfig,
    loss_params: GeminiLossParams,
    run_cfg: RunConfig,
) -> TrainRun:
    _require_classes(split)
    state = build_teacher(teacher_cfg, run_cfg.seed)
    network = state.network
    n_triplets = run_cfg.triplets_per_epoch or len(split.train)

    def run_epoch(epoch: int, optimizer: torch.optim.Optimizer) -> Dict[str, float]:
        losses = []
        batches = make_triplet_batches(split.train, n_triplets, run_cfg.batch_size, run_cfg.seed, epoch)
        for batch in batches:
            size = len(batch.triplets)
            members = (
                [t.anchor for t in batch.triplets]
                + [t.positive for t in batch.triplets]
                + [t.negative for t in batch.triplets]
            )
            x = patches_to_tensor(members, teacher_cfg.patch_size)
            local, embedded = network(x, class_indices(members))
            loss = gemini_loss(
                local[:size],
                local[size : 2 * size],
                embedded[:size],
                embedded[size : 2 * size],
                embedded[2 * size :],
                loss_params,
                reduction=run_cfg.loss_reduction,
            )
            losses.append(_step(optimizer, loss, state, run_cfg, epoch, batch.batch_id))
        return {"loss": float(np.mean(losses))}

    snapshot = {"teacher": teacher_cfg.model_dump(mode="json"), "loss": loss_params.model_dump(mode="json")}
    return _fit(state, run_cfg, snapshot, run_epoch)


def compute_distillation_targets(teacher: ModelState, split: DatasetSplit) -> DistillationTargets:
    """Embeds every training patch with the frozen teacher, routed by its own class."""
    embeddings = teacher_embed(teacher, split.train)
    targets = {patch.patch_id: embedding for patch, embedding in zip(split.train, embeddings)}
    if len(targets) != len(split.train):
        raise ConfigurationError("Training patch ids are not unique")
    return DistillationTargets(targets=targets, embedding_dim=teacher.config.embedding_dim)


def train_student(
    split: DatasetSplit,
    targets: DistillationTargets,
    student_cfg: StudentConfig,
    loss_params: HybridLossParams,
    run_cfg: RunConfig,
) -> TrainRun:
    _require_classes(split)
    if targets.embedding_dim != student_cfg.embedding_dim:
        raise ConfigurationError(
            f"Teacher embeddings have {targets.embedding_dim} dims, student has {student_cfg.embedding_dim}"
        )
    missing = [patch.patch_id for patch in split.train if patch.patch_id not in targets.targets]
    if missing:
        raise ConfigurationError(f"{len(missing)} training patches have no teacher target: {missing[:5]}")

    state = build_student(student_cfg, run_cfg.seed)
    network = state.network
    patches = split.train

    def run_epoch(epoch: int, optimizer: torch.optim.Optimizer) -> Dict[str, float]:
        losses, distances, entropies = [], [], []
        for batch_id, rows in enumerate(_shuffled_batches(len(patches), run_cfg.batch_size, run_cfg.seed, epoch)):
            chunk = [patches[row] for row in rows]
            x = patches_to_tensor(chunk, student_cfg.patch_size)
            z_hat = torch.stack([targets.targets[patch.patch_id] for patch in chunk])
            z, logits = network(x)
            distance, cross_entropy = hybrid_loss_terms(
                z, z_hat, logits, class_indices(chunk), loss_params, reduction=run_cfg.loss_reduction
            )
            losses.append(_step(optimizer, distance + cross_entropy, state, run_cfg, epoch, batch_id))
            distances.append(float(distance.detach()))
            entropies.append(float(cross_entropy.detach()))
        return {
            "loss": float(np.mean(losses)),
            "distance": float(np.mean(distances)),
            "cross_entropy": float(np.mean(entropies)),
        }

    snapshot = {"student": student_cfg.model_dump(mode="json"), "loss": loss_params.model_dump(mode="json")}
    return _fit(state, run_cfg, snapshot, run_epoch)


def train_baseline(
    split: DatasetSplit,
    kind: BaselineKind,
    student_cfg: StudentConfig,
    margin: float,
    run_cfg: RunConfig,
) -> TrainRun:
    """Same backbone as the student, trained without a teacher.

    siamese: contrastive loss on random pairs; triplet: triplet margin loss
    with semi-hard negatives mined inside each batch; classifier: plain
    cross-entropy.
    """
    _require_classes(split)
    if margin <= 0:
        raise ConfigurationError(f"margin must be positive, got {margin}")
    state = build_student(student_cfg, run_cfg.seed)
    network = state.network
    patches = split.train
    n_batches = -(-len(patches) // run_cfg.batch_size)
    reduction = run_cfg.loss_reduction

    def siamese_loss(epoch: int, batch_id: int) -> torch.Tensor:
        pairs = make_pairs(patches, run_cfg.batch_size, seed=[run_cfg.seed, epoch, batch_id])
        x = patches_to_tensor([p.first for p in pairs] + [p.second for p in pairs], student_cfg.patch_size)
        embedded, _ = network(x)
        same = torch.tensor([p.same_class for p in pairs])
        return contrastive_loss(embedded[: len(pairs)], embedded[len(pairs) :], same, margin, reduction)

    def triplet_loss(epoch: int, batch_id: int) -> torch.Tensor:
        triplets = make_triplets(patches, run_cfg.batch_size, seed=[run_cfg.seed, epoch, batch_id])
        size = len(triplets)
        members = (
            [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
        )
        embedded, _ = network(patches_to_tensor(members, student_cfg.patch_size))
        negatives = mine_semi_hard_batch(
            embedded,
            class_indices(members),
            anchor_index=torch.arange(size),
            positive_index=torch.arange(size, 2 * size),
            fallback_index=torch.arange(2 * size, 3 * size),
            margin=margin,
        )
        return triplet_margin_loss(
            embedded[:size], embedded[size : 2 * size], embedded[negatives], margin, reduction
        )

    def classifier_loss(rows: np.ndarray) -> torch.Tensor:
        chunk = [patches[row] for row in rows]
        _, logits = network(patches_to_tensor(chunk, student_cfg.patch_size))
        return torch.nn.functional.cross_entropy(logits, class_indices(chunk), reduction=reduction)

    def run_epoch(epoch: int, optimizer: torch.optim.Optimizer) -> Dict[str, float]:
        losses = []
        if kind == "classifier":
            batches = _shuffled_batches(len(patches), run_cfg.batch_size, run_cfg.seed, epoch)
            for batch_id, rows in enumerate(batches):
                losses.append(_step(optimizer, classifier_loss(rows), state, run_cfg, epoch, batch_id))
        else:
            compute = siamese_loss if kind == "siamese" else triplet_loss
            for batch_id in range(n_batches):
                losses.append(_step(optimizer, compute(epoch, batch_id), state, run_cfg, epoch, batch_id))
        return {"loss": float(np.mean(losses))}

    if kind not in ("siamese", "triplet", "classifier"):
        raise ConfigurationError(f"Unknown baseline kind {kind!r}")
    snapshot = {"student": student_cfg.model_dump(mode="json"), "kind": kind, "margin": margin}
    return _fit(state, run_cfg, snapshot, run_epoch)


def held_out_triplet_stats(
    state: ModelState, patches: Sequence[PatchRecord], seed: int, n_triplets: int = 500
) -> TripletStats:
    """Mean d(a,n) - d(a,p) and the share of triplets with d(a,p) < d(a,n)."""
    if state.kind == "teacher":
        embeddings = teacher_embed(state, patches)
    else:
        embeddings, _ = embed_patches(state, patches)
    row_of = {patch.patch_id: row for row, patch in enumerate(patches)}
    triplets = make_triplets(patches, n_triplets, seed)

    def rows(role: str) -> torch.Tensor:
        return embeddings[[row_of[getattr(t, role).patch_id] for t in triplets]]

    anchor, positive, negative = rows("anchor"), rows("positive"), rows("negative")
    d_ap, d_an = euclidean(anchor, positive), euclidean(anchor, negative)
    return TripletStats(
        mean_margin=float((d_an - d_ap).mean()),
        accuracy=float((d_ap < d_an).double().mean()),
    )


def loss_curve_frame(run: TrainRun) -> pl.DataFrame:
    frame = pl.DataFrame(
        {"epoch": [epoch for epoch, _ in run.loss_curve], "loss": [value for _, value in run.loss_curve]}
    )
    for name, points in run.component_curves.items():
        frame = frame.with_columns(pl.Series(name, [value for _, value in points]))
    return frame
