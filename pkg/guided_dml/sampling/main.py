import json
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from guided_dml.datapipe.main import PatchRecord
from guided_dml.errors import RejectedInputError, SamplingError

Seed = Union[int, Sequence[int]]


class Triplet(BaseModel):
    model_config = ConfigDict(frozen=True)

    anchor: PatchRecord
    positive: PatchRecord
    negative: PatchRecord

    @model_validator(mode="after")
    def check_labels(self) -> "Triplet":
        if self.anchor.label is None or self.negative.label is None:
            raise ValueError("Triplets require labelled patches")
        if self.anchor.label != self.positive.label:
            raise ValueError("Anchor and positive must share a class")
        if self.negative.label == self.anchor.label:
            raise ValueError("Negative must come from another class")
        if self.anchor.patch_id == self.positive.patch_id:
            raise ValueError("Anchor and positive must be distinct patches")
        return self


class TripletBatch(BaseModel):
    model_config = ConfigDict(frozen=True)

    triplets: List[Triplet] = Field(..., min_length=1)
    batch_id: int


class Pair(NamedTuple):
    first: PatchRecord
    second: PatchRecord
    same_class: bool


def group_by_class(patches: Sequence[PatchRecord]) -> Dict[int, List[PatchRecord]]:
    groups: Dict[int, List[PatchRecord]] = {}
    for patch in patches:
        if patch.label is None:
            raise SamplingError(f"Patch {patch.patch_id} has no label")
        groups.setdefault(patch.label.index, []).append(patch)
    return dict(sorted(groups.items()))


def _class_name(groups: Dict[int, List[PatchRecord]], class_index: int) -> str:
    return groups[class_index][0].label.name


def make_triplets(split: Sequence[PatchRecord], n_triplets: int, seed: Seed) -> List[Triplet]:
    """Uniform class for the anchor, then uniform positive and negative.

    Classes with a single patch can only serve as negatives.
    """
    groups = group_by_class(split)
    if len(groups) < 2:
        only = next(iter(groups), None)
        name = _class_name(groups, only) if only is not None else "<empty>"
        raise SamplingError(f"No negative available for class {name}: split has a single class")
    anchor_classes = [index for index, members in groups.items() if len(members) >= 2]
    if not anchor_classes:
        raise SamplingError(
            f"No positive available: every class has one patch ({[_class_name(groups, i) for i in groups]})"
        )

    others = {
        anchor_class: [p for index, group in groups.items() if index != anchor_class for p in group]
        for anchor_class in anchor_classes
    }
    rng = np.random.default_rng(seed)
    triplets = []
    for _ in range(n_triplets):
        anchor_class = anchor_classes[rng.integers(len(anchor_classes))]
        members = groups[anchor_class]
        anchor_at, positive_at = rng.choice(len(members), size=2, replace=False)
        negative = others[anchor_class][rng.integers(len(others[anchor_class]))]
        triplets.append(
            Triplet(anchor=members[anchor_at], positive=members[positive_at], negative=negative)
        )
    return triplets


def make_triplet_batches(
    split: Sequence[PatchRecord], n_triplets: int, batch_size: int, seed: int, epoch: int = 0
) -> List[TripletBatch]:
    batches = []
    n_batches = -(-n_triplets // batch_size)
    for batch_id in range(n_batches):
        size = min(batch_size, n_triplets - batch_id * batch_size)
        batches.append(
            TripletBatch(
                triplets=make_triplets(split, size, seed=[seed, epoch, batch_id]),
                batch_id=batch_id,
            )
        )
    return batches


def make_pairs(
    split: Sequence[PatchRecord], n_pairs: int, seed: Seed, positive_fraction: float = 0.5
) -> List[Pair]:
    groups = group_by_class(split)
    positive_classes = [index for index, members in groups.items() if len(members) >= 2]
    if positive_fraction > 0 and not positive_classes:
        raise SamplingError("No class has two patches, positive pairs cannot be drawn")
    if positive_fraction < 1 and len(groups) < 2:
        name = _class_name(groups, next(iter(groups))) if groups else "<empty>"
        raise SamplingError(f"No negative available for class {name}: split has a single class")

    rng = np.random.default_rng(seed)
    classes = list(groups)
    pairs = []
    for _ in range(n_pairs):
        if rng.random() < positive_fraction:
            members = groups[positive_classes[rng.integers(len(positive_classes))]]
            first, second = rng.choice(len(members), size=2, replace=False)
            pairs.append(Pair(members[first], members[second], True))
        else:
            first_class, second_class = rng.choice(classes, size=2, replace=False)
            first = groups[first_class][rng.integers(len(groups[first_class]))]
            second = groups[second_class][rng.integers(len(groups[second_class]))]
            pairs.append(Pair(first, second, False))
    return pairs


def mine_semi_hard(
    anchor_emb, positive_emb, negative_embs, margin: float
) -> Optional[int]:
    """Index of the closest negative with d(a,p) < d(a,n) < d(a,p) + margin, else None."""
    if margin <= 0:
        raise RejectedInputError(f"margin must be positive, got {margin}")
    negatives = torch.as_tensor(np.asarray(negative_embs, dtype=np.float64))
    if negatives.numel() == 0:
        raise RejectedInputError("Semi-hard mining needs at least one negative")
    anchor = torch.as_tensor(np.atleast_1d(np.asarray(anchor_emb, dtype=np.float64))).reshape(1, -1)
    positive = torch.as_tensor(np.atleast_1d(np.asarray(positive_emb, dtype=np.float64))).reshape(1, -1)
    dim = anchor.shape[1]
    if negatives.ndim == 1 and dim == 1:
        negatives = negatives.reshape(-1, 1)
    if anchor.shape != positive.shape or negatives.ndim != 2 or negatives.shape[1] != dim:
        raise RejectedInputError(
            f"Anchor, positive and negatives must share one dimension, got {tuple(anchor.shape)}, "
            f"{tuple(positive.shape)} and {tuple(negatives.shape)}"
        )

    d_ap = torch.linalg.vector_norm(anchor - positive, dim=-1)
    d_an = torch.linalg.vector_norm(negatives - anchor, dim=-1)
    qualifying = (d_an > d_ap) & (d_an < d_ap + margin)
    if not bool(qualifying.any()):
        return None
    masked = torch.where(qualifying, d_an, torch.full_like(d_an, float("inf")))
    return int(torch.argmin(masked))


def mine_semi_hard_batch(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    anchor_index: torch.Tensor,
    positive_index: torch.Tensor,
    fallback_index: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """Semi-hard negative per (anchor, positive) among all other-class rows of ``embeddings``."""
    detached = embeddings.detach()
    negatives = []
    for anchor, positive, fallback in zip(
        anchor_index.tolist(), positive_index.tolist(), fallback_index.tolist()
    ):
        candidates = torch.nonzero(labels != labels[anchor]).flatten()
        chosen = mine_semi_hard(
            detached[anchor].numpy(), detached[positive].numpy(), detached[candidates].numpy(), margin
        )
        negatives.append(fallback if chosen is None else int(candidates[chosen]))
    return torch.tensor(negatives, dtype=torch.long)


def dump_batch_manifest(batches: Sequence[TripletBatch], path: Path) -> None:
    manifest = [
        {
            "batch_id": batch.batch_id,
            "triplets": [
                [t.anchor.patch_id, t.positive.patch_id, t.negative.patch_id] for t in batch.triplets
            ],
        }
        for batch in batches
    ]
    with open(path, "w") as file:
        json.dump(manifest, file, indent=2)
