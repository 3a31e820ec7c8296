import logging
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import polars as pl  # noqa: E402
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator  # noqa: E402
from scipy.spatial.distance import cdist  # noqa: E402
from scipy.stats import t as student_t  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402
from sklearn.metrics import accuracy_score, precision_recall_fscore_support  # noqa: E402

from guided_dml.datapipe.main import PatchRecord  # noqa: E402
from guided_dml.errors import RejectedInputError  # noqa: E402
from guided_dml.models.main import ModelState, class_indices, embed_patches  # noqa: E402

METRICS = ("accuracy", "precision", "recall", "f1")
RECALL_TOLERANCE = 1e-12


class Provenance(BaseModel):
    model_id: str
    seed: int
    embedding_dim: int


class EmbeddingSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    embeddings: np.ndarray
    labels: np.ndarray
    split: Literal["train", "test"]
    provenance: Provenance
    n_classes: int = Field(..., ge=1)

    @model_validator(mode="after")
    def check_contents(self) -> "EmbeddingSet":
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError(f"Embeddings must be a non-empty N x D matrix, got {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("Embeddings hold NaN or Inf entries")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("One label per embedding is required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"Labels must lie in [0, {self.n_classes})")
        return self

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


class MetricsRow(BaseModel):
    accuracy: float = Field(..., ge=0.0, le=1.0)
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    k: Optional[int] = None
    embedding_dim: Optional[int] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_recall_identity(self) -> "MetricsRow":
        if abs(self.recall - self.accuracy) > RECALL_TOLERANCE:
            raise ValueError(f"Weighted recall {self.recall} differs from accuracy {self.accuracy}")
        return self


class MetricsReport(BaseModel):
    accuracy: float = Field(..., ge=0.0, le=1.0)
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    per_seed: List[MetricsRow]
    ci95_halfwidth: Dict[str, float]
    k: Optional[int] = None
    embedding_dim: Optional[int] = None


class SweepGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embedding_dims: List[int] = Field(..., min_length=1)
    k_values: List[int] = Field(..., min_length=1)
    seeds: List[int] = Field(..., min_length=2)

    @field_validator("k_values")
    @classmethod
    def check_k(cls, values: List[int]) -> List[int]:
        if any(k < 1 for k in values):
            raise ValueError(f"k values must be >= 1, got {values}")
        return values


def embedding_set(
    state: ModelState,
    patches: Sequence[PatchRecord],
    split: Literal["train", "test"],
    model_id: str,
    seed: int,
) -> EmbeddingSet:
    if state.kind == "teacher":
        # teacher routing needs the true label, so its embeddings leak the class
        raise RejectedInputError("Teacher embeddings depend on the label; use held_out_triplet_stats instead")
    embeddings, _ = embed_patches(state, patches)
    return EmbeddingSet(
        embeddings=embeddings.double().numpy(),
        labels=class_indices(patches).numpy(),
        split=split,
        provenance=Provenance(model_id=model_id, seed=seed, embedding_dim=embeddings.shape[1]),
        n_classes=state.config.n_classes,
    )


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int) -> np.ndarray:
    """Uniform-vote Euclidean k-NN.

    k is clamped to the train size. Ties between classes go to the tied class
    whose member appears first in the neighbour ranking.
    """
    if k < 1:
        raise RejectedInputError(f"k must be >= 1, got {k}")
    if train.dim != test.dim:
        raise RejectedInputError(f"Train has {train.dim} dims, test has {test.dim}")
    if train.embeddings.shape[0] == 0:
        raise RejectedInputError("Empty train set")

    k_effective = min(k, train.embeddings.shape[0])
    n_classes = max(train.n_classes, test.n_classes)
    distances = cdist(test.embeddings, train.embeddings)
    neighbours = np.argsort(distances, axis=1, kind="stable")[:, :k_effective]

    predictions = np.empty(test.embeddings.shape[0], dtype=np.int64)
    for row, ranked in enumerate(neighbours):
        ranked_labels = train.labels[ranked]
        votes = np.bincount(ranked_labels, minlength=n_classes)
        tied = votes == votes.max()
        predictions[row] = next(label for label in ranked_labels if tied[label])
    return predictions


def compute_metrics(
    true_labels: Sequence[int],
    predicted_labels: Sequence[int],
    n_classes: int,
    k: Optional[int] = None,
    embedding_dim: Optional[int] = None,
    seed: Optional[int] = None,
) -> MetricsRow:
    """Accuracy plus support-weighted precision, recall and F1."""
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape or true_labels.size == 0:
        raise RejectedInputError("Label vectors must be non-empty and of equal length")
    for labels in (true_labels, predicted_labels):
        if labels.min() < 0 or labels.max() >= n_classes:
            raise RejectedInputError(f"Labels must lie in [0, {n_classes})")

    precision, recall, f1, _ = precision_recall_fscore_support(
        true_labels,
        predicted_labels,
        labels=list(range(n_classes)),
        average="weighted",
        zero_division=0,
    )
    return MetricsRow(
        accuracy=float(accuracy_score(true_labels, predicted_labels)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        k=k,
        embedding_dim=embedding_dim,
        seed=seed,
    )


def confidence_interval(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and Student-t 95% half-width with n - 1 degrees of freedom."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise RejectedInputError(f"A confidence interval needs at least 2 values, got {values.size}")
    quantile = student_t.ppf(0.975, values.size - 1)
    halfwidth = quantile * values.std(ddof=1) / np.sqrt(values.size)
    return float(values.mean()), float(halfwidth)


def aggregate_seeds(per_seed_metrics: Sequence[MetricsRow]) -> MetricsReport:
    if len(per_seed_metrics) < 2:
        raise RejectedInputError(
            f"Seed aggregation needs at least 2 runs, got {len(per_seed_metrics)}"
        )
    means, halfwidths = {}, {}
    for metric in METRICS:
        means[metric], halfwidths[metric] = confidence_interval(
            [getattr(row, metric) for row in per_seed_metrics]
        )
    first = per_seed_metrics[0]
    return MetricsReport(
        **means,
        per_seed=list(per_seed_metrics),
        ci95_halfwidth=halfwidths,
        k=first.k,
        embedding_dim=first.embedding_dim,
    )


def pca_project(embedding_set: EmbeddingSet, out_dim: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Projection on the top principal components and their explained-variance ratios.

    Each component is signed so that its largest-magnitude loading is positive.
    """
    n_samples, n_features = embedding_set.embeddings.shape
    if n_samples < out_dim or n_features < out_dim:
        raise RejectedInputError(
            f"PCA to {out_dim} dims needs at least {out_dim} samples and features, got {n_samples}x{n_features}"
        )
    pca = PCA(n_components=out_dim, svd_solver="full")
    projection = pca.fit_transform(embedding_set.embeddings)
    components = pca.components_
    leading = components[np.arange(out_dim), np.abs(components).argmax(axis=1)]
    signs = np.where(leading < 0, -1.0, 1.0)
    return projection * signs, pca.explained_variance_ratio_


def report_row(report: MetricsReport, model: str, view: str) -> Dict:
    row = {
        "model": model,
        "view": view,
        "embedding_dim": report.embedding_dim,
        "k": report.k,
        "n_seeds": len(report.per_seed),
    }
    for metric in METRICS:
        row[metric] = getattr(report, metric)
        row[f"{metric}_ci95"] = report.ci95_halfwidth[metric]
    return row


def sweep(
    train_fn: Callable[[int, int], Tuple[EmbeddingSet, EmbeddingSet]],
    eval_grid: SweepGrid,
    model: str = "student",
    view: str = "SUR",
) -> pl.DataFrame:
    """One aggregated row per (embedding_dim, k); ``train_fn(dim, seed)`` returns (train, test) sets."""
    rows = []
    for dim in eval_grid.embedding_dims:
        per_k: Dict[int, List[MetricsRow]] = {k: [] for k in eval_grid.k_values}
        for seed in eval_grid.seeds:
            train_set, test_set = train_fn(dim, seed)
            for k in eval_grid.k_values:
                predicted = knn_classify(train_set, test_set, k)
                per_k[k].append(
                    compute_metrics(test_set.labels, predicted, test_set.n_classes, k, dim, seed)
                )
        for k in eval_grid.k_values:
            rows.append(report_row(aggregate_seeds(per_k[k]), model, view))
        logging.info(f"[{model}/{view}] swept embedding_dim={dim}")
    return pl.DataFrame(rows)


def scatter_frame(
    projection: np.ndarray,
    labels: np.ndarray,
    split: str,
    class_names: Optional[Sequence[str]] = None,
) -> pl.DataFrame:
    names = [class_names[label] if class_names else str(label) for label in labels.tolist()]
    return pl.DataFrame(
        {
            "x": projection[:, 0].tolist(),
            "y": projection[:, 1].tolist(),
            "label": names,
            "split": [split] * len(names),
        }
    )


def plot_pca_scatter(scatter: pl.DataFrame, path: Path, title: str = "") -> Path:
    splits = scatter["split"].unique(maintain_order=True).to_list()
    figure, axes = plt.subplots(1, len(splits), figsize=(6 * len(splits), 5), squeeze=False)
    for axis, split in zip(axes[0], splits):
        subset = scatter.filter(pl.col("split") == split)
        for label in sorted(subset["label"].unique().to_list()):
            points = subset.filter(pl.col("label") == label)
            axis.scatter(points["x"].to_list(), points["y"].to_list(), s=8, alpha=0.7, label=label)
        axis.set_title(f"{title} {split}".strip())
        axis.set_xlabel("Principal dim 1")
        axis.set_ylabel("Principal dim 2")
        axis.legend(fontsize=8)
    figure.tight_layout()
    figure.savefig(path, bbox_inches="tight")
    plt.close(figure)
    return path


def plot_recall_curves(recall: pl.DataFrame, path: Path, title: str = "") -> Path:
    """Recall against k, one curve per embedding size."""
    figure, axis = plt.subplots(figsize=(7, 5))
    for dim in sorted(recall["embedding_dim"].unique().to_list()):
        curve = recall.filter(pl.col("embedding_dim") == dim).sort("k")
        axis.plot(curve["k"].to_list(), (curve["recall"] * 100).to_list(), marker="o", label=f"size={dim}")
    axis.set_xscale("log")
    axis.set_xlabel("k")
    axis.set_ylabel("Recall (%)")
    axis.set_title(title)
    axis.legend(fontsize=8)
    figure.tight_layout()
    figure.savefig(path, bbox_inches="tight")
    plt.close(figure)
    return path
