from typing import Literal, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from guided_dml.errors import RejectedInputError

Reduction = Literal["sum", "mean"]


class GeminiLossParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(0.5, ge=0.0, le=1.0)
    margin_m: float = Field(1.0, gt=0.0)
    distance: Literal["euclidean"] = "euclidean"


class HybridLossParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.5, gt=0.0, lt=1.0)


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(a - b, dim=-1)


def _as_batch(*tensors: torch.Tensor) -> Tuple[torch.Tensor, ...]:
    # a single vector is a batch of one; scalars are one-dimensional embeddings
    batched = []
    for tensor in tensors:
        tensor = torch.as_tensor(tensor)
        if tensor.ndim == 0:
            tensor = tensor.reshape(1, 1)
        elif tensor.ndim == 1:
            tensor = tensor.unsqueeze(0)
        batched.append(tensor)
    return tuple(batched)


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(tensor.shape) for tensor in tensors}
    if len(shapes) != 1:
        raise RejectedInputError(f"Shape mismatch: {sorted(shapes)}")


def _check_margin(margin: float) -> None:
    if margin <= 0:
        raise RejectedInputError(f"margin must be positive, got {margin}")


def _reduce(values: torch.Tensor, reduction: Reduction) -> torch.Tensor:
    return values.sum() if reduction == "sum" else values.mean()


def gemini_loss(
    f_anchor: torch.Tensor,
    f_positive: torch.Tensor,
    g_anchor: torch.Tensor,
    g_positive: torch.Tensor,
    g_negative: torch.Tensor,
    params: GeminiLossParams,
    reduction: Reduction = "sum",
) -> torch.Tensor:
    """Local pull on stream outputs plus a hinge on the shared embedding.

    Per triplet: beta * d(f_a, f_p) + (1 - beta) * [M - d(g_a, g_n)]+ with
    M = d(g_a, g_p) + margin_m. Gradients flow through M.
    """
    f_anchor, f_positive, g_anchor, g_positive, g_negative = _as_batch(
        f_anchor, f_positive, g_anchor, g_positive, g_negative
    )
    _check_same_shape(f_anchor, f_positive)
    _check_same_shape(g_anchor, g_positive, g_negative)
    if f_anchor.shape[0] != g_anchor.shape[0]:
        raise RejectedInputError("Intermediate and embedding batches differ in length")

    local = euclidean(f_anchor, f_positive)
    margin = euclidean(g_anchor, g_positive) + params.margin_m
    hinge = torch.clamp(margin - euclidean(g_anchor, g_negative), min=0.0)
    return _reduce(params.beta * local + (1.0 - params.beta) * hinge, reduction)


def hybrid_loss_terms(
    z: torch.Tensor,
    z_hat: torch.Tensor,
    logits: torch.Tensor,
    y: torch.Tensor,
    params: HybridLossParams,
    reduction: Reduction = "sum",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns (gamma * distance term, cross-entropy term)."""
    z, z_hat, logits = _as_batch(z, z_hat, logits)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    _check_same_shape(z, z_hat)
    if not (z.shape[0] == logits.shape[0] == y.shape[0]):
        raise RejectedInputError("Embeddings, logits and labels differ in batch length")
    if bool(((y < 0) | (y >= logits.shape[1])).any()):
        raise RejectedInputError(f"Labels must lie in [0, {logits.shape[1]})")

    distance = params.gamma * euclidean(z, z_hat)
    cross_entropy = F.cross_entropy(logits, y, reduction="none")
    return _reduce(distance, reduction), _reduce(cross_entropy, reduction)


def hybrid_loss(
    z: torch.Tensor,
    z_hat: torch.Tensor,
    logits: torch.Tensor,
    y: torch.Tensor,
    params: HybridLossParams,
    reduction: Reduction = "sum",
) -> torch.Tensor:
    distance, cross_entropy = hybrid_loss_terms(z, z_hat, logits, y, params, reduction)
    return distance + cross_entropy


def contrastive_loss(
    e1: torch.Tensor,
    e2: torch.Tensor,
    same: torch.Tensor,
    margin: float = 1.0,
    reduction: Reduction = "sum",
) -> torch.Tensor:
    _check_margin(margin)
    e1, e2 = _as_batch(e1, e2)
    _check_same_shape(e1, e2)
    same = torch.as_tensor(same, dtype=torch.bool).reshape(-1)
    if same.shape[0] != e1.shape[0]:
        raise RejectedInputError("Pair flags and embeddings differ in batch length")

    distance = euclidean(e1, e2)
    pull = distance**2
    push = torch.clamp(margin - distance, min=0.0) ** 2
    return _reduce(torch.where(same, pull, push), reduction)


def triplet_margin_loss(
    e_a: torch.Tensor,
    e_p: torch.Tensor,
    e_n: torch.Tensor,
    margin: float = 1.0,
    reduction: Reduction = "sum",
) -> torch.Tensor:
    _check_margin(margin)
    e_a, e_p, e_n = _as_batch(e_a, e_p, e_n)
    _check_same_shape(e_a, e_p, e_n)
    hinge = torch.clamp(euclidean(e_a, e_p) - euclidean(e_a, e_n) + margin, min=0.0)
    return _reduce(hinge, reduction)
