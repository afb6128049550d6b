"""Segmentation and classification objectives.

Every loss returns a 0-d tensor and is differentiable with respect to its
prediction argument. Probabilities are clamped to ``[EPS, 1 - EPS]`` before
taking logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7
LOSS_KINDS = ("weighted_bce", "focal", "jaccard", "lovasz", "categorical_ce")


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    kind: str = "weighted_bce"
    class_weight: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss {self.kind!r}")
        if self.class_weight < 1:
            raise LossError("class_weight must be >= 1")
        if not 0 < self.alpha <= 1:
            raise LossError("alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise LossError("gamma must be >= 0")


def _check(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")


def weighted_bce(pred: torch.Tensor, target: torch.Tensor, class_weight: float = 1.0) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(EPS, 1 - EPS)
    t = target.to(p.dtype)
    w = 1.0 + (class_weight - 1.0) * t
    return -(w * (t * torch.log(p) + (1 - t) * torch.log(1 - p))).mean()


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(EPS, 1 - EPS)
    t = target.to(p.dtype)
    p_t = t * p + (1 - t) * (1 - p)
    return -(alpha * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def jaccard_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - JAC`` with the soft intersection ``sum(X * Y)``."""
    _check(pred, target)
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    union = pred.abs().sum() + t.abs().sum() - inter
    return 1.0 - inter / (union + EPS)


def lovasz_grad(sorted_truth: torch.Tensor) -> torch.Tensor:
    """Discrete gradient of the Jaccard extension along a sorted error order."""
    gts = sorted_truth.sum()
    inter = gts - sorted_truth.cumsum(0)
    union = gts + (1 - sorted_truth).cumsum(0)
    jac = 1.0 - inter / union
    if jac.numel() > 1:
        jac = torch.cat([jac[:1], jac[1:] - jac[:-1]])
    return jac


def lovasz_hinge_flat(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    logits = logits.reshape(-1)
    t = target.reshape(-1).to(logits.dtype)
    if logits.numel() == 0:
        return logits.sum() * 0.0
    signs = 2.0 * t - 1.0
    errors = 1.0 - logits * signs
    errors_sorted, perm = torch.sort(errors, descending=True)
    grad = lovasz_grad(t[perm])
    return torch.dot(torch.relu(errors_sorted), grad)


def lovasz_loss(logits: torch.Tensor, target: torch.Tensor, per_image: bool = True) -> torch.Tensor:
    """Binary Lovasz hinge on pre-sigmoid margins.

    With ``per_image`` the loss is averaged over the leading batch axis,
    otherwise all pixels are pooled.
    """
    _check(logits, target)
    if per_image and logits.dim() > 1:
        return torch.stack([lovasz_hinge_flat(l, t) for l, t in zip(logits, target)]).mean()
    return lovasz_hinge_flat(logits, target)


def categorical_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum_k t_k log p_k``."""
    _check(pred, target)
    t = target.to(pred.dtype)
    if not torch.all((t == 0) | (t == 1)) or not torch.all(t.sum(dim=-1) == 1):
        raise LossError("categorical_ce target must be one-hot")
    p = pred.clamp(EPS, 1.0)
    return -(t * torch.log(p)).sum(dim=-1).mean()


def segmentation_loss(config: LossConfig, prob: torch.Tensor, logits: torch.Tensor, target: torch.Tensor):
    if config.kind == "weighted_bce":
        return weighted_bce(prob, target, config.class_weight)
    if config.kind == "focal":
        return focal_loss(prob, target, config.alpha, config.gamma)
    if config.kind == "jaccard":
        return jaccard_loss(prob, target)
    if config.kind == "lovasz":
        return lovasz_loss(logits, target)
    raise LossError(f"{config.kind} is not a segmentation loss")
