"""Functional layer kernels used by the OFCN and the classifier.

All image tensors are NCHW ``torch.Tensor`` objects. Every function is pure
with respect to its inputs; batch normalisation returns the running-stat
update instead of mutating parameters in place.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
SE_RATIO = 8


class LayerError(ValueError):
    pass


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Same-padded, stride-1 convolution with zero fill."""
    if x.shape[1] != weight.shape[1]:
        raise LayerError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}"
        )
    k = weight.shape[-1]
    if k % 2 == 0:
        raise LayerError("conv2d kernels must have odd spatial size")
    return F.conv2d(x, weight, bias, stride=1, padding=k // 2)


def max_pool2(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise LayerError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    # torch routes the gradient to the first row-major maximum of each window
    return F.max_pool2d(x, 2, 2)


def batch_norm(
    x: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor] | None]:
    """Channel-wise batch normalisation over every axis except axis 1.

    Returns the normalised tensor and, in training mode, the new
    ``(running_mean, running_var)`` pair (Keras-style momentum: the old value
    keeps weight ``momentum``; the running variance uses the unbiased batch
    variance).
    """
    shape = [1, -1] + [1] * (x.dim() - 2)
    if training:
        count = x.numel() // x.shape[1]
        if count < 2:
            raise LayerError("batch_norm in training mode needs at least 2 values per channel")
        # fused kernel; torch's momentum is the weight of the new batch statistic
        new_mean, new_var = running_mean.detach().clone(), running_var.detach().clone()
        y = F.batch_norm(x, new_mean, new_var, scale, shift, True, 1.0 - momentum, eps)
        return y, (new_mean, new_var)
    if torch.isnan(running_mean).any() or torch.isnan(running_var).any():
        raise LayerError("batch_norm running statistics are uninitialised")
    xhat = (x - running_mean.reshape(shape)) / torch.sqrt(running_var.reshape(shape) + eps)
    return xhat * scale.reshape(shape) + shift.reshape(shape), None


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise LayerError(f"dense dimension mismatch: input {x.shape[-1]}, weights {tuple(weight.shape)}")
    y = x @ weight
    return y if bias is None else y + bias


def squeeze_excitation(
    x: torch.Tensor,
    reduce_w: torch.Tensor,
    expand_w: torch.Tensor,
    reduce_b: torch.Tensor | None = None,
    expand_b: torch.Tensor | None = None,
) -> torch.Tensor:
    c = x.shape[1]
    if reduce_w.shape[0] != c or expand_w.shape[1] != c:
        raise LayerError(f"SE weights do not match {c} channels")
    squeezed = x.mean(dim=(2, 3))
    hidden = torch.relu(dense(squeezed, reduce_w, reduce_b))
    gate = torch.sigmoid(dense(hidden, expand_w, expand_b))
    return x * gate[:, :, None, None]


def se_gate(x, reduce_w, expand_w, reduce_b=None, expand_b=None) -> torch.Tensor:
    hidden = torch.relu(dense(x.mean(dim=(2, 3)), reduce_w, reduce_b))
    return torch.sigmoid(dense(hidden, expand_w, expand_b))


def bilinear_upsample2(x: torch.Tensor) -> torch.Tensor:
    """2x bilinear upsampling, half-pixel (align-corners-false) convention."""
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise LayerError("bilinear_upsample2 needs a non-empty input")
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def dropout(
    x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    if not 0.0 <= rate < 1.0:
        raise LayerError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def activation(x: torch.Tensor, kind: str, dim: int = -1) -> torch.Tensor:
    if kind == "relu":
        return torch.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "softmax":
        shifted = x - x.max(dim=dim, keepdim=True).values.detach()
        e = torch.exp(shifted)
        return e / e.sum(dim=dim, keepdim=True)
    raise LayerError(f"unknown activation {kind!r}")
