"""Weighted multi-level reblurring of a deblurred image and the reblur loss."""
from __future__ import annotations

from typing import List

import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError
from .kernels import IsotropicKernelBank, class_indicator


# upper bound on unfolded elements held at once; larger images are processed in row strips
GATHER_BUDGET = 1 << 25


def apply_kernel_level(image: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Spatially varying gather-correlation with replicate padding.

    ``image`` is ``(B, C, H, W)``; ``kernels`` is ``(B, K*K, H, W)`` with cells
    in row-major ``(dy, dx)`` order.  Output pixel (y, x) is
    ``sum k[y, x](dy, dx) * image[y + dy, x + dx]``.
    """
    b, c, h, w = image.shape
    if kernels.dim() != 4 or kernels.shape[0] != b or kernels.shape[-2:] != (h, w):
        raise ShapeError(f"kernel field {tuple(kernels.shape)} does not match image {tuple(image.shape)}")
    cells = kernels.shape[1]
    k = int(round(cells ** 0.5))
    if k * k != cells or k % 2 == 0:
        raise ShapeError(f"kernel field has {cells} cells, not an odd square")
    r = k // 2
    padded = F.pad(image, (r, r, r, r), mode="replicate")
    rows = max(1, min(h, GATHER_BUDGET // max(1, b * c * cells * w)))
    strips = []
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        patches = F.unfold(padded[:, :, y0:y1 + 2 * r], k).view(b, c, cells, y1 - y0, w)
        strips.append((patches * kernels[:, None, :, y0:y1]).sum(dim=2))
    return strips[0] if len(strips) == 1 else torch.cat(strips, dim=2)


def apply_isotropic_level(image: torch.Tensor, class_values: torch.Tensor, i: int) -> torch.Tensor:
    """Same result as :func:`apply_kernel_level` for radially symmetric kernels.

    The image is first summed over each ring of equal radius with a fixed
    0/1 convolution; the per-pixel kernel then only weights the rings.
    """
    b, c, h, w = image.shape
    rings = class_indicator(i, image.dtype, image.device)
    n = rings.shape[0]
    if class_values.shape != (b, n, h, w):
        raise ShapeError(f"class values {tuple(class_values.shape)} do not match image {tuple(image.shape)} "
                         f"with {n} radius classes")
    r = i - 1
    padded = F.pad(image, (r, r, r, r), mode="replicate").reshape(1, b * c, h + 2 * r, w + 2 * r)
    # grouped form: one group per image channel, n ring filters each
    ring_sums = F.conv2d(padded, rings.repeat(b * c, 1, 1, 1), groups=b * c).view(b, c, n, h, w)
    return (ring_sums * class_values[:, None]).sum(dim=2)


def apply_bank_level(image: torch.Tensor, bank: IsotropicKernelBank, i: int) -> torch.Tensor:
    if getattr(bank, "isotropic", False):
        return apply_isotropic_level(image, bank.class_values(i), i)
    return apply_kernel_level(image, bank.kernels(i))


def assemble_reblur_stack(image: torch.Tensor, bank: IsotropicKernelBank) -> List[torch.Tensor]:
    """``[image, blur_2(image), ..., blur_m(image)]``; level 1 is the input itself."""
    if tuple(image.shape[-2:]) != bank.spatial_shape:
        raise ShapeError(f"kernel bank extent {bank.spatial_shape} does not match image {tuple(image.shape[-2:])}")
    stack = [image]
    for i in bank.levels:
        stack.append(apply_bank_level(image, bank, i))
    return stack


def normalize_weights(raw: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the level axis of a ``(B, m, H, W)`` map."""
    if not torch.isfinite(raw).all():
        bad = (~torch.isfinite(raw)).nonzero()[0].tolist()
        raise NumericError(f"non-finite raw weight at index {bad}")
    return torch.softmax(raw, dim=1)


def combine(stack: List[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    if weights.shape[1] != len(stack):
        raise ShapeError(f"{weights.shape[1]} weight maps for {len(stack)} reblur levels")
    ref = stack[0].shape
    if weights.shape[0] != ref[0] or weights.shape[-2:] != ref[-2:]:
        raise ShapeError(f"weights {tuple(weights.shape)} do not match stack levels {tuple(ref)}")
    out = torch.zeros_like(stack[0])
    for idx, level in enumerate(stack):
        if level.shape != ref:
            raise ShapeError(f"reblur level {idx + 1} has shape {tuple(level.shape)}, expected {tuple(ref)}")
        out = out + weights[:, idx:idx + 1] * level
    return out


def charbonnier(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-3, reduction: str = "mean") -> torch.Tensor:
    """Charbonnier penalty.

    ``reduction="mean"`` averages ``sqrt(r^2 + eps^2)`` over all elements;
    ``"global"`` takes one square root per sample over the summed squared
    residual, ``sqrt(||r||^2 + eps^2)``, and averages over the batch.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    if reduction == "mean":
        return torch.sqrt(diff * diff + eps * eps).mean()
    if reduction == "global":
        sq = (diff * diff).flatten(1).sum(dim=1) if diff.dim() > 1 else (diff * diff).sum()
        return torch.sqrt(sq + eps * eps).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def reblur_loss(reblurred: torch.Tensor, blurry: torch.Tensor, eps: float = 1e-3, reduction: str = "mean") -> torch.Tensor:
    return charbonnier(reblurred, blurry, eps, reduction)


def reblur(image: torch.Tensor, bank: IsotropicKernelBank, raw_weights: torch.Tensor) -> torch.Tensor:
    """Full reblur operator: stack all levels, then blend with softmax weights."""
    return combine(assemble_reblur_stack(image, bank), normalize_weights(raw_weights))
