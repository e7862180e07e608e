"""Flow-deformed deblurring loss with calibration masks and cycle deformation."""
from __future__ import annotations

import logging

import torch

from .errors import ShapeError
from .flow import flow_magnitude, warp

log = logging.getLogger(__name__)

# below this mean flow length (px) the pair is treated as aligned
ALIGNED_MEAN_FLOW = 0.05


def calibration_mask(flow: torch.Tensor, lam: float = 0.35, aligned_below: float = ALIGNED_MEAN_FLOW) -> torch.Tensor:
    """Binary ``(B, 1, H, W)`` mask of pixels whose flow length stays near the mean.

    A pixel is kept when ``(1 - lam) * mean < |flow| < (1 + lam) * mean``.
    Pairs whose mean flow length is below ``aligned_below`` get an all-ones
    mask.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError(f"mask band lambda must lie in (0, 1), got {lam}")
    mag = flow_magnitude(flow)
    mean = mag.flatten(1).mean(dim=1).view(-1, 1, 1)
    inside = (mag > (1.0 - lam) * mean) & (mag < (1.0 + lam) * mean)
    aligned = (mean < aligned_below).expand_as(inside)
    return (inside | aligned).unsqueeze(1).to(flow.dtype)


def masked_charbonnier(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Mean Charbonnier penalty over mask-selected elements (mask broadcast over channels)."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    penalty = torch.sqrt(diff * diff + eps * eps)
    mask = mask.expand_as(penalty)
    count = mask.sum()
    if count == 0:
        log.warning("calibration mask rejected every pixel; deblurring term falls back to eps")
        return pred.new_tensor(eps) + 0.0 * pred.sum()
    return (penalty * mask).sum() / count


def adaptive_deblur_loss(pred: torch.Tensor, sharp: torch.Tensor, flow_fwd: torch.Tensor, flow_bwd: torch.Tensor,
                         lam: float = 0.35, eps: float = 1e-3, cycle: bool = True, use_mask: bool = True) -> torch.Tensor:
    """Deblurring loss tolerant to misalignment between prediction and ground truth.

    ``flow_fwd`` maps the sharp image onto the prediction and ``flow_bwd`` the
    prediction onto the sharp image.  Flows are treated as constants.
    """
    if pred.shape != sharp.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and ground truth {tuple(sharp.shape)} differ")
    flow_fwd = flow_fwd.detach()
    flow_bwd = flow_bwd.detach()

    def _mask(flow):
        if use_mask:
            return calibration_mask(flow, lam)
        return torch.ones_like(flow[:, :1])

    loss = masked_charbonnier(warp(sharp, flow_fwd), pred, _mask(flow_fwd), eps)
    if cycle:
        loss = loss + masked_charbonnier(warp(pred, flow_bwd), sharp, _mask(flow_bwd), eps)
    return loss
