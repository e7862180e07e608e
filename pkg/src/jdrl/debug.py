"""Image and text dumps of kernels, reblur stacks, weights, flows and masks."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Tuple

import cv2
import numpy as np
import torch

from .data import write_image
from .kernels import IsotropicKernelBank


def _gray(values: np.ndarray, scale: int = 1) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    img = values / peak if peak > 0 else values
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale)))
    return np.repeat(img[..., None], 3, axis=2)


def dump_kernels(bank: IsotropicKernelBank, pixels: Iterable[Tuple[int, int]], out_dir, batch: int = 0,
                 scale: int = 8) -> list:
    """Write every level's kernel at each pixel as a text grid and a grayscale PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for y, x in pixels:
        for i in bank.levels:
            k = bank.kernel_at(i, batch, y, x).detach().cpu().double().numpy()
            stem = out_dir / f"kernel_y{y}_x{x}_level{i}"
            np.savetxt(stem.with_suffix(".txt"), k, fmt="%.8e")
            write_image(stem.with_suffix(".png"), _gray(k, scale), bits=8)
            written.append(stem)
    return written


def dump_stack(stack, weights: torch.Tensor, out_dir, batch: int = 0) -> None:
    out_dir = Path(out_dir)
    for idx, level in enumerate(stack, start=1):
        write_image(out_dir / f"reblur_level{idx}.png", level[batch].detach().cpu().numpy().transpose(1, 2, 0), bits=8)
    for idx in range(weights.shape[1]):
        write_image(out_dir / f"weight_{idx + 1}.png", _gray(weights[batch, idx].detach().cpu().numpy()), bits=8)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Hue encodes direction, saturation encodes length; ``flow`` is ``(2, H, W)``."""
    dx, dy = flow[0], flow[1]
    mag = np.hypot(dx, dy)
    peak = max_magnitude or max(float(mag.max()), 1e-12)
    hue = (np.arctan2(-dy, -dx) / np.pi + 1.0) * 180.0
    hsv = np.stack([hue, np.clip(mag / peak, 0, 1), np.ones_like(mag)], axis=-1).astype(np.float32)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def dump_flow(flow: torch.Tensor, mask: torch.Tensor, out_dir, batch: int = 0, prefix: str = "flow") -> None:
    out_dir = Path(out_dir)
    write_image(out_dir / f"{prefix}.png", flow_to_color(flow[batch].detach().cpu().numpy()), bits=8)
    write_image(out_dir / f"{prefix}_mask.png", _gray(mask[batch, 0].detach().cpu().numpy()), bits=8)
