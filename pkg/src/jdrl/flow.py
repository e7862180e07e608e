"""Optical flow estimators and the backward warp they are defined against.

A flow field is a ``(B, 2, H, W)`` tensor of pixel displacements, channel 0
horizontal (dx) and channel 1 vertical (dy).  ``estimate_flow(source,
target)`` returns the field ``f`` for which ``warp(source, f)`` approximates
``target``, i.e. ``source(y + dy, x + dx) ~ target(y, x)``.

Estimators are plain callables ``(source, target) -> flow`` registered by
name.  The built-in ``pyramid_lk`` is a classical coarse-to-fine dense
Lucas-Kanade solver; learned estimators can be plugged in with
:func:`register_estimator`.
"""
from __future__ import annotations

import math
from typing import Callable, Dict

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, FlowEstimationError, ShapeError

FlowEstimator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

_REGISTRY: Dict[str, Callable[..., FlowEstimator]] = {}


def register_estimator(name: str):
    def decorator(factory):
        _REGISTRY[name] = factory
        return factory
    return decorator


def get_estimator(name: str, **kwargs) -> FlowEstimator:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown flow estimator {name!r}; registered: {sorted(_REGISTRY)}") from None
    est = factory(**kwargs)
    if not hasattr(est, "name"):
        try:
            est.name = name
        except AttributeError:
            pass
    return est


def available_estimators():
    return sorted(_REGISTRY)


def _base_grid(h: int, w: int, dtype, device) -> torch.Tensor:
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=0)


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp with bilinear sampling; samples outside clamp to the border.

    Sampling works in pixel coordinates, so integer flows reproduce pixel
    values exactly.
    """
    b, c, h, w = image.shape
    if flow.shape != (b, 2, h, w):
        raise ShapeError(f"flow {tuple(flow.shape)} does not match image {tuple(image.shape)}")
    base = _base_grid(h, w, flow.dtype, flow.device)
    x = (base[0] + flow[:, 0]).clamp(0, w - 1)
    y = (base[1] + flow[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    tx, ty = (x - x0).unsqueeze(1), (y - y0).unsqueeze(1)
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=w - 1), (y0 + 1).clamp(max=h - 1)
    flat = image.reshape(b, c, h * w)

    def sample(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    top = sample(y0, x0) * (1 - tx) + sample(y0, x1) * tx
    bottom = sample(y1, x0) * (1 - tx) + sample(y1, x1) * tx
    return top * (1 - ty) + bottom * ty


def flow_magnitude(flow: torch.Tensor) -> torch.Tensor:
    """Per-pixel Euclidean length, shape ``(B, H, W)``."""
    return torch.sqrt(flow[:, 0] ** 2 + flow[:, 1] ** 2)


def mean_magnitude(flow: torch.Tensor) -> torch.Tensor:
    """Per-sample mean flow length, shape ``(B,)``."""
    return flow_magnitude(flow).flatten(1).mean(dim=1)


def estimate_flow(source: torch.Tensor, target: torch.Tensor, estimator: FlowEstimator) -> torch.Tensor:
    if source.shape != target.shape:
        raise ShapeError(f"flow inputs differ in shape: {tuple(source.shape)} vs {tuple(target.shape)}")
    name = getattr(estimator, "name", type(estimator).__name__)
    try:
        with torch.no_grad():
            flow = estimator(source.detach(), target.detach())
    except FlowEstimationError:
        raise
    except Exception as exc:
        raise FlowEstimationError(name, str(exc)) from exc
    b, _, h, w = source.shape
    if tuple(flow.shape) != (b, 2, h, w):
        raise FlowEstimationError(name, f"returned shape {tuple(flow.shape)}, expected {(b, 2, h, w)}")
    if not torch.isfinite(flow).all():
        raise FlowEstimationError(name, "returned non-finite flow")
    return flow.to(source.dtype)


def _gaussian_taps(sigma: float, dtype, device) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    taps = torch.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of every channel with replicate borders."""
    taps = _gaussian_taps(sigma, x.dtype, x.device)
    r = taps.numel() // 2
    c = x.shape[1]
    out = F.pad(x, (r, r, 0, 0), mode="replicate")
    out = F.conv2d(out, taps.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    out = F.pad(out, (0, 0, r, r), mode="replicate")
    return F.conv2d(out, taps.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _gradients(x: torch.Tensor):
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    gy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    return gx, gy


def median_filter3(x: torch.Tensor) -> torch.Tensor:
    """3x3 median per channel, replicate borders."""
    b, c, h, w = x.shape
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    patches = torch.stack([p[..., dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], dim=0)
    return patches.median(dim=0).values


def _resize_flow(flow: torch.Tensor, size) -> torch.Tensor:
    h, w = flow.shape[-2:]
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=True)
    sx = (size[1] - 1) / max(w - 1, 1)
    sy = (size[0] - 1) / max(h - 1, 1)
    return torch.cat([out[:, :1] * sx, out[:, 1:] * sy], dim=1)


class PyramidLucasKanade:
    """Coarse-to-fine dense Lucas-Kanade with iterative warping.

    Each pyramid level runs ``iterations`` Gauss-Newton updates of the
    photometric residual ``source(x + f) - target(x)``, using the averaged
    gradients of both images and a Gaussian integration window.  The
    structure tensor is ridge-regularized so flat regions get zero update.
    """

    name = "pyramid_lk"

    def __init__(self, levels: int | None = None, iterations: int = 8, window_sigma: float = 3.0,
                 prefilter_sigma: float = 1.0, ridge: float = 1e-5, max_step: float = 1.0,
                 smooth_sigma: float = 1.0, min_size: int = 16):
        self.levels = levels
        self.iterations = iterations
        self.window_sigma = window_sigma
        self.prefilter_sigma = prefilter_sigma
        self.ridge = ridge
        self.max_step = max_step
        self.smooth_sigma = smooth_sigma
        self.min_size = min_size

    def _n_levels(self, h: int, w: int) -> int:
        if self.levels is not None:
            return self.levels
        n = int(math.floor(math.log2(max(min(h, w), 1) / self.min_size))) + 1
        return max(1, min(5, n))

    def _pyramid(self, x: torch.Tensor, n: int):
        pyr = [x]
        for _ in range(n - 1):
            h, w = pyr[-1].shape[-2:]
            pyr.append(F.interpolate(gaussian_blur(pyr[-1], 1.0), size=(max(1, h // 2), max(1, w // 2)),
                                     mode="bilinear", align_corners=True))
        return pyr

    def _energy(self, warped: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        return gaussian_blur(((warped - tgt) ** 2).sum(1, keepdim=True), self.window_sigma)

    def _refine(self, src: torch.Tensor, tgt: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        tgt_gx, tgt_gy = _gradients(tgt)
        warped = warp(src, flow)
        energy = self._energy(warped, tgt)
        for _ in range(self.iterations):
            gx, gy = _gradients(warped)
            gx = 0.5 * (gx + tgt_gx)
            gy = 0.5 * (gy + tgt_gy)
            it = warped - tgt
            stats = torch.cat([
                (gx * gx).sum(1, keepdim=True), (gx * gy).sum(1, keepdim=True), (gy * gy).sum(1, keepdim=True),
                (gx * it).sum(1, keepdim=True), (gy * it).sum(1, keepdim=True),
            ], dim=1)
            stats = gaussian_blur(stats, self.window_sigma)
            a11 = stats[:, 0] + self.ridge
            a12 = stats[:, 1]
            a22 = stats[:, 2] + self.ridge
            b1, b2 = stats[:, 3], stats[:, 4]
            det = a11 * a22 - a12 * a12
            du = -(a22 * b1 - a12 * b2) / det
            dv = -(a11 * b2 - a12 * b1) / det
            step = torch.stack([du, dv], dim=1).clamp(-self.max_step, self.max_step)
            candidate = flow + step
            cand_warped = warp(src, candidate)
            cand_energy = self._energy(cand_warped, tgt)
            # Gauss-Newton can overshoot on aliased texture; keep only improving pixels
            better = cand_energy <= energy
            flow = torch.where(better, candidate, flow)
            warped = torch.where(better, cand_warped, warped)
            energy = torch.where(better, cand_energy, energy)
        flow = median_filter3(flow)
        if self.smooth_sigma > 0:
            flow = gaussian_blur(flow, self.smooth_sigma)
        return flow

    def __call__(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        dtype = source.dtype if source.dtype == torch.float64 else torch.float32
        src = source.to(dtype)
        tgt = target.to(dtype)
        if self.prefilter_sigma > 0:
            src = gaussian_blur(src, self.prefilter_sigma)
            tgt = gaussian_blur(tgt, self.prefilter_sigma)
        n = self._n_levels(*src.shape[-2:])
        src_pyr = self._pyramid(src, n)
        tgt_pyr = self._pyramid(tgt, n)
        b = src.shape[0]
        coarse = src_pyr[-1]
        flow = coarse.new_zeros((b, 2) + tuple(coarse.shape[-2:]))
        for lvl in range(n - 1, -1, -1):
            size = tuple(src_pyr[lvl].shape[-2:])
            if tuple(flow.shape[-2:]) != size:
                flow = _resize_flow(flow, size)
            flow = self._refine(src_pyr[lvl], tgt_pyr[lvl], flow)
        return flow


class ZeroFlow:
    """Stub estimator: the pair is assumed aligned."""

    name = "zero"

    def __call__(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        b, _, h, w = source.shape
        return source.new_zeros((b, 2, h, w))


register_estimator("pyramid_lk")(PyramidLucasKanade)
register_estimator("zero")(ZeroFlow)
