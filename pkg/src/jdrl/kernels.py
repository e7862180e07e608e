"""Isotropic defocus kernels built from per-pixel radial seeds.

A seed volume has ``M = 2 + 3 + ... + m`` channels.  Channels are laid out
in ascending radius order: the first 2 channels hold the seed of the 3x3
kernel, the next 3 the seed of the 5x5 kernel, and so on up to the
``(2m-1) x (2m-1)`` kernel.  A seed ``[a_0, ..., a_{i-1}]`` is the radial
profile of its kernel; cell values are linearly interpolated in the polar
radius and then softmax-normalized.

Tensors follow the torch convention: seed volumes are ``(B, M, H, W)`` and a
materialized level is ``(B, K*K, H, W)`` with ``K = 2i - 1`` and cells in
row-major ``(dy, dx)`` order.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import List, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, InvalidSeedError, NumericError

SOFTMAX_ALL = "softmax_all"
SOFTMAX_IN_DISC = "softmax_in_disc"
NORMALIZATION_MODES = (SOFTMAX_ALL, SOFTMAX_IN_DISC)


def seed_channels(m: int) -> int:
    """Number of seed channels for maximal radius index ``m``."""
    if m < 2:
        raise ConfigurationError(f"maximal radius index m must be >= 2, got {m}")
    return m * (m + 1) // 2 - 1


def level_offsets(m: int) -> List[int]:
    """Start channel of each level i = 2..m inside the seed volume."""
    offsets, acc = [], 0
    for i in range(2, m + 1):
        offsets.append(acc)
        acc += i
    return offsets


def split_seed_volume(seeds: torch.Tensor, m: int) -> List[torch.Tensor]:
    """Split a ``(B, M, H, W)`` seed volume into m-1 per-level views."""
    expected = seed_channels(m)
    if seeds.dim() != 4 or seeds.shape[1] != expected:
        actual = seeds.shape[1] if seeds.dim() == 4 else tuple(seeds.shape)
        raise ConfigurationError(
            f"seed volume for m={m} needs M={expected} channels, got {actual}")
    return list(torch.split(seeds, list(range(2, m + 1)), dim=1))


@lru_cache(maxsize=None)
def _polar_layout(i: int):
    """Interpolation matrix and disc mask for radius index ``i``.

    Returns ``(P, disc)`` with ``P`` of shape ``(K*K, i)`` such that the raw
    kernel is ``P @ seed`` and ``disc`` a boolean vector marking cells with
    radius <= i-1.  Integer radii are detected from the exact squared
    distance, never from a float comparison.
    """
    r = i - 1
    k = 2 * r + 1
    interp = np.zeros((k * k, i), dtype=np.float64)
    disc = np.zeros(k * k, dtype=bool)
    for row, dy in enumerate(range(-r, r + 1)):
        for col, dx in enumerate(range(-r, r + 1)):
            cell = row * k + col
            sq = dx * dx + dy * dy
            root = math.isqrt(sq)
            if sq > r * r:
                continue
            disc[cell] = True
            if root * root == sq:
                interp[cell, root] = 1.0
                continue
            rho = math.sqrt(sq)
            lo, hi = math.floor(rho), math.ceil(rho)
            interp[cell, lo] = (rho - hi) / (lo - hi)
            interp[cell, hi] = (rho - lo) / (hi - lo)
    interp.setflags(write=False)
    disc.setflags(write=False)
    return interp, disc


@lru_cache(maxsize=None)
def _radius_classes(i: int):
    """Group kernel cells by exact squared radius.

    Returns ``(class_interp, counts, cell_class, in_disc, indicator)``:
    per-class interpolation rows ``(n, i)``, cell counts ``(n,)``, the class
    of every cell ``(K*K,)``, a per-class disc flag ``(n,)``, and 0/1
    membership masks ``(n, K, K)``.
    """
    interp, disc = _polar_layout(i)
    r = i - 1
    k = 2 * r + 1
    sq = np.array([dy * dy + dx * dx for dy in range(-r, r + 1) for dx in range(-r, r + 1)])
    values, cell_class = np.unique(sq, return_inverse=True)
    n = len(values)
    first = np.array([np.flatnonzero(cell_class == c)[0] for c in range(n)])
    counts = np.bincount(cell_class, minlength=n).astype(np.float64)
    indicator = np.zeros((n, k * k))
    indicator[cell_class, np.arange(k * k)] = 1.0
    out = (interp[first].copy(), counts, cell_class, disc[first].copy(), indicator.reshape(n, k, k))
    for arr in out:
        arr.setflags(write=False)
    return out


def radius_class_count(i: int) -> int:
    return len(_radius_classes(i)[1])


def interpolation_matrix(i: int, dtype=torch.float32, device=None) -> torch.Tensor:
    interp, _ = _polar_layout(i)
    return torch.tensor(interp, dtype=dtype, device=device)


def disc_mask(i: int, device=None) -> torch.Tensor:
    _, disc = _polar_layout(i)
    return torch.tensor(disc, device=device)


def class_indicator(i: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """0/1 masks ``(n_classes, 1, K, K)`` usable as convolution weights."""
    ind = _radius_classes(i)[4]
    return torch.tensor(ind, dtype=dtype, device=device).unsqueeze(1)


def build_kernel(seed: torch.Tensor) -> torch.Tensor:
    """Raw ``(2i-1, 2i-1)`` kernel from a single length-i seed vector."""
    seed = torch.as_tensor(seed)
    if seed.dim() != 1 or seed.numel() < 2:
        raise InvalidSeedError(f"seed must be a vector of length >= 2, got shape {tuple(seed.shape)}")
    i = seed.numel()
    if not seed.is_floating_point():
        seed = seed.to(torch.get_default_dtype())
    k = 2 * i - 1
    return (interpolation_matrix(i, seed.dtype, seed.device) @ seed).reshape(k, k)


def _check_finite(raw: torch.Tensor, level: int) -> None:
    if torch.isfinite(raw).all():
        return
    bad = (~torch.isfinite(raw)).nonzero()[0].tolist()
    raise NumericError(f"non-finite raw kernel value at level {level}, index {bad}")


def normalize_kernel(raw: torch.Tensor, mode: str = SOFTMAX_ALL) -> torch.Tensor:
    """Softmax-normalize a raw ``(K, K)`` kernel."""
    k = raw.shape[-1]
    i = (k + 1) // 2
    _check_finite(raw, i)
    flat = raw.reshape(-1)
    return _softmax_cells(flat, i, mode, dim=0).reshape(k, k)


def _softmax_cells(raw: torch.Tensor, i: int, mode: str, dim: int) -> torch.Tensor:
    if mode == SOFTMAX_ALL:
        return torch.softmax(raw, dim=dim)
    if mode != SOFTMAX_IN_DISC:
        raise ConfigurationError(f"unknown kernel normalization {mode!r}; expected one of {NORMALIZATION_MODES}")
    shape = [1] * raw.dim()
    shape[dim] = -1
    inside = disc_mask(i, raw.device).reshape(shape)
    masked = raw.masked_fill(~inside, float("-inf"))
    return torch.softmax(masked, dim=dim)


def synthesize_class_values(seed: torch.Tensor, mode: str = SOFTMAX_ALL) -> torch.Tensor:
    """Normalized value of each radius class, ``(B, n_classes, H, W)``.

    Every cell of a class holds this value, so the softmax normalizer is
    ``sum_c count_c * exp(raw_c)``.
    """
    i = seed.shape[1]
    if i < 2:
        raise InvalidSeedError(f"seed length must be >= 2, got {i}")
    if mode not in NORMALIZATION_MODES:
        raise ConfigurationError(f"unknown kernel normalization {mode!r}; expected one of {NORMALIZATION_MODES}")
    interp, counts, _, in_disc, _ = _radius_classes(i)
    interp = torch.tensor(interp, dtype=seed.dtype, device=seed.device)
    raw = torch.einsum("ci,bihw->bchw", interp, seed)
    _check_finite(raw, i)
    log_counts = torch.tensor(np.log(counts), dtype=seed.dtype, device=seed.device).view(1, -1, 1, 1)
    if mode == SOFTMAX_IN_DISC:
        outside = torch.tensor(~in_disc, device=seed.device).view(1, -1, 1, 1)
        raw = raw.masked_fill(outside, float("-inf"))
    log_norm = torch.logsumexp(raw + log_counts, dim=1, keepdim=True)
    return torch.exp(raw - log_norm)


def synthesize_level(seed: torch.Tensor, mode: str = SOFTMAX_ALL) -> torch.Tensor:
    """Normalized kernels ``(B, K*K, H, W)`` from one level's ``(B, i, H, W)`` seeds."""
    values = synthesize_class_values(seed, mode)
    cell_class = torch.tensor(_radius_classes(seed.shape[1])[2], device=seed.device)
    return values.index_select(1, cell_class)


class IsotropicKernelBank:
    """Per-pixel kernels for levels 2..m, materialized on first access."""

    def __init__(self, seeds: torch.Tensor, m: int, mode: str = SOFTMAX_ALL):
        if mode not in NORMALIZATION_MODES:
            raise ConfigurationError(f"unknown kernel normalization {mode!r}")
        self.m = m
        self.mode = mode
        self.seeds = split_seed_volume(seeds, m)
        self._cache = {}

    @property
    def levels(self) -> range:
        return range(2, self.m + 1)

    @property
    def spatial_shape(self):
        return tuple(self.seeds[0].shape[-2:])

    isotropic = True

    def class_values(self, i: int) -> torch.Tensor:
        """Per-radius-class kernel values ``(B, n_classes, H, W)`` for level i."""
        key = ("classes", i)
        if key not in self._cache:
            if i not in self.levels:
                raise KeyError(f"level {i} outside 2..{self.m}")
            self._cache[key] = synthesize_class_values(self.seeds[i - 2], self.mode)
        return self._cache[key]

    def kernels(self, i: int) -> torch.Tensor:
        """Materialized kernels ``(B, K*K, H, W)`` for level i."""
        if i not in self._cache:
            values = self.class_values(i)
            cell_class = torch.tensor(_radius_classes(i)[2], device=values.device)
            self._cache[i] = values.index_select(1, cell_class)
        return self._cache[i]

    def kernel_at(self, i: int, batch: int, y: int, x: int) -> torch.Tensor:
        k = 2 * i - 1
        return self.kernels(i)[batch, :, y, x].reshape(k, k)

    def release(self, i: int) -> None:
        self._cache.pop(i, None)
        self._cache.pop(("classes", i), None)


def synthesize_kernel_bank(seeds: torch.Tensor, m: int, mode: str = SOFTMAX_ALL) -> IsotropicKernelBank:
    return IsotropicKernelBank(seeds, m, mode)


def free_form_channels(m: int) -> int:
    """Channel count when every kernel cell is predicted directly (no radial tying)."""
    return sum((2 * i - 1) ** 2 for i in range(2, m + 1))


class FreeFormKernelBank(IsotropicKernelBank):
    """Same interface as the isotropic bank, but each cell has its own channel.

    Only used for the no-isotropic ablation; these kernels carry no symmetry
    guarantee.
    """

    isotropic = False

    def __init__(self, logits: torch.Tensor, m: int, mode: str = SOFTMAX_ALL):
        expected = free_form_channels(m)
        if logits.shape[1] != expected:
            raise ConfigurationError(
                f"free-form kernel volume for m={m} needs {expected} channels, got {logits.shape[1]}")
        self.m = m
        self.mode = mode
        self.seeds = list(torch.split(logits, [(2 * i - 1) ** 2 for i in range(2, m + 1)], dim=1))
        self._cache = {}

    def kernels(self, i: int) -> torch.Tensor:
        if i not in self._cache:
            if i not in self.levels:
                raise KeyError(f"level {i} outside 2..{self.m}")
            raw = self.seeds[i - 2]
            _check_finite(raw, i)
            self._cache[i] = _softmax_cells(raw, i, self.mode, dim=1)
        return self._cache[i]


def offsets(i: int) -> Sequence[tuple]:
    """``(dy, dx)`` for each kernel cell, row-major."""
    r = i - 1
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
