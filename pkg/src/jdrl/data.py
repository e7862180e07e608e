"""Paired-dataset ingestion, patching, and a synthetic misaligned defocus generator.

On disk a dataset is a directory with ``source/`` (blurry) and ``target/``
(sharp) subdirectories holding identically named images, plus an optional
``splits.csv`` with ``id,split`` rows.  Images are handled in memory as
``(H, W, 3)`` float32 arrays in [0, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DatasetError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
SPLITS = ("train", "test", "val")
MAX_RADIUS = 7
MAX_SHIFT = 16.0
ZOOM_RANGE = (0.9, 1.1)


def read_image(path) -> np.ndarray:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float32) / 65535.0
    else:
        img = raw.astype(np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[..., :3]
    return np.ascontiguousarray(img[..., ::-1])


def write_image(path, img: np.ndarray, bits: int = 16) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(img * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(img * 255.0).astype(np.uint8)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    if data.ndim == 3:
        data = data[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise DatasetError(f"failed to write image {path}")


@dataclass(frozen=True)
class PairRecord:
    blurry_path: Path
    sharp_path: Path
    identifier: str
    split: str = "train"


def _read_splits(root: Path) -> dict:
    manifest = root / "splits.csv"
    if not manifest.exists():
        return {}
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    splits = {}
    for row in rows:
        split = row["split"].strip()
        if split not in SPLITS:
            raise DatasetError(f"{manifest}: unknown split {split!r} for {row['id']}")
        splits[row["id"].strip()] = split
    return splits


def load_pair_dataset(root, validate: bool = True, split: Optional[str] = None) -> List[PairRecord]:
    """Pair up ``source/`` and ``target/`` images by filename."""
    root = Path(root)
    src_dir, tgt_dir = root / "source", root / "target"
    for d in (src_dir, tgt_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
    blurry = {p.name: p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    sharp = {p.name: p for p in tgt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    orphans = sorted(set(blurry) ^ set(sharp))
    if orphans:
        where = [str((src_dir if n in blurry else tgt_dir) / n) for n in orphans]
        raise DatasetError(f"images without a counterpart: {', '.join(where)}")
    splits = _read_splits(root)
    records = []
    for name in sorted(blurry):
        ident = Path(name).stem
        rec = PairRecord(blurry[name], sharp[name], ident, splits.get(ident, "train"))
        if split is not None and rec.split != split:
            continue
        if validate:
            a, b = read_image(rec.blurry_path), read_image(rec.sharp_path)
            if a.shape != b.shape:
                raise DatasetError(f"extent mismatch for {ident}: {rec.blurry_path} {a.shape} vs "
                                   f"{rec.sharp_path} {b.shape}")
        records.append(rec)
    return records


def load_pair(record: PairRecord) -> Tuple[np.ndarray, np.ndarray]:
    return read_image(record.blurry_path), read_image(record.sharp_path)


def patch_count(h: int, w: int, size: int, stride: int) -> int:
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def extract_patches(pair: Tuple[np.ndarray, np.ndarray], size: int, stride: Optional[int] = None):
    """Co-located square patches from both images in row-major order."""
    blurry, sharp = pair
    stride = stride or size
    h, w = blurry.shape[:2]
    if sharp.shape[:2] != (h, w):
        raise DatasetError(f"pair extents differ: {blurry.shape} vs {sharp.shape}")
    if size > h or size > w:
        raise ConfigurationError(f"patch size {size} exceeds image extent {h}x{w}")
    out = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            out.append((blurry[y:y + size, x:x + size], sharp[y:y + size, x:x + size]))
    return out


def disc_kernel(radius: int) -> np.ndarray:
    """Normalized integer-grid disc: cells with dx^2 + dy^2 <= radius^2."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx * xx + yy * yy <= r * r).astype(np.float64)
    return k / k.sum()


def synthesize_defocus_pair(sharp: np.ndarray, radius_map: np.ndarray):
    """Blur ``sharp`` with a per-pixel disc whose radius is ``radius_map`` rounded."""
    radius_map = np.asarray(radius_map, dtype=np.float64)
    if radius_map.shape != sharp.shape[:2]:
        raise ConfigurationError(f"radius map {radius_map.shape} does not match image {sharp.shape[:2]}")
    if radius_map.min() < 0 or radius_map.max() > MAX_RADIUS:
        raise ConfigurationError(f"radius map must lie in [0, {MAX_RADIUS}], got "
                                 f"[{radius_map.min():.3f}, {radius_map.max():.3f}]")
    radii = np.rint(radius_map).astype(int)
    src = np.asarray(sharp, dtype=np.float64)
    out = np.empty_like(src)
    for r in np.unique(radii):
        sel = radii == r
        if r == 0:
            out[sel] = src[sel]
            continue
        k = disc_kernel(r)
        blurred = np.stack([ndimage.correlate(src[..., c], k, mode="nearest") for c in range(src.shape[2])], axis=-1)
        out[sel] = blurred[sel]
    return out.astype(sharp.dtype), sharp


@dataclass(frozen=True)
class MisalignmentTransform:
    kind: str = "shift"
    shift: Tuple[float, float] = (0.0, 0.0)
    zoom: float = 1.0

    def validate(self) -> "MisalignmentTransform":
        if self.kind not in ("shift", "zoom", "compose"):
            raise ConfigurationError(f"unknown misalignment kind {self.kind!r}")
        dx, dy = self.shift
        if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT:
            raise ConfigurationError(f"shift {self.shift} exceeds +-{MAX_SHIFT} px")
        if not ZOOM_RANGE[0] <= self.zoom <= ZOOM_RANGE[1]:
            raise ConfigurationError(f"zoom {self.zoom} outside {ZOOM_RANGE}")
        return self

    @property
    def effective_shift(self):
        return self.shift if self.kind in ("shift", "compose") else (0.0, 0.0)

    @property
    def effective_zoom(self):
        return self.zoom if self.kind in ("zoom", "compose") else 1.0


def apply_misalignment(image: np.ndarray, t: MisalignmentTransform) -> np.ndarray:
    """Resample so content is zoomed by ``s`` about the center, then moved by ``(dx, dy)``.

    ``out(p) = image(c + (p - shift - c) / s)``, bilinear, replicate fill.
    """
    t.validate()
    dx, dy = t.effective_shift
    s = t.effective_zoom
    if dx == 0 and dy == 0 and s == 1.0:
        return image.copy()
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = cy + (yy - dy - cy) / s
    sx = cx + (xx - dx - cx) / s
    chans = [ndimage.map_coordinates(np.asarray(image[..., c], dtype=np.float64), [sy, sx], order=1, mode="nearest")
             for c in range(image.shape[2])]
    return np.stack(chans, axis=-1).astype(image.dtype)


def random_texture(size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Multi-scale colored noise with a few hard-edged rectangles, in [0.05, 0.95]."""
    h, w = size
    img = np.zeros((h, w, 3))
    for sigma, amp in ((1.0, 0.5), (2.5, 0.8), (6.0, 1.0)):
        noise = rng.standard_normal((h, w, 3))
        img += amp * np.stack([ndimage.gaussian_filter(noise[..., c], sigma) * sigma for c in range(3)], axis=-1)
    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        hh, ww = rng.integers(h // 10 + 1, h // 3 + 2), rng.integers(w // 10 + 1, w // 3 + 2)
        img[y0:y0 + hh, x0:x0 + ww] += rng.uniform(-1.5, 1.5, size=3)
    lo, hi = img.min(axis=(0, 1)), img.max(axis=(0, 1))
    img = (img - lo) / np.maximum(hi - lo, 1e-12)
    return (0.05 + 0.9 * img).astype(np.float32)


def radius_map(family: str, size: Tuple[int, int], rng: np.random.Generator, r_min: float = 0.0,
               r_max: float = 3.0) -> np.ndarray:
    h, w = size
    if family == "constant":
        return np.full((h, w), rng.uniform(r_min, r_max))
    if family == "ramp":
        angle = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = np.cos(angle) * xx + np.sin(angle) * yy
        proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        return r_min + (r_max - r_min) * proj
    if family == "smooth":
        field = ndimage.gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 6.0)
        field = (field - field.min()) / max(field.max() - field.min(), 1e-12)
        return r_min + (r_max - r_min) * field
    raise ConfigurationError(f"unknown radius-map family {family!r}")


@dataclass
class GeneratorConfig:
    count: int = 50
    size: int = 64
    radius_family: str = "smooth"
    radius_min: float = 0.0
    radius_max: float = 3.0
    kind: str = "shift"
    shift: Tuple[float, float] = (4.0, 0.0)
    zoom: float = 1.0
    jitter: float = 0.0
    test_fraction: float = 0.2
    seed: int = 0


def generate_pair(cfg: GeneratorConfig, rng: np.random.Generator):
    """One (blurry, misaligned sharp, transform) triple.

    The scene is rendered with a margin and cropped, so neither the blur nor
    the misalignment sees the replicate border.
    """
    margin = int(math.ceil(MAX_SHIFT)) + MAX_RADIUS + 1
    full = (cfg.size + 2 * margin,) * 2
    scene = random_texture(full, rng)
    rmap = radius_map(cfg.radius_family, full, rng, cfg.radius_min, cfg.radius_max)
    blurry, _ = synthesize_defocus_pair(scene, rmap)
    dx, dy = cfg.shift
    if cfg.jitter:
        dx += rng.uniform(-cfg.jitter, cfg.jitter)
        dy += rng.uniform(-cfg.jitter, cfg.jitter)
    t = MisalignmentTransform(cfg.kind, (float(dx), float(dy)), float(cfg.zoom)).validate()
    sharp = apply_misalignment(scene, t)
    crop = (slice(margin, margin + cfg.size), slice(margin, margin + cfg.size))
    return blurry[crop].copy(), sharp[crop].copy(), t


def make_synthetic_pairs(cfg: GeneratorConfig):
    """In-memory pairs; each image gets its own child seed so results are order-independent."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    return [generate_pair(cfg, np.random.default_rng(child)) for child in children]


def generate_dataset(out_root, cfg: GeneratorConfig) -> List[PairRecord]:
    """Write a synthetic dataset in the on-disk pair layout (16-bit PNG)."""
    out_root = Path(out_root)
    pairs = make_synthetic_pairs(cfg)
    n_test = int(round(cfg.count * cfg.test_fraction))
    rows, transforms = [], {}
    for idx, (blurry, sharp, t) in enumerate(pairs):
        ident = f"{idx:05d}"
        split = "test" if idx >= cfg.count - n_test else "train"
        write_image(out_root / "source" / f"{ident}.png", blurry)
        write_image(out_root / "target" / f"{ident}.png", sharp)
        rows.append((ident, split))
        transforms[ident] = {"kind": t.kind, "shift": list(t.shift), "zoom": t.zoom}
    with open(out_root / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "split"])
        writer.writerows(rows)
    with open(out_root / "generator.json", "w") as fh:
        json.dump({"config": asdict(cfg), "transforms": transforms}, fh, indent=2, sort_keys=True)
    return load_pair_dataset(out_root, validate=False)


def to_tensor(img: np.ndarray):
    import torch
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))).unsqueeze(0)


def to_image(t) -> np.ndarray:
    return t.detach().cpu().numpy()[0].transpose(1, 2, 0)
