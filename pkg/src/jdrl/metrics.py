"""PSNR / SSIM / MAE and the raw-GT vs deformed-GT evaluation protocol."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import ndimage

from .errors import FlowEstimationError, ShapeError

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
MODES = ("gt", "deformed_gt")
BASE_COLUMNS = ("psnr", "ssim", "mae")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _valid_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    out = ndimage.correlate1d(x, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-window SSIM per channel, averaged over valid positions and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win_size:
        raise ShapeError(f"image extent {a.shape[:2]} smaller than SSIM window {win_size}")
    taps = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _valid_filter(x, taps), _valid_filter(y, taps)
        vx = _valid_filter(x * x, taps) - mx * mx
        vy = _valid_filter(y * y, taps) - my * my
        cov = _valid_filter(x * y, taps) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def compute_metrics(pred, gt, extra: Optional[Dict[str, Callable]] = None) -> Dict[str, float]:
    row = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt), "mae": mae(pred, gt)}
    for name, fn in (extra or {}).items():
        row[name] = float(fn(pred, gt))
    return row


def deform_ground_truth(pred: np.ndarray, gt: np.ndarray, estimator) -> np.ndarray:
    """Warp the ground truth towards the prediction with the given flow estimator."""
    from .data import to_image, to_tensor
    from .flow import estimate_flow, warp

    gt_t, pred_t = to_tensor(gt), to_tensor(pred)
    flow = estimate_flow(gt_t, pred_t, estimator)
    return to_image(warp(gt_t, flow))


def deformed_gt_evaluate(pred, gt, estimator, extra: Optional[Dict[str, Callable]] = None) -> Dict[str, Dict[str, float]]:
    """Metrics against the raw and the deformed ground truth.

    Returns ``{"gt": {...}, "deformed_gt": {...}}``.  Estimator failures
    propagate as :class:`FlowEstimationError`.
    """
    pred, gt = _pair(pred, gt)
    deformed = deform_ground_truth(pred, gt, estimator)
    return {"gt": compute_metrics(pred, gt, extra), "deformed_gt": compute_metrics(pred, deformed, extra)}


@dataclass
class MetricReport:
    rows: List[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    flagged: List[str] = field(default_factory=list)
    extra_columns: List[str] = field(default_factory=list)

    @property
    def columns(self):
        return ("id", "mode") + BASE_COLUMNS + tuple(self.extra_columns)

    def add(self, ident: str, mode: str, values: Dict[str, float]) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown evaluation mode {mode!r}")
        self.rows.append({"id": ident, "mode": mode, **values})

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for mode in MODES:
            sel = [r for r in self.rows if r["mode"] == mode]
            if not sel:
                continue
            out[mode] = {c: float(np.mean([r[c] for r in sel])) for c in BASE_COLUMNS + tuple(self.extra_columns)}
            out[mode]["count"] = len(sel)
        return out


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.10g}"


def write_report(report: MetricReport, path) -> Path:
    """CSV of per-image rows plus a ``.json`` sidecar with aggregates and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow([_fmt(row[c]) for c in report.columns])
    path.write_text(buf.getvalue())
    sidecar = {"aggregate": report.aggregate(), "metadata": report.metadata, "flagged": sorted(report.flagged)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def evaluate_directories(pred_dir, gt_dir, mode: str = "both", estimator=None,
                         metadata: Optional[dict] = None, extra: Optional[Dict[str, Callable]] = None) -> MetricReport:
    """Evaluate predictions against ground truth images matched by filename."""
    from .data import IMAGE_SUFFIXES, read_image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    missing = sorted(set(preds) - set(gts))
    if missing:
        log.warning("no ground truth for %d predictions: %s", len(missing), ", ".join(missing))
    modes = MODES if mode == "both" else (mode,)
    if any(m not in MODES for m in modes):
        raise ValueError(f"mode must be one of {MODES + ('both',)}, got {mode!r}")
    if "deformed_gt" in modes and estimator is None:
        raise ValueError("deformed_gt evaluation needs a flow estimator")
    report = MetricReport(metadata=dict(metadata or {}), extra_columns=sorted(extra or {}))
    for ident in sorted(set(preds) & set(gts)):
        pred, gt = read_image(preds[ident]), read_image(gts[ident])
        if "gt" in modes:
            report.add(ident, "gt", compute_metrics(pred, gt, extra))
        if "deformed_gt" in modes:
            try:
                deformed = deform_ground_truth(pred, gt, estimator)
            except FlowEstimationError as exc:
                log.warning("excluding %s from deformed_gt aggregate: %s", ident, exc)
                report.flagged.append(ident)
                continue
            report.add(ident, "deformed_gt", compute_metrics(pred, deformed, extra))
    return report
