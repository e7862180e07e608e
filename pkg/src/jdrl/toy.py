"""Desk-scale known-answer experiment: does training shift the output?

Synthetic pairs carry a fixed shift between the blurry input and the sharp
target.  A network trained with a plain pixel loss learns to reproduce that
shift; one trained with the full joint objective should stay registered to
its input.  The score is the mean flow length between each model's output
and its blurry input on held-out pairs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .config import TrainingConfig
from .data import GeneratorConfig, make_synthetic_pairs
from .flow import PyramidLucasKanade, estimate_flow, flow_magnitude
from .trainer import Trainer, infer

log = logging.getLogger(__name__)


@dataclass
class ToySettings:
    pairs: int = 50
    held_out: int = 10
    size: int = 64
    shift: float = 4.0
    iterations: int = 2000
    seed: int = 0
    border: int = 8
    base: dict = field(default_factory=lambda: dict(
        lr=1e-3, unet_base=16, unet_depth=3, dropout=0.0, body_width=16, batch_size=2,
        init_epochs=15, lr_halve_every=60, checkpoint_every=10_000))


def output_displacement(network, blurry: torch.Tensor, estimator, border: int = 8) -> float:
    """Mean flow length between the network output and its input, borders excluded."""
    pred = infer(network, blurry)
    flow = estimate_flow(blurry, pred, estimator)
    mag = flow_magnitude(flow)
    if border:
        mag = mag[:, border:-border, border:-border]
    return float(mag.mean())


def run_variant(settings: ToySettings, train_pairs, test_blurry, estimator, out_dir: str, **overrides) -> Dict:
    steps_per_epoch = -(-len(train_pairs) // settings.base["batch_size"])
    epochs = max(1, settings.iterations // steps_per_epoch)
    cfg = TrainingConfig(**{**settings.base, "epochs": epochs, "seed": settings.seed, "out_dir": out_dir,
                            **overrides})
    trainer = Trainer(cfg, train_pairs)
    start = time.time()
    trainer.fit()
    elapsed = time.time() - start
    losses = [row["L"] for row in trainer.history]
    disp = output_displacement(trainer.nets["deblur"], test_blurry, estimator, settings.border)
    return {"config": cfg, "losses": losses, "displacement": disp, "seconds": elapsed,
            "iterations": epochs * steps_per_epoch, "trainer": trainer}


def run_toy_experiment(settings: Optional[ToySettings] = None, out_dir: str = "runs/toy") -> Dict:
    settings = settings or ToySettings()
    gen = GeneratorConfig(count=settings.pairs, size=settings.size, shift=(settings.shift, 0.0), seed=settings.seed)
    data = make_synthetic_pairs(gen)
    train_pairs = [(b, s) for b, s, _ in data[:-settings.held_out]]
    test_blurry = torch.from_numpy(np.stack([b.transpose(2, 0, 1) for b, _, _ in data[-settings.held_out:]]))
    estimator = PyramidLucasKanade()
    results = {
        "pixel": run_variant(settings, train_pairs, test_blurry, estimator, f"{out_dir}/pixel",
                             no_deform=True, no_reblur=True),
        "jdrl": run_variant(settings, train_pairs, test_blurry, estimator, f"{out_dir}/jdrl"),
    }
    results["input_displacement"] = 0.0
    for name in ("pixel", "jdrl"):
        r = results[name]
        log.info("%s: displacement %.3f px, loss %.4f -> %.4f, %.0f s", name, r["displacement"],
                 r["losses"][0], r["losses"][-1], r["seconds"])
    return results
