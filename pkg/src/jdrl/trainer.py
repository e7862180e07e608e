"""Joint deblurring/reblurring training, checkpointing, and inference."""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import kernels as K
from .config import TrainingConfig, flow_source_policy, lr_schedule
from .data import extract_patches, load_pair, load_pair_dataset
from .deformation import adaptive_deblur_loss
from .errors import ConfigurationError, NumericError, ResumeMismatchError
from .flow import estimate_flow, get_estimator
from .networks import KernelPredictor, WeightPredictor, build_network, he_init
from .reblur import apply_bank_level, charbonnier, reblur, reblur_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jdrl-checkpoint/1"
LOG_COLUMNS = ("epoch", "L_d", "L_r", "L", "lr")


def build_deblur_network(config: TrainingConfig) -> nn.Module:
    if config.model == "unet":
        return build_network("unet", base=config.unet_base, depth=config.unet_depth, dropout=config.dropout)
    return build_network(config.model)


def build_components(config: TrainingConfig) -> Dict[str, nn.Module]:
    nets = {
        "deblur": build_deblur_network(config),
        "kpn": KernelPredictor(config.m, config.body_width, config.body_blocks, isotropic=not config.no_isotropic),
        "wpn": WeightPredictor(config.m, config.body_width, config.body_blocks),
    }
    gen = torch.Generator()
    gen.manual_seed(config.seed)
    for net in nets.values():
        he_init(net, generator=gen)
    return nets


def stack_pairs(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[torch.Tensor, torch.Tensor]:
    blurry = np.stack([np.asarray(b, dtype=np.float32).transpose(2, 0, 1) for b, _ in pairs])
    sharp = np.stack([np.asarray(s, dtype=np.float32).transpose(2, 0, 1) for _, s in pairs])
    return torch.from_numpy(blurry), torch.from_numpy(sharp)


def load_training_pairs(config: TrainingConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    if not config.data_root:
        raise ConfigurationError("data_root is required when no in-memory pairs are given")
    pairs = []
    for rec in load_pair_dataset(config.data_root, split=config.split):
        blurry, sharp = load_pair(rec)
        if min(blurry.shape[:2]) > config.patch_size:
            pairs.extend(extract_patches((blurry, sharp), config.patch_size))
        else:
            pairs.append((blurry, sharp))
    if not pairs:
        raise ConfigurationError(f"no {config.split} pairs under {config.data_root}")
    return pairs


class Trainer:
    """Owns the three networks, the optimizer, and the training state.

    ``pairs`` is a list of ``(blurry, sharp)`` ``(H, W, 3)`` arrays; when
    omitted they are read from ``config.data_root``.
    """

    def __init__(self, config: TrainingConfig, pairs=None, estimator=None):
        self.config = config
        if config.deterministic_mode:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
        self.nets = build_components(config)
        self.estimator = estimator if estimator is not None else get_estimator(config.estimator)
        params = [p for net in self.nets.values() for p in net.parameters()]
        self.optimizer = torch.optim.Adam(params, lr=lr_schedule(0, config))
        self.shuffle = torch.Generator()
        self.shuffle.manual_seed(config.seed)
        self.epoch = 0
        self.history: List[dict] = []
        self._init_flows: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}
        if pairs is None:
            pairs = load_training_pairs(config)
        self.blurry, self.sharp = stack_pairs(pairs)

    # -- losses ---------------------------------------------------------

    def flows(self, idx: torch.Tensor, blurry: torch.Tensor, sharp: torch.Tensor, pred: torch.Tensor, epoch: int):
        """Forward (sharp -> registration target) and backward flows for a batch."""
        if flow_source_policy(epoch, self.config.init_epochs) == "deblurred":
            return estimate_flow(sharp, pred, self.estimator), estimate_flow(pred, sharp, self.estimator)
        # init-stage flows do not depend on the prediction, so cache them per pair
        missing = [int(i) for i in idx if int(i) not in self._init_flows]
        if missing:
            sel = torch.tensor(missing)
            fwd = estimate_flow(self.sharp[sel], self.blurry[sel], self.estimator)
            bwd = estimate_flow(self.blurry[sel], self.sharp[sel], self.estimator)
            for j, i in enumerate(missing):
                self._init_flows[i] = (fwd[j:j + 1], bwd[j:j + 1])
        fwd = torch.cat([self._init_flows[int(i)][0] for i in idx])
        bwd = torch.cat([self._init_flows[int(i)][1] for i in idx])
        return fwd, bwd

    def reblurred(self, pred: torch.Tensor, blurry: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        seeds = self.nets["kpn"](pred, blurry)
        if cfg.no_isotropic:
            bank = K.FreeFormKernelBank(seeds, cfg.m, cfg.normalization)
        else:
            bank = K.IsotropicKernelBank(seeds, cfg.m, cfg.normalization)
        if cfg.no_wpn:
            return apply_bank_level(pred, bank, cfg.m)
        return reblur(pred, bank, self.nets["wpn"](pred, blurry))

    def compute_losses(self, idx: torch.Tensor, epoch: Optional[int] = None) -> Dict[str, torch.Tensor]:
        cfg = self.config
        epoch = self.epoch if epoch is None else epoch
        blurry, sharp = self.blurry[idx], self.sharp[idx]
        pred = self.nets["deblur"](blurry)
        if cfg.no_deform:
            loss_d = charbonnier(pred, sharp, cfg.epsilon)
        else:
            fwd, bwd = self.flows(idx, blurry, sharp, pred, epoch)
            loss_d = adaptive_deblur_loss(pred, sharp, fwd, bwd, cfg.lam, cfg.epsilon,
                                          cycle=not cfg.no_cycle, use_mask=not cfg.no_mask)
        if cfg.no_reblur:
            loss_r = pred.new_zeros(())
        else:
            loss_r = reblur_loss(self.reblurred(pred, blurry), blurry, cfg.epsilon, cfg.reblur_reduction)
        return {"L_d": loss_d, "L_r": loss_r, "L": loss_d + cfg.alpha * loss_r, "pred": pred}

    # -- optimization ---------------------------------------------------

    def set_train_mode(self, train: bool = True) -> None:
        for net in self.nets.values():
            net.train(train)

    def train_step(self, batches: Sequence[torch.Tensor]) -> Dict[str, float]:
        """One optimizer step, accumulating gradients over ``batches``."""
        self.set_train_mode(True)
        self.optimizer.zero_grad(set_to_none=True)
        totals = {"L_d": 0.0, "L_r": 0.0, "L": 0.0}
        for idx in batches:
            losses = self.compute_losses(idx)
            if not torch.isfinite(losses["L"]):
                self._dump_bad_batch(idx, losses)
                raise NumericError(f"non-finite loss at epoch {self.epoch} for pairs {idx.tolist()}")
            (losses["L"] / len(batches)).backward()
            for key in totals:
                totals[key] += float(losses[key].detach()) / len(batches)
        self.optimizer.step()
        return totals

    def _dump_bad_batch(self, idx, losses) -> None:
        out = Path(self.config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save({"epoch": self.epoch, "indices": idx, "blurry": self.blurry[idx], "sharp": self.sharp[idx],
                    "losses": {k: v.detach() for k, v in losses.items()}}, out / "nonfinite_batch.pt")

    def grad_norms(self) -> Dict[str, float]:
        norms = {}
        for name, net in self.nets.items():
            sq = 0.0
            for p in net.parameters():
                if p.grad is not None:
                    sq += float(p.grad.detach().pow(2).sum())
            norms[name] = math.sqrt(sq)
        return norms

    def epoch_batches(self) -> List[torch.Tensor]:
        n = self.blurry.shape[0]
        order = torch.randperm(n, generator=self.shuffle)
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def train_epoch(self) -> dict:
        lr = lr_schedule(self.epoch, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batches = self.epoch_batches()
        acc = self.config.grad_accum
        sums = {"L_d": 0.0, "L_r": 0.0, "L": 0.0}
        steps = 0
        for start in range(0, len(batches), acc):
            step = self.train_step(batches[start:start + acc])
            steps += 1
            for key in sums:
                sums[key] += step[key]
            if self.config.log_every and steps % self.config.log_every == 0:
                log.info("epoch %d step %d L=%.5f", self.epoch, steps, step["L"])
        row = {"epoch": self.epoch, **{k: v / steps for k, v in sums.items()}, "lr": lr}
        self.history.append(row)
        self.epoch += 1
        return row

    def fit(self, epochs: Optional[int] = None, out_dir=None) -> List[dict]:
        """Train until ``epochs`` (default ``config.epochs``), logging and checkpointing."""
        epochs = self.config.epochs if epochs is None else epochs
        out = Path(out_dir or self.config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        # softmax tails underflow into denormals, which slow CPU kernels by an order of magnitude;
        # the flag is process-global, so it is only held while training
        torch.set_flush_denormal(True)
        try:
            while self.epoch < epochs:
                row = self.train_epoch()
                log.info("epoch %d  L_d=%.5f  L_r=%.5f  L=%.5f  lr=%.2e", row["epoch"], row["L_d"], row["L_r"],
                         row["L"], row["lr"])
                write_loss_log(self.history, out / "loss_log.csv")
                if self.epoch % self.config.checkpoint_every == 0 or self.epoch == epochs:
                    self.save_checkpoint(out / f"checkpoint_{self.epoch:04d}.pt")
                    self.save_checkpoint(out / "checkpoint_last.pt")
        finally:
            torch.set_flush_denormal(False)
        return self.history

    # -- persistence ----------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "components": {name: net.state_dict() for name, net in self.nets.items()},
            "optimizer": self.optimizer.state_dict(),
            "rng": {"torch": torch.get_rng_state(), "shuffle": self.shuffle.get_state()},
            "history": self.history,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path

    def load_checkpoint(self, path, force: bool = False) -> None:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if ckpt["config_hash"] != self.config.config_hash() and not force:
            raise ResumeMismatchError(f"checkpoint config hash {ckpt['config_hash']} differs from current "
                                      f"{self.config.config_hash()}; pass force to resume anyway")
        for name, net in self.nets.items():
            net.load_state_dict(ckpt["components"][name])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["rng"]["torch"])
        self.shuffle.set_state(ckpt["rng"]["shuffle"])
        self.epoch = ckpt["epoch"]
        self.history = list(ckpt.get("history", []))


def write_loss_log(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.10g}" for c in LOG_COLUMNS[1:]])


def train(config: TrainingConfig, pairs=None, resume=None, force: bool = False, estimator=None) -> Trainer:
    trainer = Trainer(config, pairs, estimator)
    if resume:
        trainer.load_checkpoint(resume, force=force)
    trainer.fit()
    return trainer


def load_deblur_network(checkpoint) -> nn.Module:
    """Rebuild the deblurring network stored in a checkpoint, in eval mode."""
    ckpt = torch.load(checkpoint, map_location="cpu", weights_only=False)
    config = TrainingConfig.from_dict(ckpt["config"])
    net = build_deblur_network(config)
    net.load_state_dict(ckpt["components"]["deblur"])
    return net.eval()


def _tile_starts(length: int, tile: int, stride: int) -> List[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def _tile_weight(start: int, tile: int, length: int, overlap: int) -> torch.Tensor:
    """1-D blend weight: linear ramp across the overlap, except at image edges."""
    w = torch.ones(tile, dtype=torch.float64)
    if overlap <= 0:
        return w
    ramp = torch.linspace(0.0, 1.0, overlap + 2, dtype=torch.float64)[1:-1]
    if start > 0:
        w[:overlap] = ramp
    if start + tile < length:
        w[-overlap:] = ramp.flip(0)
    return w


@torch.no_grad()
def infer(network: nn.Module, image: torch.Tensor, tile: Optional[int] = None, overlap: int = 32,
          halo: Optional[int] = None) -> torch.Tensor:
    """Deblur ``(B, 3, H, W)`` with the deblurring network alone.

    With ``tile`` set, the image is cut into overlapping tiles.  Each tile is
    run with ``halo`` extra pixels of context on every side (default
    ``overlap``), the context is cropped off, and neighbouring tiles are
    blended with linear ramps across the overlap.  When the halo covers the
    network's receptive field the result equals whole-image inference.
    """
    network.eval()
    h, w = image.shape[-2:]
    if tile is None or (h <= tile and w <= tile):
        return network(image)
    if overlap * 2 >= tile:
        raise ConfigurationError(f"overlap {overlap} too large for tile {tile}")
    halo = overlap if halo is None else halo
    stride = tile - overlap
    out = torch.zeros(image.shape, dtype=torch.float64)
    norm = torch.zeros((1, 1, h, w), dtype=torch.float64)
    th, tw = min(tile, h), min(tile, w)
    for y in _tile_starts(h, th, stride):
        wy = _tile_weight(y, th, h, overlap)
        y0, y1 = max(0, y - halo), min(h, y + th + halo)
        for x in _tile_starts(w, tw, stride):
            wx = _tile_weight(x, tw, w, overlap)
            x0, x1 = max(0, x - halo), min(w, x + tw + halo)
            weight = (wy[:, None] * wx[None, :])[None, None]
            pred = network(image[..., y0:y1, x0:x1]).to(torch.float64)
            pred = pred[..., y - y0:y - y0 + th, x - x0:x - x0 + tw]
            out[..., y:y + th, x:x + tw] += pred * weight
            norm[..., y:y + th, x:x + tw] += weight
    return (out / norm).to(image.dtype)
