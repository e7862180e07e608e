import numpy as np
import pytest
import torch
from scipy import ndimage

from jdrl.config import TrainingConfig


def textured(size=64, seed=0, channels=3, sigma=1.5):
    """Band-limited random texture in [0.1, 0.9], HWC float64."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((size, size, channels))
    img = np.stack([ndimage.gaussian_filter(noise[..., c], sigma) for c in range(channels)], axis=-1)
    img = (img - img.min()) / (img.max() - img.min())
    return 0.1 + 0.8 * img


def as_batch(img, dtype=torch.float32):
    return torch.tensor(np.asarray(img).transpose(2, 0, 1)[None], dtype=dtype)


@pytest.fixture
def tiny_config(tmp_path):
    """Small, fast training configuration."""
    return TrainingConfig(m=3, unet_base=4, unet_depth=2, dropout=0.0, body_width=8, body_blocks=1,
                          batch_size=2, init_epochs=1, epochs=2, lr=1e-3, out_dir=str(tmp_path / "run"),
                          checkpoint_every=1)


def tiny_pairs(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        sharp = textured(size, seed=seed * 100 + k).astype(np.float32)
        blurry = np.stack([ndimage.uniform_filter(sharp[..., c], 3, mode="nearest") for c in range(3)], axis=-1)
        out.append((blurry + 0.01 * rng.standard_normal(blurry.shape).astype(np.float32), sharp))
    return out


@pytest.fixture
def pairs():
    return tiny_pairs()
