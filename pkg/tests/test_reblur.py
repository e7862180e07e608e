import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from jdrl import kernels as K
from jdrl.errors import NumericError, ShapeError
from jdrl.reblur import (GATHER_BUDGET, apply_isotropic_level, apply_kernel_level, assemble_reblur_stack,
                         charbonnier, combine, normalize_weights, reblur, reblur_loss)
import jdrl.reblur as R
from oracles import fd_relative_error, gather_oracle

D = torch.float64


def rand(*shape, seed=0, scale=1.0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D) * scale


def random_kernels(b, i, h, w, seed=0):
    k = 2 * i - 1
    return torch.softmax(rand(b, k * k, h, w, seed=seed), dim=1)


def test_constant_image_preserved():
    img = torch.full((1, 3, 6, 7), 0.42, dtype=D)
    out = apply_kernel_level(img, random_kernels(1, 3, 6, 7))
    assert torch.allclose(out, img, atol=1e-15)


def test_gather_matches_loop_oracle():
    img = rand(1, 3, 8, 8, seed=1)
    kern = random_kernels(1, 3, 8, 8, seed=2)
    ref = gather_oracle(img[0].numpy(), kern[0].permute(1, 2, 0).reshape(8, 8, 5, 5).numpy())
    np.testing.assert_allclose(apply_kernel_level(img, kern)[0].numpy(), ref, atol=1e-12)


def test_gather_strips_match_single_pass(monkeypatch):
    img = rand(2, 3, 9, 8, seed=3)
    kern = random_kernels(2, 2, 9, 8, seed=4)
    full = apply_kernel_level(img, kern)
    monkeypatch.setattr(R, "GATHER_BUDGET", 2 * 3 * 9 * 8 * 2)
    assert torch.allclose(apply_kernel_level(img, kern), full, atol=1e-14)
    assert GATHER_BUDGET == 1 << 25


def test_gather_shape_errors():
    with pytest.raises(ShapeError):
        apply_kernel_level(rand(1, 3, 4, 4), random_kernels(1, 2, 4, 5))
    with pytest.raises(ShapeError):
        apply_kernel_level(rand(1, 3, 4, 4), torch.ones(1, 8, 4, 4, dtype=D))


@pytest.mark.parametrize("i", [2, 5, 8])
def test_ring_sum_path_matches_gather(i):
    seeds = rand(2, i, 10, 9, seed=i)
    img = rand(2, 3, 10, 9, seed=10 + i)
    values = K.synthesize_class_values(seeds)
    direct = apply_kernel_level(img, K.synthesize_level(seeds))
    assert torch.allclose(apply_isotropic_level(img, values, i), direct, atol=1e-13)


def test_stack_levels():
    img = rand(1, 3, 6, 6)
    stack = assemble_reblur_stack(img, K.IsotropicKernelBank(rand(1, 2, 6, 6), 2))
    assert len(stack) == 2 and stack[0] is img
    stack8 = assemble_reblur_stack(img, K.IsotropicKernelBank(rand(1, 35, 6, 6), 8))
    assert len(stack8) == 8 and all(s.shape == img.shape for s in stack8)


def test_stack_extent_mismatch():
    with pytest.raises(ShapeError):
        assemble_reblur_stack(rand(1, 3, 6, 6), K.IsotropicKernelBank(rand(1, 2, 5, 6), 2))


def test_zero_seed_in_disc_is_uniform_disc_blur():
    img = rand(1, 1, 9, 9, seed=5)
    bank = K.IsotropicKernelBank(torch.zeros(1, 5, 9, 9, dtype=D), 3, K.SOFTMAX_IN_DISC)
    out = assemble_reblur_stack(img, bank)[2]
    disc = np.array([[0, 0, 1, 0, 0], [0, 1, 1, 1, 0], [1, 1, 1, 1, 1], [0, 1, 1, 1, 0], [0, 0, 1, 0, 0]], float)
    disc /= disc.sum()
    kern = torch.tensor(np.broadcast_to(disc.reshape(25, 1, 1), (25, 9, 9)).copy())[None]
    assert torch.allclose(out, apply_kernel_level(img, kern), atol=1e-14)


def test_normalize_weights():
    w = normalize_weights(torch.zeros(1, 8, 3, 3))
    assert torch.allclose(w, torch.full_like(w, 1 / 8))
    raw = torch.zeros(1, 8, 2, 2)
    raw[:, 0] = 20
    assert float(normalize_weights(raw)[:, 0].min()) > 1 - 1e-6
    w = normalize_weights(rand(2, 8, 5, 5, scale=4))
    assert torch.allclose(w.sum(1), torch.ones(2, 5, 5, dtype=D), atol=1e-12) and (w >= 0).all()
    with pytest.raises(NumericError):
        normalize_weights(torch.tensor([[[[float("nan")]], [[0.0]]]]))


def test_combine_one_hot_identity():
    img = rand(1, 3, 4, 4)
    stack = [img, rand(1, 3, 4, 4, seed=1)]
    w = torch.zeros(1, 2, 4, 4, dtype=D)
    w[:, 0] = 1
    assert torch.equal(combine(stack, w), img)


def test_combine_matches_per_pixel_oracle():
    stack = [rand(1, 3, 4, 4, seed=s) for s in range(4)]
    w = normalize_weights(rand(1, 4, 4, 4, seed=9))
    out = combine(stack, w).numpy()
    for y in range(4):
        for x in range(4):
            for c in range(3):
                ref = sum(float(w[0, l, y, x]) * float(stack[l][0, c, y, x]) for l in range(4))
                assert abs(out[0, c, y, x] - ref) < 1e-7


def test_combine_shape_errors():
    with pytest.raises(ShapeError):
        combine([rand(1, 3, 4, 4)] * 2, torch.ones(1, 3, 4, 4, dtype=D))


def test_constant_image_through_full_operator():
    img = torch.full((1, 3, 6, 6), 0.3, dtype=D)
    out = reblur(img, K.IsotropicKernelBank(rand(1, 35, 6, 6), 8), rand(1, 8, 6, 6, seed=2))
    assert torch.allclose(out, img, atol=1e-14)


def test_charbonnier_cases():
    a = torch.rand(1, 3, 4, 4, dtype=D)
    assert float(reblur_loss(a, a)) == pytest.approx(1e-3, abs=1e-15)
    x, y = torch.tensor([[[[0.8]]]], dtype=D), torch.tensor([[[[0.5]]]], dtype=D)
    assert float(reblur_loss(x, y)) == pytest.approx(np.sqrt(0.09 + 1e-6), abs=1e-12)
    assert float(reblur_loss(x, y)) == pytest.approx(0.3000017, abs=1e-7)
    b = torch.rand(1, 3, 4, 4, dtype=D)
    assert float(reblur_loss(a, b)) == float(reblur_loss(b, a))
    g = float(charbonnier(a, b, reduction="global"))
    assert g == pytest.approx(float(torch.sqrt(((a - b) ** 2).sum() + 1e-6)), abs=1e-12)
    with pytest.raises(ValueError):
        charbonnier(a, b, reduction="median")
    with pytest.raises(ShapeError):
        charbonnier(a, b[..., :3])


def ramp_image(h, w):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=D), torch.arange(w, dtype=D), indexing="ij")
    return torch.stack([xs, ys, 0.5 * xs - 2.0 * ys])[None]


def test_spatially_varying_reblur_keeps_ramps_in_place():
    # every per-pixel kernel has zero first moment, so a linear ramp comes back unchanged
    h = w = 24
    img = ramp_image(h, w)
    bank = K.IsotropicKernelBank(rand(1, 35, h, w, scale=3, seed=11), 8)
    out = reblur(img, bank, rand(1, 8, h, w, scale=3, seed=12))
    r = 7
    assert torch.allclose(out[..., r:-r, r:-r], img[..., r:-r, r:-r], atol=1e-10)


def test_free_form_kernels_move_ramps():
    h = w = 20
    img = ramp_image(h, w)
    bank = K.FreeFormKernelBank(rand(1, 679, h, w, scale=3, seed=13), 8)
    out = reblur(img, bank, rand(1, 8, h, w, seed=14))
    assert (out - img)[..., 7:-7, 7:-7].abs().max() > 1e-2


def test_full_operator_gradients():
    h = w = 8
    m = 4
    seeds = rand(1, K.seed_channels(m), h, w, seed=1)
    raw_w = rand(1, m, h, w, seed=2)
    img = torch.rand(1, 3, h, w, dtype=D, generator=torch.Generator().manual_seed(3))
    blurry = torch.rand(1, 3, h, w, dtype=D, generator=torch.Generator().manual_seed(4))

    def fn(t):
        bank = K.IsotropicKernelBank(t[0], m)
        return reblur_loss(reblur(t[2], bank, t[1]), blurry)

    rng = np.random.default_rng(0)
    inputs = [seeds, raw_w, img]
    for idx in range(3):
        coords = rng.choice(inputs[idx].numel(), size=min(60, inputs[idx].numel()), replace=False)
        assert fd_relative_error(fn, inputs, idx, coords) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(4, 9), st.integers(4, 9), st.integers(0, 10_000))
def test_property_ring_path_equals_gather(i, h, w, seed):
    seeds = rand(1, i, h, w, seed=seed, scale=2)
    img = rand(1, 2, h, w, seed=seed + 1)
    a = apply_isotropic_level(img, K.synthesize_class_values(seeds), i)
    b = apply_kernel_level(img, K.synthesize_level(seeds))
    assert torch.allclose(a, b, atol=1e-12)
