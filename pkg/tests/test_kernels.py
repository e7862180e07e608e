import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from jdrl import kernels as K
from jdrl.errors import ConfigurationError, InvalidSeedError, NumericError
from oracles import kernel_oracle, seed_count


def offsets_grid(i):
    r = i - 1
    d = np.arange(-r, r + 1, dtype=np.float64)
    return np.meshgrid(d, d, indexing="ij")  # dy, dx


@pytest.mark.parametrize("m", range(2, 13))
def test_seed_channel_count(m):
    assert K.seed_channels(m) == seed_count(m) == m * (m + 1) // 2 - 1


def test_seed_channels_m8_is_35():
    assert K.seed_channels(8) == 35


def test_split_layout_is_contiguous_ascending():
    seeds = torch.arange(35.0).view(1, 35, 1, 1)
    parts = K.split_seed_volume(seeds, 8)
    assert [p.shape[1] for p in parts] == [2, 3, 4, 5, 6, 7, 8]
    assert torch.equal(torch.cat(parts, dim=1), seeds)
    assert K.level_offsets(8) == [0, 2, 5, 9, 14, 20, 27]


def test_split_smallest_m():
    parts = K.split_seed_volume(torch.zeros(1, 2, 3, 3), 2)
    assert len(parts) == 1 and parts[0].shape[1] == 2


def test_split_rejects_wrong_channel_count():
    with pytest.raises(ConfigurationError, match="35.*34"):
        K.split_seed_volume(torch.zeros(1, 34, 2, 2), 8)


def test_build_kernel_i2():
    a0, a1 = 0.7, -1.3
    k = K.build_kernel(torch.tensor([a0, a1], dtype=torch.float64))
    expected = np.array([[0, a1, 0], [a1, a0, a1], [0, a1, 0]])
    np.testing.assert_array_equal(k.numpy(), expected)


def test_build_kernel_diagonal_interpolation():
    a = torch.tensor([0.0, 2.0, 5.0], dtype=torch.float64)
    k = K.build_kernel(a)
    s2 = math.sqrt(2)
    expected = (s2 - 2) / (1 - 2) * 2.0 + (s2 - 1) / (2 - 1) * 5.0
    assert float(k[2 + 1, 2 + 1]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5858 * 2.0 + 0.4142 * 5.0, abs=1e-3)


@pytest.mark.parametrize("i", [2, 4, 8])
def test_build_kernel_constant_seed(i):
    k = K.build_kernel(torch.full((i,), 1.5, dtype=torch.float64)).numpy()
    dy, dx = offsets_grid(i)
    inside = dx ** 2 + dy ** 2 <= (i - 1) ** 2
    assert np.all(k[inside] == 1.5)
    assert np.all(k[~inside] == 0.0)


def test_build_kernel_rejects_short_seed():
    with pytest.raises(InvalidSeedError):
        K.build_kernel(torch.tensor([1.0]))


def test_normalize_zero_seed_modes():
    raw = K.build_kernel(torch.zeros(2, dtype=torch.float64))
    k_all = K.normalize_kernel(raw, K.SOFTMAX_ALL)
    assert torch.allclose(k_all, torch.full((3, 3), 1 / 9, dtype=torch.float64))
    k_disc = K.normalize_kernel(raw, K.SOFTMAX_IN_DISC).numpy()
    assert np.all(k_disc[[0, 0, 2, 2], [0, 2, 0, 2]] == 0.0)
    np.testing.assert_allclose(k_disc[[0, 1, 1, 1, 2], [1, 0, 1, 2, 1]], 0.2, atol=1e-15)


def test_normalize_rejects_nonfinite():
    raw = K.build_kernel(torch.tensor([0.0, float("nan")]))
    with pytest.raises(NumericError, match="level 2"):
        K.normalize_kernel(raw)


def test_bank_rejects_nonfinite_seed():
    seeds = torch.zeros(1, 5, 2, 2)
    seeds[0, 3, 1, 0] = float("inf")
    with pytest.raises(NumericError):
        K.IsotropicKernelBank(seeds, 3).kernels(3)


def test_single_pixel_bank_matches_composition():
    seed = torch.tensor([0.3, -0.8], dtype=torch.float64)
    bank = K.IsotropicKernelBank(seed.view(1, 2, 1, 1), 2)
    expected = K.normalize_kernel(K.build_kernel(seed))
    assert torch.allclose(bank.kernel_at(2, 0, 0, 0), expected, atol=1e-15, rtol=0)


def test_bank_m8_kernel_sizes():
    bank = K.IsotropicKernelBank(torch.zeros(1, 35, 2, 2), 8)
    sizes = [int(math.isqrt(bank.kernels(i).shape[1])) for i in bank.levels]
    assert sizes == [3, 5, 7, 9, 11, 13, 15]


@pytest.mark.parametrize("mode", K.NORMALIZATION_MODES)
def test_bank_matches_brute_force(mode):
    gen = torch.Generator().manual_seed(3)
    seeds = torch.randn(2, 35, 3, 3, generator=gen, dtype=torch.float64) * 2
    bank = K.IsotropicKernelBank(seeds, 8, mode)
    parts = K.split_seed_volume(seeds, 8)
    for i in bank.levels:
        for b in range(2):
            for y in range(3):
                for x in range(3):
                    ref = kernel_oracle(parts[i - 2][b, :, y, x].numpy(), mode)
                    np.testing.assert_allclose(bank.kernel_at(i, b, y, x).numpy(), ref, atol=1e-12)


@pytest.mark.parametrize("mode", K.NORMALIZATION_MODES)
def test_kernel_invariants(mode):
    gen = torch.Generator().manual_seed(7)
    seeds = torch.randn(1, 35, 4, 4, generator=gen, dtype=torch.float64) * 3
    bank = K.IsotropicKernelBank(seeds, 8, mode)
    for i in bank.levels:
        dy, dx = offsets_grid(i)
        rho2 = (dx ** 2 + dy ** 2).astype(int)
        for y in range(4):
            for x in range(4):
                k = bank.kernel_at(i, 0, y, x).numpy()
                assert abs(k.sum() - 1) < 1e-12
                assert abs((k * dx).sum()) < 1e-12 and abs((k * dy).sum()) < 1e-12
                # dihedral symmetry
                for t in (k.T, k[::-1], k[:, ::-1], np.rot90(k)):
                    assert np.array_equal(t, k)
                for r2 in np.unique(rho2):
                    vals = k[rho2 == r2]
                    assert np.all(vals == vals[0])
                if mode == K.SOFTMAX_ALL:
                    assert k.min() > 0
                else:
                    assert np.all(k[rho2 > (i - 1) ** 2] == 0.0)


def test_shift_invariance_per_level_in_disc():
    gen = torch.Generator().manual_seed(1)
    seeds = torch.randn(1, 35, 2, 2, generator=gen, dtype=torch.float64)
    shifted = seeds.clone()
    shifted[:, 9:14] += 4.25  # level 5
    a = K.IsotropicKernelBank(seeds, 8, K.SOFTMAX_IN_DISC)
    b = K.IsotropicKernelBank(shifted, 8, K.SOFTMAX_IN_DISC)
    assert torch.allclose(a.kernels(5), b.kernels(5), atol=1e-9, rtol=0)
    assert torch.equal(a.kernels(4), b.kernels(4))


def test_softmax_all_is_not_shift_invariant():
    # out-of-disc cells keep raw value 0, so a seed offset changes their share
    seeds = torch.zeros(1, 5, 1, 1, dtype=torch.float64)
    a = K.IsotropicKernelBank(seeds, 3).kernel_at(3, 0, 0, 0)
    b = K.IsotropicKernelBank(seeds + 1.0, 3).kernel_at(3, 0, 0, 0)
    assert float(b[0, 0]) < float(a[0, 0])


def test_class_path_matches_materialized_cells():
    gen = torch.Generator().manual_seed(2)
    seeds = torch.randn(1, 35, 2, 3, generator=gen, dtype=torch.float64)
    bank = K.IsotropicKernelBank(seeds, 8)
    for i in bank.levels:
        assert K.radius_class_count(i) == bank.class_values(i).shape[1]
        rings = K.class_indicator(i, torch.float64)[:, 0]
        rebuilt = torch.einsum("nyx,bnhw->byxhw", rings, bank.class_values(i))
        k = 2 * i - 1
        assert torch.allclose(rebuilt.reshape(1, k * k, 2, 3), bank.kernels(i), atol=1e-15)


def test_bank_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(4)
    seeds = torch.randn(1, 35, 1, 1, generator=gen, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(sum((2 * i - 1) ** 2 for i in range(2, 9)), generator=gen, dtype=torch.float64)

    def fn(s):
        bank = K.IsotropicKernelBank(s, 8)
        return torch.cat([bank.kernels(i).flatten() for i in bank.levels])

    assert torch.autograd.gradcheck(fn, (seeds,), eps=1e-6, atol=1e-9, rtol=1e-4)
    # scalar projection for a relative-error figure
    (g,) = torch.autograd.grad((fn(seeds) * probe).sum(), seeds)
    num = torch.zeros_like(seeds)
    with torch.no_grad():
        for c in range(35):
            d = torch.zeros_like(seeds)
            d[0, c] = 1e-6
            num[0, c] = ((fn(seeds + d) * probe).sum() - (fn(seeds - d) * probe).sum()) / 2e-6
    assert float((g - num).norm() / num.norm()) < 1e-4


def test_free_form_bank():
    assert K.free_form_channels(8) == 679
    logits = torch.randn(1, 679, 2, 2)
    bank = K.FreeFormKernelBank(logits, 8)
    assert not bank.isotropic
    for i in bank.levels:
        assert torch.allclose(bank.kernels(i).sum(1), torch.ones(1, 2, 2), atol=1e-6)
    with pytest.raises(ConfigurationError):
        K.FreeFormKernelBank(torch.zeros(1, 35, 2, 2), 8)


def test_release_drops_cache():
    bank = K.IsotropicKernelBank(torch.zeros(1, 5, 2, 2), 3)
    bank.kernels(3)
    bank.release(3)
    assert 3 not in bank._cache and ("classes", 3) not in bank._cache


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.lists(st.floats(-6, 6), min_size=8, max_size=8))
def test_property_oracle_any_seed(i, values):
    seed = torch.tensor(values[:i], dtype=torch.float64)
    k = K.normalize_kernel(K.build_kernel(seed)).numpy()
    np.testing.assert_allclose(k, kernel_oracle(values[:i]), atol=1e-12)
