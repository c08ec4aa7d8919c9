import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecafm import baselines as B
from sparsecafm.errors import ResourceError, ValidationError
from sparsecafm.scanio import Channel, ScanField, normalize


def raw(a):
    return ScanField(np.asarray(a, np.float32), Channel.CURRENT)


def test_keys_kernel_values():
    t = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5])
    np.testing.assert_allclose(B._keys(t), [1.0, 0.5625, 0.0, -0.0625, 0.0, 0.0])


def test_cubic_matrix_partition_of_unity():
    for s in (2, 4, 8):
        np.testing.assert_allclose(B.cubic_matrix(9, s).sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("sigma", [2, 4, 8])
def test_bicubic_constant(sigma):
    out = B.bicubic_upsample(raw(np.full((6, 5), 3.25)), sigma)
    assert out.shape == (6 * sigma, 5 * sigma)
    np.testing.assert_allclose(out.data, 3.25, atol=1e-6)


@pytest.mark.parametrize("sigma", [2, 4, 8])
def test_bicubic_hits_lattice(sigma):
    a = np.random.default_rng(sigma).random((7, 9))
    out = B.bicubic_upsample(raw(a), sigma)
    np.testing.assert_allclose(out.data[::sigma, ::sigma], a.astype(np.float32), atol=1e-6)


def test_bicubic_reproduces_quadratic_interior():
    # Keys (a = -0.5) is exact for polynomials up to degree 2 away from clamped edges
    y, x = np.mgrid[0:8, 0:8].astype(np.float64)
    f = lambda yy, xx: 0.02 * yy**2 - 0.03 * xx * yy + 0.05 * xx + 1.0
    out = B.bicubic_upsample(raw(f(y, x)), 4).data
    Y, X = np.mgrid[0:32, 0:32] / 4.0
    sl = slice(4, 24)
    np.testing.assert_allclose(out[sl, sl], f(Y, X)[sl, sl], atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.sampled_from([2, 4]))
def test_bicubic_linear(seed, k, sigma):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6)), rng.random((5, 6))
    lhs = B.bicubic_upsample(raw(a + k * b), sigma).data
    rhs = B.bicubic_upsample(raw(a), sigma).data + k * B.bicubic_upsample(raw(b), sigma).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_bicubic_normalized_is_clipped():
    a = normalize(raw(np.kron(np.eye(4), np.ones((1, 1)))))
    out = B.bicubic_upsample(a, 4)
    assert out.data.min() >= 0 and out.data.max() <= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 5), st.floats(0.1, 3))
def test_rbf_kernel_symmetric_psd(seed, ls, var):
    pts = np.random.default_rng(seed).random((20, 2)) * 10
    K = B.rbf_kernel(pts, pts, ls, var)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(K), var)
    assert np.linalg.eigvalsh(K).min() > -1e-9 * var


def test_gpr_interpolates_observations():
    a = normalize(raw(np.random.default_rng(0).random((16, 16))))
    out = B.gpr_upsample(a, 4, B.GprConfig(noise_variance=0.0))
    assert np.max(np.abs(out.data[::4, ::4].astype(np.float64) - a.data)) < 1e-6


def test_gpr_constant():
    out = B.gpr_upsample(raw(np.full((8, 8), 2.0)), 2)
    np.testing.assert_allclose(out.data, 2.0, atol=1e-6)


def test_gpr_full_frame_x8_rejected():
    with pytest.raises(ResourceError, match="max_points"):
        B.gpr_upsample(raw(np.zeros((64, 64))), 8)


def test_gpr_explicit_full_frame_rejected():
    with pytest.raises(ResourceError):
        B.gpr_upsample(raw(np.zeros((256, 256))), 2, tiled=False)


def test_gpr_tiled_interpolates_across_seams():
    # every tile interpolates its own observations, so the cosine blend does too
    a = raw(np.random.default_rng(4).random((48, 40)))
    cfg = B.GprConfig(noise_variance=0.0, max_points=1024, tile_obs=16, tile_overlap=4)
    out = B.gpr_upsample(a, 2, cfg, tiled=True)
    assert out.shape == (96, 80)
    assert np.max(np.abs(out.data[::2, ::2].astype(np.float64) - a.data)) < 1e-5


def test_gpr_auto_tiling_choice():
    a = raw(np.random.default_rng(0).random((64, 64)))
    cfg = B.GprConfig(max_points=4096, tile_obs=16, tile_overlap=4)
    assert B.gpr_upsample(a, 2, cfg).shape == (128, 128)
    with pytest.raises(ResourceError):
        B.gpr_upsample(raw(np.zeros((16, 16))), 8, cfg)


def test_gpr_config_validation():
    with pytest.raises(ValidationError):
        B.GprConfig(kernel="matern")
    with pytest.raises(ValidationError):
        B.GprConfig(length_scale=-1)
    with pytest.raises(ValidationError):
        B.GprConfig(tile_obs=8, tile_overlap=4)
