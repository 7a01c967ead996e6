from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import decaying_matrix
from loraxs.adapter import (
    LoraAdapter,
    LoraXsAdapter,
    delta_weight,
    forward_adapted,
    init_lora_baseline,
    init_loraxs_random,
    init_loraxs_svd,
    kaiming_projections,
    matrix_digest,
    merge,
    svd_projections,
)
from loraxs.exceptions import ParameterError, ShapeError


def lapack_truncation(w, r):
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    return (u[:, :r] * s[:r]) @ vt[:r]


def test_delta_weight_hand_computed():
    a = np.array([[1.0, 0.0, 0.0]])
    b = np.array([[2.0], [0.0]])
    ad = LoraXsAdapter(a, b, [[3.0]], rank=1, alpha=2.0)
    # s = alpha / rank = 2, so delta = 2 * b * 3 * a
    np.testing.assert_array_equal(ad.delta_weight(), [[12.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    assert ad.scaling == 2.0 and ad.shape == (2, 3) and ad.n_trainable == 1


@pytest.mark.parametrize("m, n, r", [(8, 8, 2), (12, 5, 3), (5, 12, 5)])
def test_svd_projection_shapes_and_subspace(rng, m, n, r):
    w = decaying_matrix(rng, m, n)
    a, b = svd_projections(w, r)
    assert a.shape == (r, n) and b.shape == (m, r)
    np.testing.assert_allclose(a @ a.T, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(b @ a, lapack_truncation(w, r), atol=1e-10)


@pytest.mark.parametrize("m, n, r, alpha", [(10, 10, 3, 8.0), (16, 9, 4, 16.0), (6, 11, 2, 1.0)])
def test_identity_latent_recovers_truncation(rng, m, n, r, alpha):
    w = decaying_matrix(rng, m, n)
    ad = init_loraxs_svd(w, r, alpha=alpha).with_latent((r / alpha) * np.eye(r))
    expected = w + lapack_truncation(w, r)
    err = np.linalg.norm(merge(w, ad) - expected) / np.linalg.norm(expected)
    assert err <= 1e-8


def test_zero_sigma_is_identity_bitwise(rng):
    w = rng.standard_normal((9, 7))
    x = rng.standard_normal((7, 5))
    for ad in (init_loraxs_svd(w, 3, sigma=0.0), init_loraxs_random(9, 7, 3, sigma=0.0)):
        assert np.array_equal(forward_adapted(w, ad, x), w @ x)
        assert np.array_equal(merge(w, ad), w)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_merge_matches_forward(m, n, seed):
    rng = np.random.default_rng(seed)
    r = rng.integers(1, min(m, n) + 1)
    w = rng.standard_normal((m, n))
    ad = init_loraxs_svd(w, r, sigma=1.0, r_seed=seed)
    x = rng.standard_normal((n, 4))
    np.testing.assert_allclose(merge(w, ad) @ x, forward_adapted(w, ad, x), atol=1e-12, rtol=1e-12)


def test_gaussian_latent_statistics():
    w = np.random.default_rng(0).standard_normal((64, 64))
    ad = init_loraxs_svd(w, 64, sigma=1e-5, r_seed=1)
    assert abs(ad.r_latent.mean()) < 1e-6
    assert ad.r_latent.std() == pytest.approx(1e-5, rel=0.05)


def test_frozen_projections_read_only(rng):
    ad = init_loraxs_svd(rng.standard_normal((5, 5)), 2)
    with pytest.raises(ValueError):
        ad.a_frozen[0, 0] = 1.0
    with pytest.raises(ValueError):
        ad.b_frozen[0, 0] = 1.0
    assert ad.a_digest == matrix_digest(ad.a_frozen)
    assert list(ad.trainable()) == ["r_latent"]


def test_set_trainable_validates_shape(rng):
    ad = init_loraxs_svd(rng.standard_normal((5, 5)), 2)
    ad.set_trainable({"r_latent": np.ones((2, 2))})
    np.testing.assert_array_equal(ad.r_latent, np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.set_trainable({"r_latent": np.ones((3, 3))})


def test_init_reproducible(rng):
    w = rng.standard_normal((10, 8))
    a1 = init_loraxs_svd(w, 4, svd_seed=3, r_seed=5)
    a2 = init_loraxs_svd(w, 4, svd_seed=3, r_seed=5)
    for attr in ("a_frozen", "b_frozen", "r_latent"):
        assert getattr(a1, attr).tobytes() == getattr(a2, attr).tobytes()
    r1 = init_loraxs_random(10, 8, 4, seed=2)
    a, b = kaiming_projections(10, 8, 4, 2)
    assert np.array_equal(r1.a_frozen, a) and np.array_equal(r1.b_frozen, b)
    assert r1.init_kind == "random" and r1.svd_seed == 2


def test_kaiming_bounds():
    a, b = kaiming_projections(50, 40, 6, 0)
    assert np.abs(a).max() <= np.sqrt(6 / 40)
    assert np.abs(b).max() <= np.sqrt(6 / 6)


@pytest.mark.parametrize(
    "call, exc",
    [
        (lambda w: init_loraxs_svd(w, 0), ParameterError),
        (lambda w: init_loraxs_svd(w, 7), ParameterError),
        (lambda w: init_loraxs_svd(w, 2, alpha=0.0), ParameterError),
        (lambda w: init_loraxs_svd(w, 2, sigma=-1.0), ParameterError),
        (lambda w: init_loraxs_svd(w, 2, r_seed=-1), ParameterError),
        (lambda w: merge(np.ones((3, 3)), init_loraxs_svd(w, 2)), ShapeError),
        (lambda w: forward_adapted(w, init_loraxs_svd(w, 2), np.ones((5, 1))), ShapeError),
    ],
)
def test_invalid_arguments(call, exc):
    w = np.random.default_rng(1).standard_normal((6, 6))
    with pytest.raises(exc):
        call(w)


def test_adapter_constructor_rejects_inconsistent_rank():
    with pytest.raises(ShapeError):
        LoraXsAdapter(np.ones((2, 4)), np.ones((3, 2)), np.ones((3, 3)), rank=2)
    with pytest.raises(ShapeError):
        LoraXsAdapter(np.ones((2, 4)), np.ones((3, 3)), np.ones((2, 2)), rank=2)


def test_lora_baseline(rng):
    ad = init_lora_baseline(6, 4, 2, alpha=4.0, seed=1)
    assert isinstance(ad, LoraAdapter)
    assert ad.n_trainable == 2 * (6 + 4)
    np.testing.assert_array_equal(delta_weight(ad), np.zeros((6, 4)))
    ad.set_trainable({"a_train": rng.standard_normal((2, 4)), "b_train": rng.standard_normal((6, 2))})
    np.testing.assert_allclose(ad.delta_weight(), 2.0 * ad.b_train @ ad.a_train)
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(ad.apply(x), ad.delta_weight() @ x, atol=1e-13)
