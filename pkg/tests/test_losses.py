from __future__ import annotations

import math

import numpy as np
import pytest
from oracles import central_diff

from bevpretrain.grid import BevGridSpec
from bevpretrain.losses import (
    RECON_VARIANTS, ProjectionHead, correlation_loss, pretrain_loss, reconstruction_loss, smooth_l1,
)
from bevpretrain.scene import Box3D

SPEC = BevGridSpec(-8.0, 8.0, -8.0, 8.0, 8, 8)
BOX = Box3D(1.0, -2.0, 0.5, 2.0, 1.0, 3.0, 0.3)


def _const_head(value, frozen=False, in_dim=4 * 9):
    """Head whose output ignores the input: w1 = w2 = 0, b2 = value."""
    params = {"w1": np.zeros((3, in_dim)), "b1": np.zeros(3), "w2": np.zeros((1, 3)), "b2": np.array([value])}
    return ProjectionHead(params, frozen)


def test_identical_maps_give_zero():
    S = np.random.default_rng(0).standard_normal((3, 4, 4))
    for v in RECON_VARIANTS:
        loss, grad = reconstruction_loss(S, S.copy(), np.ones((4, 4)), v)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_single_cell_l2_arithmetic():
    loss, grad = reconstruction_loss(np.zeros((1, 1, 1)), np.full((1, 1, 1), 2.0), np.ones((1, 1)), "L2")
    assert loss == 4.0
    assert grad[0, 0, 0] == -4.0


def test_single_cell_l1_and_kl():
    loss, _ = reconstruction_loss(np.zeros((1, 1, 1)), np.full((1, 1, 1), 2.0), np.ones((1, 1)), "L1")
    assert loss == 2.0
    # KL between softmax([1, 0]) and softmax([0, 0])
    T = np.array([1.0, 0.0]).reshape(2, 1, 1)
    loss, _ = reconstruction_loss(np.zeros((2, 1, 1)), T, np.ones((1, 1)), "KL")
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert loss == pytest.approx(float((p * np.log(p / 0.5)).sum()), rel=1e-12)


@pytest.mark.parametrize("variant", RECON_VARIANTS)
def test_zero_mask_zero_loss(variant, rng):
    S, T = rng.standard_normal((2, 3, 5, 5))
    loss, grad = reconstruction_loss(S, T, np.zeros((5, 5)), variant)
    assert loss == 0.0 and not np.any(grad)


@pytest.mark.parametrize("variant", RECON_VARIANTS)
def test_reconstruction_gradient(variant, rng):
    S = rng.standard_normal((3, 4, 5))
    T = rng.standard_normal((3, 4, 5))
    R = rng.uniform(0, 2, size=(4, 5))
    _, grad = reconstruction_loss(S, T, R, variant)
    fd = central_diff(lambda: reconstruction_loss(S, T, R, variant)[0], S)
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_reconstruction_rejects_bad_shapes():
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), -np.ones((3, 3)))
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.ones((3, 3)), "L3")


def test_smooth_l1_branches():
    val, der = smooth_l1(np.array([0.4, 3.0, -3.0]))
    np.testing.assert_allclose(val, [0.08, 2.5, 2.5])
    np.testing.assert_allclose(der, [0.4, 1.0, -1.0])


def test_correlation_identical_branches_zero(rng):
    S = rng.standard_normal((4, 8, 8))
    phi1 = ProjectionHead.init(4 * 9, 6, 5, rng)
    loss, gS, _ = correlation_loss(S, S.copy(), [BOX], phi1, phi1.copy(frozen=True), 3, SPEC)
    assert loss == 0.0
    assert not np.any(gS)


@pytest.mark.parametrize("es,expect", [(0.4, 0.08), (3.0, 2.5)])
def test_correlation_one_dimensional_embeddings(es, expect, rng):
    S, T = rng.standard_normal((2, 4, 8, 8))
    loss, _, _ = correlation_loss(S, T, [BOX], _const_head(es), _const_head(0.0, frozen=True), 3, SPEC)
    assert loss == pytest.approx(expect, abs=1e-12)


def test_correlation_requires_frozen_teacher_branch(rng):
    S = rng.standard_normal((4, 8, 8))
    with pytest.raises(ValueError):
        correlation_loss(S, S, [BOX], _const_head(0.0), _const_head(0.0), 3, SPEC)


def test_correlation_without_boxes(rng):
    S, T = rng.standard_normal((2, 4, 8, 8))
    phi1 = ProjectionHead.init(36, 6, 5, rng)
    loss, gS, gphi = correlation_loss(S, T, [], phi1, phi1.copy(frozen=True), 3, SPEC)
    assert loss == 0.0 and not np.any(gS) and not any(np.any(v) for v in gphi.values())


def test_correlation_gradients(rng):
    S, T = rng.standard_normal((2, 4, 8, 8))
    boxes = [BOX, Box3D(-4.0, 4.0, 0.5, 1.5, 1.0, 2.5, -1.2)]
    phi1 = ProjectionHead.init(36, 6, 5, rng)
    phi2 = ProjectionHead.init(36, 6, 5, rng, frozen=True)
    _, gS, gphi = correlation_loss(S, T, boxes, phi1, phi2, 3, SPEC)
    f = lambda: correlation_loss(S, T, boxes, phi1, phi2, 3, SPEC)[0]
    np.testing.assert_allclose(gS, central_diff(f, S), atol=1e-8)
    for k in ProjectionHead.KEYS:
        np.testing.assert_allclose(gphi[k], central_diff(f, phi1.params[k]), atol=1e-8)


def test_teacher_branch_receives_no_gradient(rng):
    S, T = rng.standard_normal((2, 4, 8, 8))
    phi1 = ProjectionHead.init(36, 6, 5, rng)
    phi2 = ProjectionHead.init(36, 6, 5, rng, frozen=True)
    before = {k: v.copy() for k, v in phi2.params.items()}
    T0 = T.copy()
    correlation_loss(S, T, [BOX], phi1, phi2, 3, SPEC)
    assert all(np.array_equal(before[k], phi2.params[k]) for k in before)
    assert np.array_equal(T, T0)


def _combined(rng, lam_rec, lam_corr, variant="L2"):
    S, T = rng.standard_normal((2, 4, 8, 8))
    R = rng.uniform(0, 2, size=(8, 8))
    phi1 = ProjectionHead.init(36, 6, 5, rng)
    phi2 = ProjectionHead.init(36, 6, 5, rng, frozen=True)
    return S, T, R, phi1, phi2, pretrain_loss(S, T, [BOX], R, phi1, phi2, SPEC, lam_rec, lam_corr, variant, 3)


def test_zero_weights_zero_total(rng):
    *_, rep = _combined(rng, 0.0, 0.0)
    assert rep.l_total == 0.0
    assert not np.any(rep.grad_S)
    assert not any(np.any(v) for v in rep.grad_phi1_total.values())


def test_no_correlation_weight_is_pure_reconstruction(rng):
    S, T, R, *_, rep = _combined(rng, 0.7, 0.0)
    assert rep.l_total == 0.7 * rep.l_rec
    assert rep.l_rec == reconstruction_loss(S, T, R, "L2")[0]


def test_combined_gradient_is_linear_combination(rng):
    S, T, R, phi1, phi2, rep = _combined(rng, 0.6, 1.7, "KL")
    _, g_rec = reconstruction_loss(S, T, R, "KL")
    _, g_corr, _ = correlation_loss(S, T, [BOX], phi1, phi2, 3, SPEC)
    np.testing.assert_allclose(rep.grad_S, 0.6 * g_rec + 1.7 * g_corr, rtol=1e-12, atol=1e-15)
    fd = central_diff(lambda: pretrain_loss(S, T, [BOX], R, phi1, phi2, SPEC, 0.6, 1.7, "KL", 3).l_total, S)
    np.testing.assert_allclose(rep.grad_S, fd, atol=1e-8)


def test_negative_weights_rejected(rng):
    with pytest.raises(ValueError):
        _combined(rng, -1.0, 1.0)


def test_projection_head_dimensions(rng):
    head = ProjectionHead.init(36, 64, 64, rng)
    out = head(rng.standard_normal((5, 4, 3, 3)))
    assert out.shape == (5, 64)
    assert head.in_dim == 36
    assert not math.isnan(float(out.sum()))
