import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from mvpose.alignment import (
    RigidTransform, alignment_residual, apply, batched_rigid_align, weighted_rigid_align, weighted_similarity_align,
)
from mvpose.errors import DegenerateConfiguration, InsufficientSupport, ZeroSourceVariance


def test_self_alignment():
    x = np.random.default_rng(0).normal(size=(10, 3))
    T = weighted_rigid_align(x, x)
    assert np.max(np.abs(T.R - np.eye(3))) <= 1e-12
    assert np.max(np.abs(T.t)) <= 1e-12
    assert T.scale == 1.0


def test_recovers_rigid_transform():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=(12, 3))
        R0, t0 = random_rotation(rng), rng.normal(size=3) * 5
        T = weighted_rigid_align(x, x @ R0.T + t0, rng.uniform(0.1, 1.0, 12))
        assert np.max(np.abs(T.R - R0)) <= 1e-9 and np.max(np.abs(T.t - t0)) <= 1e-9


def test_zero_weight_outlier():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    y = x @ random_rotation(rng).T + 1.0 + rng.normal(size=(10, 3)) * 0.05
    w = rng.uniform(0.2, 1.0, 10)
    x_out = x.copy()
    x_out[4] += 1000.0
    w0 = w.copy()
    w0[4] = 0.0
    a = weighted_rigid_align(x_out, y, w0)
    keep = np.arange(10) != 4
    b = weighted_rigid_align(x[keep], y[keep], w[keep])
    assert np.allclose(a.R, b.R, atol=1e-12) and np.allclose(a.t, b.t, atol=1e-12)


def test_matches_scipy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=(9, 3))
        y = rng.normal(size=(9, 3))
        w = rng.uniform(0.1, 1.0, 9)
        T = weighted_rigid_align(x, y, w)
        mx = np.average(x, axis=0, weights=w)
        my = np.average(y, axis=0, weights=w)
        rot, _ = Rotation.align_vectors(y - my, x - mx, weights=w)
        assert np.max(np.abs(T.R - rot.as_matrix())) <= 1e-9


def test_similarity_examples():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 3))
    T = weighted_similarity_align(x, 2.0 * x)
    assert T.scale == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(T.R, np.eye(3), atol=1e-12) and np.allclose(T.t, 0, atol=1e-12)
    assert weighted_similarity_align(x, x).scale == pytest.approx(1.0, abs=1e-12)
    R0, t0 = random_rotation(rng), rng.normal(size=3)
    T = weighted_similarity_align(x, 0.5 * x @ R0.T + t0, rng.uniform(0.5, 1, 8))
    assert T.scale == pytest.approx(0.5, abs=1e-9)
    assert np.allclose(T.R, R0, atol=1e-9) and np.allclose(T.t, t0, atol=1e-9)


def test_apply_examples():
    x = np.random.default_rng(5).normal(size=(4, 3))
    assert np.array_equal(apply(RigidTransform.identity(), x), x)
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(apply(RigidTransform(Rz, np.zeros(3)), [[1.0, 0.0, 0.0]]), [[0.0, 1.0, 0.0]], atol=1e-12)
    T = RigidTransform(random_rotation(np.random.default_rng(6)), np.array([1.0, -2.0, 3.0]), 1.7)
    assert np.max(np.abs(apply(T, apply(T.inverse(), x)) - x)) <= 1e-10


def test_errors():
    x = np.random.default_rng(7).normal(size=(5, 3))
    with pytest.raises(InsufficientSupport):
        weighted_rigid_align(x, x, [1.0, 1.0, 0.0, 0.0, 0.0])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        weighted_rigid_align(line, line)
    with pytest.raises(ZeroSourceVariance):
        weighted_similarity_align(np.ones((5, 3)), x)
    with pytest.raises(ValueError):
        weighted_rigid_align(x, x, [1.0, -1.0, 1.0, 1.0, 1.0])


def test_batched_status():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 6, 3))
    w = np.ones((3, 6))
    w[1, 2:] = 0.0
    x[2] = np.outer(np.arange(6.0), [1.0, 0.0, 0.0])
    R, t, status = batched_rigid_align(x, x, w)
    assert list(status) == [0, 1, 2]
    assert np.allclose(R[1], np.eye(3)) and np.allclose(t[1], 0)


def reflection_case(rng):
    """Target is a mirrored copy: the unconstrained optimum is an improper orthogonal matrix."""
    x = rng.normal(size=(10, 3))
    M = random_rotation(rng) @ np.diag([1.0, 1.0, -1.0])
    return x, x @ M.T


@given(st.integers(0, 2**31 - 1))
def test_proper_rotation_even_for_reflections(seed):
    rng = np.random.default_rng(seed)
    x, y = reflection_case(rng)
    cov = (y - y.mean(0)).T @ (x - x.mean(0))
    U, _, Vt = np.linalg.svd(cov)
    assert np.linalg.det(U @ Vt) < 0  # determinant correction must engage
    for T in (weighted_rigid_align(x, y), weighted_similarity_align(x, y)):
        assert np.max(np.abs(T.R.T @ T.R - np.eye(3))) <= 1e-9
        assert abs(np.linalg.det(T.R) - 1.0) <= 1e-9


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_residual_weight_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    w = rng.uniform(0.1, 1.0, 7)
    a = weighted_rigid_align(x, y, w)
    b = weighted_rigid_align(x, y, c * w)
    assert np.allclose(a.R, b.R, atol=1e-9)
    assert alignment_residual(b, x, y, c * w) == pytest.approx(c * alignment_residual(a, x, y, w), rel=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_rigid_residual_noiseless(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 3)) * 0.5
    y = x @ random_rotation(rng).T + rng.normal(size=3)
    w = rng.uniform(0.0, 1.0, 15)
    assert alignment_residual(weighted_rigid_align(x, y, w), x, y, w) <= 1e-9
