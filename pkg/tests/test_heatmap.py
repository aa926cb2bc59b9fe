import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvpose.errors import ValidationError
from mvpose.heatmap import (
    Grid, HeatmapStack, confidence_at, normalize_heatmap, read_relative_depth, render_gaussian, soft_argmax,
    spatial_softmax,
)

G = Grid.regular(32, 32, 1.0)


def test_constant_map_uniform():
    p = spatial_softmax(np.full((32, 32), 3.7), 50.0)
    assert np.max(np.abs(p - 1.0 / 1024)) <= 1e-15


def test_one_hot_mass():
    s = np.zeros((32, 32))
    s[4, 9] = 1.0
    p = spatial_softmax(s, 50.0)
    assert p[4, 9] >= 1.0 - 1023 * np.exp(-50.0)


def test_zero_temperature_uniform():
    s = np.random.default_rng(0).normal(size=(8, 8)) * 100
    assert np.allclose(spatial_softmax(s, 0.0), 1.0 / 64, atol=1e-15)


def test_normalize_heatmap_uses_stack_temperature():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(3, 8, 8))
    st_ = HeatmapStack(h, np.zeros_like(h), Grid.regular(8, 8), temperature=7.0)
    assert np.allclose(normalize_heatmap(st_, 2), spatial_softmax(h[2], 7.0))


def test_point_mass_argmax():
    p = np.zeros((32, 32))
    p[7, 5] = 1.0  # row v = 7, column u = 5
    assert np.array_equal(soft_argmax(p, G), [5.0, 7.0])


def test_uniform_two_by_two():
    assert np.allclose(soft_argmax(np.full((2, 2), 0.25), Grid.regular(2, 2)), [0.5, 0.5], atol=1e-15)


def test_gaussian_centre_oracle():
    # oracle: the centroid of the rendered map, integrated numerically over the grid
    c = np.array([12.25, 20.75])
    raw = render_gaussian(c, 2.0, G)
    uu, vv = G.mesh()
    centroid = np.array([np.sum(uu * raw), np.sum(vv * raw)]) / raw.sum()
    assert np.linalg.norm(centroid - c) <= 0.05
    # the softmax of the raw map reproduces that centroid in a moderate temperature window
    assert np.linalg.norm(soft_argmax(spatial_softmax(raw, 16.0), G) - c) <= 0.05


def test_monotone_sharpening():
    rng = np.random.default_rng(2)
    s = rng.uniform(0.0, 0.5, size=(16, 16))
    s[3, 11] = 1.0
    target = np.array([11.0, 3.0])
    d = [np.linalg.norm(soft_argmax(spatial_softmax(s, lam), Grid.regular(16, 16)) - target)
         for lam in (1.0, 10.0, 50.0, 500.0)]
    assert all(a > b for a, b in zip(d, d[1:]))
    assert d[-1] <= 1e-9


@given(arrays(float, (6, 7), elements=st.floats(-5, 5)), st.sampled_from([0.0, 1.0, 50.0]))
def test_softmax_sums_to_one(s, lam):
    p = spatial_softmax(s, lam)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9


@given(arrays(float, (5, 9), elements=st.floats(-20, 20)), st.floats(0.1, 4.0), st.floats(0.0, 100.0))
def test_argmax_in_convex_hull(s, stride, lam):
    g = Grid.regular(9, 5, stride)
    u, v = soft_argmax(spatial_softmax(s, lam), g)
    eps = 1e-9 * stride * 10
    assert g.grid_u[0] - eps <= u <= g.grid_u[-1] + eps
    assert g.grid_v[0] - eps <= v <= g.grid_v[-1] + eps


def test_depth_readout_examples():
    p = np.zeros((4, 4))
    p[1, 2] = 1.0
    hz = np.arange(16.0).reshape(4, 4)
    assert read_relative_depth(p, hz) == 6.0
    q = np.random.default_rng(3).dirichlet(np.ones(16)).reshape(4, 4)
    assert read_relative_depth(q, np.full((4, 4), 0.3)) == pytest.approx(0.3, abs=1e-15)
    two = np.zeros((4, 4))
    two[0, 0] = two[3, 3] = 0.5
    hz2 = np.zeros((4, 4))
    hz2[0, 0], hz2[3, 3] = 1.0, 3.0
    assert read_relative_depth(two, hz2) == 2.0


def test_depth_readout_root_recentred():
    rng = np.random.default_rng(4)
    p = spatial_softmax(rng.normal(size=(5, 6, 6)), 3.0)
    z = read_relative_depth(p, rng.normal(size=(5, 6, 6)), root=2)
    assert z[2] == 0.0


@given(st.integers(0, 2**31 - 1), st.floats(-10, 10))
def test_depth_readout_linear(seed, a):
    rng = np.random.default_rng(seed)
    p = spatial_softmax(rng.normal(size=(3, 5, 5)), 2.0)
    hz = rng.normal(size=(3, 5, 5))
    assert np.allclose(read_relative_depth(p, a * hz), a * read_relative_depth(p, hz), atol=1e-12)


def test_render_gaussian():
    m = render_gaussian((10.0, 12.0), 2.0, G)
    assert m[12, 10] == 1.0
    assert m[12, 12] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert render_gaussian((500.0, -400.0), 2.0, G).max() < 1e-6
    with pytest.raises(ValidationError):
        render_gaussian((0, 0), 0.0, G)


def test_confidence_lookup():
    c = (10.0, 12.0)
    assert confidence_at(render_gaussian(c, 2.0, G), c, G) == 1.0
    m = np.zeros((32, 32))
    m[5, 6] = 0.37
    assert confidence_at(m, (6.0, 5.0), G) == pytest.approx(0.37, abs=1e-15)
    assert confidence_at(m, (6.5, 5.0), G) == pytest.approx(0.185, abs=1e-15)
    assert confidence_at(m, (-3.0, 5.0), G) == 0.0
    assert confidence_at(np.full((32, 32), 2.0), (3.0, 3.0), G) == 1.0


def test_binary_layout_round_trip():
    rng = np.random.default_rng(5)
    st_ = HeatmapStack(rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)), Grid.regular(4, 3), 50.0)
    data = st_.to_bytes()
    assert struct.unpack("<qqqd", data[:32]) == (2, 4, 3, 50.0)
    assert np.array_equal(np.frombuffer(data[32:56], "<f8"), st_.h2d[0, :3].ravel()[:3])
    back = HeatmapStack.from_bytes(data)
    assert np.array_equal(back.h2d, st_.h2d) and np.array_equal(back.hz, st_.hz)
    with pytest.raises(ValidationError):
        HeatmapStack.from_bytes(data[:-8])


def test_stack_shape_mismatch():
    with pytest.raises(ValidationError):
        HeatmapStack(np.zeros((2, 3, 4)), np.zeros((2, 3, 5)), Grid.regular(4, 3))
