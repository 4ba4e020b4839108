import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contact_forecast.errors import EmptyRegionError, InvalidInputError, InvalidParameterError
from contact_forecast.geom import (MotionSequence, Pose, SceneCloud, assemble_global,
                                   brute_force_nearest, build_spatial_index, contact_sequence,
                                   distance_map, extract_contact_points, lattice,
                                   normalize_to_contact, sample_scene_points, split_root_local)


def brute_distances(joints, pts):
    out = np.zeros((len(joints), len(pts)))
    for j, a in enumerate(joints):
        for n, b in enumerate(pts):
            out[j, n] = math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(3)))
    return out


def brute_extract(c, pts, eps):
    out = np.zeros((c.shape[0], 4))
    for j, row in enumerate(c):
        k = 0
        for n in range(1, len(row)):
            if row[n] > row[k]:
                k = n
        if row[k] > eps:
            out[j, :3] = pts[k]
            out[j, 3] = 1
    return out


# types ---------------------------------------------------------------------

def test_scene_validation():
    with pytest.raises(InvalidInputError):
        SceneCloud(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        SceneCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(InvalidInputError):
        SceneCloud(np.zeros((4, 2)))


def test_pose_validation():
    with pytest.raises(InvalidInputError):
        Pose(np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        Pose(np.zeros((3, 3)), root_index=3)


def test_motion_validation():
    with pytest.raises(InvalidInputError):
        MotionSequence(np.zeros((2, 3, 3)), fps=0)
    m = MotionSequence(np.random.default_rng(0).normal(size=(5, 4, 3)), root_index=2)
    assert m.num_frames == 5 and m.num_joints == 4
    np.testing.assert_array_equal(m.roots, m.frames[:, 2])


def test_split_assemble_roundtrip():
    x = np.random.default_rng(1).normal(size=(6, 5, 3))
    for r in (0, 3):
        roots, local = split_root_local(x, r)
        assert local.shape == (6, 4, 3)
        np.testing.assert_allclose(assemble_global(roots, local, r), x, atol=1e-15)


# distance / contact maps ---------------------------------------------------

def test_distance_axis_aligned():
    d = distance_map(np.zeros((1, 3)), np.array([[1.0, 0, 0], [0, 2.0, 0]]))
    assert d.tolist() == [[1.0, 2.0]]


def test_distance_coincident_is_zero():
    pts = np.array([[0.3, 0.1, 2.0], [1, 1, 1]])
    assert distance_map(pts[:1], pts)[0, 0] == 0.0


def test_distance_matches_double_loop():
    rng = np.random.default_rng(2)
    j, p = rng.normal(size=(3, 3)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(distance_map(Pose(j), SceneCloud(p)), brute_distances(j, p), rtol=1e-14)


def test_distance_empty():
    with pytest.raises(InvalidInputError):
        distance_map(np.zeros((0, 3)), np.zeros((2, 3)))


def test_normalize_values():
    assert normalize_to_contact(np.array(0.0)) == 1.0
    assert normalize_to_contact(np.array(0.2), 0.2) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert normalize_to_contact(np.array(2.0), 0.2) < 1e-21


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_normalize_bad_sigma(sigma):
    with pytest.raises(InvalidParameterError):
        normalize_to_contact(np.ones(2), sigma)


@settings(max_examples=40)
@given(st.lists(st.integers(0, 1_500_000), min_size=2, max_size=30))
def test_contact_monotone_and_bounded(micro):
    # micrometre grid: distinct distances stay distinguishable after exp()
    d = np.array(micro) * 1e-6
    c = normalize_to_contact(d, 0.2)
    assert np.all((c > 0) & (c <= 1))
    assert np.all((c == 1) == (d == 0))
    for a in range(len(d)):
        for b in range(len(d)):
            if d[a] < d[b]:
                assert c[a] > c[b]


def test_contact_sequence_static_frames_identical():
    rng = np.random.default_rng(3)
    pose, pts = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    c = contact_sequence(np.repeat(pose[None], 5, axis=0), pts)
    assert c.shape == (5, 4, 7)
    for f in range(1, 5):
        np.testing.assert_array_equal(c[f], c[0])


def test_contact_sequence_single_frame():
    rng = np.random.default_rng(4)
    pose, pts = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    np.testing.assert_array_equal(contact_sequence(pose[None], pts)[0],
                                  normalize_to_contact(distance_map(pose, pts)))


def test_contact_sequence_matches_oracle():
    rng = np.random.default_rng(5)
    m = MotionSequence(rng.normal(size=(3, 4, 3)))
    pts = rng.normal(size=(6, 3))
    c = contact_sequence(m, SceneCloud(pts), 0.3)
    for f in range(3):
        np.testing.assert_allclose(c[f], np.exp(-brute_distances(m.frames[f], pts) ** 2 / (2 * 0.09)),
                                   rtol=1e-13)


# contact points ------------------------------------------------------------

def test_extract_above_threshold():
    pts = np.arange(12, dtype=float).reshape(4, 3)
    c = np.array([[0.1, 0.2, 0.9, 0.3]])
    np.testing.assert_array_equal(extract_contact_points(c, pts, 0.32), [[6, 7, 8, 1]])


def test_extract_below_threshold():
    pts = np.arange(12, dtype=float).reshape(4, 3)
    c = np.array([[0.1, 0.2, 0.3, 0.31]])
    np.testing.assert_array_equal(extract_contact_points(c, pts, 0.32), [[0, 0, 0, 0]])


def test_extract_tie_lowest_index():
    pts = np.arange(12, dtype=float).reshape(4, 3)
    c = np.array([[0.1, 0.8, 0.2, 0.8]])
    np.testing.assert_array_equal(extract_contact_points(c, pts, 0.32), brute_extract(c, pts, 0.32))
    assert extract_contact_points(c, pts, 0.32)[0, :3].tolist() == [3, 4, 5]


def test_extract_shape_mismatch():
    with pytest.raises(InvalidInputError):
        extract_contact_points(np.ones((2, 5)), np.zeros((4, 3)))


def test_extract_sequence_shape():
    rng = np.random.default_rng(6)
    c = rng.uniform(size=(5, 3, 8))
    pts = rng.normal(size=(8, 3))
    q = extract_contact_points(c, pts, 0.5)
    assert q.shape == (5, 3, 4)
    for f in range(5):
        np.testing.assert_array_equal(q[f], brute_extract(c[f], pts, 0.5))


def test_extract_epsilon_extremes():
    rng = np.random.default_rng(7)
    j, pts = rng.normal(size=(5, 3)), rng.normal(size=(9, 3))
    c = normalize_to_contact(distance_map(j, pts), 1.0)
    assert np.all(extract_contact_points(c, pts, 1e-300)[:, 3] == 1)
    assert np.all(extract_contact_points(c, pts, 1 - 1e-16)[:, 3] == 0)


def test_flagged_point_is_nearest():
    rng = np.random.default_rng(8)
    for _ in range(20):
        j, pts = rng.normal(size=(4, 3)), rng.normal(size=(30, 3))
        d = distance_map(j, pts)
        q = extract_contact_points(normalize_to_contact(d, 1.0), pts, 0.01)
        for k in range(4):
            if q[k, 3]:
                np.testing.assert_array_equal(q[k, :3], pts[np.argmin(d[k])])


# spatial index -------------------------------------------------------------

def test_index_singleton():
    idx = build_spatial_index(SceneCloud(np.array([[1.0, 2.0, 3.0]])))
    for q in np.random.default_rng(9).normal(size=(10, 3)) * 10:
        assert idx.nearest(q)[0] == 0


def test_index_lattice_exact_hit():
    pts = lattice(3, 0.5)
    idx = build_spatial_index(pts)
    i, d = idx.nearest(pts[13])
    assert i == 13 and d == 0.0


def test_index_matches_brute_force():
    rng = np.random.default_rng(10)
    pts = rng.uniform(-2, 2, size=(1000, 3))
    idx = build_spatial_index(pts)
    for q in rng.uniform(-3, 3, size=(100, 3)):
        assert idx.nearest(q) == brute_force_nearest(pts, q)
        r = rng.uniform(0, 1.0)
        d = np.sqrt(((pts - q) ** 2).sum(axis=1))
        np.testing.assert_array_equal(idx.within_radius(q, r), np.flatnonzero(d <= r))


def test_index_ties_and_duplicates():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    idx = build_spatial_index(pts)
    assert idx.nearest([0.0, 0.0, 0.0])[0] == 0
    assert idx.nearest([1.0, 0.0, 0.0]) == (0, 0.0)


def test_index_degenerate_plane():
    rng = np.random.default_rng(11)
    pts = np.c_[rng.uniform(size=(200, 2)), np.zeros(200)]
    idx = build_spatial_index(pts)
    for q in rng.uniform(-1, 2, size=(30, 3)):
        assert idx.nearest(q) == brute_force_nearest(pts, q)


def test_index_negative_radius():
    with pytest.raises(InvalidParameterError):
        build_spatial_index(lattice(2)).within_radius([0, 0, 0], -1)


# sampling ------------------------------------------------------------------

def test_sample_all_within_radius():
    pts = lattice(3, 0.5)
    out = sample_scene_points(SceneCloud(pts), [0.5, 0.5, 0.5], 5.0, 100, seed=0)
    np.testing.assert_array_equal(out.points, pts)


def test_sample_respects_radius():
    rng = np.random.default_rng(12)
    pts = rng.uniform(-5, 5, size=(2000, 3))
    out = sample_scene_points(SceneCloud(pts), np.zeros(3), 2.5, 100, seed=1)
    assert len(out) == 100
    assert np.all(np.linalg.norm(out.points, axis=1) <= 2.5)
    assert len(np.unique(out.points, axis=0)) == 100


def test_sample_deterministic():
    pts = np.random.default_rng(13).uniform(-3, 3, size=(500, 3))
    a = sample_scene_points(SceneCloud(pts), np.zeros(3), 2.5, 50, seed=7)
    b = sample_scene_points(SceneCloud(pts), np.zeros(3), 2.5, 50, seed=7)
    np.testing.assert_array_equal(a.points, b.points)


def test_sample_empty_region():
    with pytest.raises(EmptyRegionError):
        sample_scene_points(SceneCloud(lattice(2)), [50.0, 0, 0], 2.5, 10)


@pytest.mark.parametrize("radius,count", [(0.0, 5), (1.0, 0)])
def test_sample_bad_params(radius, count):
    with pytest.raises(InvalidParameterError):
        sample_scene_points(SceneCloud(lattice(2)), [0, 0, 0], radius, count)
