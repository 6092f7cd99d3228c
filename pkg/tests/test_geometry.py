import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structfuse.geometry import (
    OBB,
    REFLECTIVE,
    ROTATIONAL,
    TRANSLATIONAL,
    DegenerateAxes,
    EmptyScene,
    SymmetryParams,
    apply_symmetry,
    normalize_scene,
    obb_allclose,
    obb_to_params,
    params_to_obb,
    rotation_matrix,
    scene_diagonal,
)


def unit_cube(center=(0.0, 0.0, 0.0)):
    return OBB(center=center, extents=(1.0, 1.0, 1.0), axis_u=(1.0, 0.0, 0.0), axis_v=(0.0, 1.0, 0.0))


# -- params round trip -------------------------------------------------------


def test_params_layout_and_roundtrip():
    b = OBB(center=(1.0, 2.0, 3.0), extents=(0.5, 1.5, 2.5), axis_u=(1, 0, 0), axis_v=(0, 1, 0))
    v = obb_to_params(b)
    assert v.shape == (12,)
    np.testing.assert_allclose(v[:3], [1, 2, 3])
    np.testing.assert_allclose(v[3:6], [0.5, 1.5, 2.5])
    b2 = params_to_obb(v)
    assert obb_allclose(b, b2)


def test_rotated_box_roundtrip_against_hand_rotation():
    # Oracle: rotate the frame by 45 degrees about z by hand.
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    u = np.array([c, s, 0.0])
    v = np.array([-s, c, 0.0])
    b = OBB(center=(0.5, -1.0, 2.0), extents=(2.0, 1.0, 0.5), axis_u=u, axis_v=v)
    got = params_to_obb(obb_to_params(b))
    np.testing.assert_allclose(got.axis_u, u, atol=1e-12)
    np.testing.assert_allclose(got.axis_v, v, atol=1e-12)
    np.testing.assert_allclose(got.axis_w, np.array([0.0, 0.0, 1.0]), atol=1e-12)


def test_gram_schmidt_repairs_noisy_axes():
    v = np.concatenate(
        [
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [2.0, 0.01, 0.0],  # not unit
            [0.3, 1.0, 0.02],  # not orthogonal
        ]
    )
    b = params_to_obb(v)
    assert abs(np.linalg.norm(b.axis_u) - 1) < 1e-12
    assert abs(np.linalg.norm(b.axis_v) - 1) < 1e-12
    assert abs(b.axis_u @ b.axis_v) < 1e-12
    # Idempotent once repaired.
    b2 = params_to_obb(obb_to_params(b))
    assert obb_allclose(b, b2, tol=1e-12)


def test_negative_extent_clamps_to_floor():
    scene = [unit_cube(), unit_cube((3.0, 0.0, 0.0))]
    diag = scene_diagonal(scene)
    floor = 1e-4 * diag
    v = obb_to_params(unit_cube())
    v[3] = -0.5
    b = params_to_obb(v, scale=diag)
    assert b.extents[0] == pytest.approx(floor)
    assert b.extents[1] == pytest.approx(1.0)


def test_degenerate_axes_raise():
    v = obb_to_params(unit_cube())
    v[6:9] = 0.0
    with pytest.raises(DegenerateAxes):
        params_to_obb(v)
    v = obb_to_params(unit_cube())
    v[9:12] = v[6:9]  # parallel
    with pytest.raises(DegenerateAxes):
        params_to_obb(v)


# -- symmetry maps ------------------------------------------------------------


def test_reflective_symmetry_mirrors_across_plane():
    b = unit_cube((1.0, 0.0, 0.0))
    s = SymmetryParams(kind=REFLECTIVE, axis=(1, 0, 0), anchor=(0, 0, 0))
    group = apply_symmetry(b, s)
    assert len(group) == 2
    np.testing.assert_allclose(group[1].center, [-1.0, 0.0, 0.0], atol=1e-12)
    # Mirror flips the u axis x component for this axis-aligned box.
    np.testing.assert_allclose(group[1].axis_u, [-1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(group[1].extents, b.extents)


def test_rotational_symmetry_places_members_on_circle():
    b = unit_cube((2.0, 0.0, 0.0))
    s = SymmetryParams(kind=ROTATIONAL, axis=(0, 0, 1), anchor=(0, 0, 0), magnitude=4.0)
    group = apply_symmetry(b, s)
    assert len(group) == 4
    expected = [(2, 0, 0), (0, 2, 0), (-2, 0, 0), (0, -2, 0)]
    for g, e in zip(group, expected):
        np.testing.assert_allclose(g.center, e, atol=1e-12)
        assert g.extents == pytest.approx([1, 1, 1])


def test_translational_symmetry_default_two_copies():
    b = unit_cube()
    s = SymmetryParams(kind=TRANSLATIONAL, axis=(0, 1, 0), anchor=(0, 0, 0), magnitude=1.5)
    group = apply_symmetry(b, s)
    assert len(group) == 2
    np.testing.assert_allclose(group[1].center, [0.0, 1.5, 0.0])
    group3 = apply_symmetry(b, s, translational_copies=3)
    assert len(group3) == 3
    np.testing.assert_allclose(group3[2].center, [0.0, 3.0, 0.0])


def test_symmetry_vec_roundtrip():
    s = SymmetryParams(kind=ROTATIONAL, axis=(0, 0, 1), anchor=(0.5, 0.25, -1.0), magnitude=3.0)
    s2 = SymmetryParams.from_vec(s.to_vec())
    assert s2.kind == ROTATIONAL
    np.testing.assert_allclose(s2.axis, s.axis)
    np.testing.assert_allclose(s2.anchor, s.anchor)
    assert s2.magnitude == s.magnitude


# -- scene measurements -------------------------------------------------------


def test_scene_diagonal_single_cube():
    # Oracle: unit cube corners at +-0.5 so the AABB diagonal is sqrt(3).
    assert scene_diagonal([unit_cube()]) == pytest.approx(math.sqrt(3.0))


def test_scene_diagonal_two_cubes_enumerated_corners():
    # Independent oracle: enumerate all 16 corners and take the AABB diagonal.
    boxes = [unit_cube(), unit_cube((3.0, 0.0, 0.0))]
    corners = np.concatenate([b.corners() for b in boxes])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    expected = float(np.linalg.norm(hi - lo))
    assert expected == pytest.approx(math.sqrt(18.0))
    assert scene_diagonal(boxes) == pytest.approx(expected)


def test_scene_diagonal_empty_raises():
    with pytest.raises(EmptyScene):
        scene_diagonal([])


def test_normalize_scene_unit_diagonal_and_roundtrip():
    boxes = [unit_cube((5.0, 1.0, 2.0)), unit_cube((8.0, 1.0, 2.0))]
    normed, t = normalize_scene(boxes)
    assert scene_diagonal(normed) == pytest.approx(1.0)
    back = t.invert_all(normed)
    for a, b in zip(boxes, back):
        assert obb_allclose(a, b, tol=1e-12)


# -- property tests -----------------------------------------------------------


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=12, max_size=12))
def test_params_to_obb_always_orthonormal_or_degenerate(vals):
    v = np.array(vals)
    try:
        b = params_to_obb(v)
    except DegenerateAxes:
        return
    assert abs(np.linalg.norm(b.axis_u) - 1) < 1e-9
    assert abs(np.linalg.norm(b.axis_v) - 1) < 1e-9
    assert abs(float(b.axis_u @ b.axis_v)) < 1e-9
    assert np.all(b.extents > 0)
    # Right-handed frame by construction.
    w = b.axis_w
    assert np.linalg.det(np.stack([b.axis_u, b.axis_v, w])) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.1, 5.0),
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.integers(2, 6),
)
def test_rotational_group_is_closed(radius, ax, ay, n):
    b = unit_cube((radius + 1.0, 0.0, 0.0))
    axis = np.array([ax, ay, 1.0])
    s = SymmetryParams(kind=ROTATIONAL, axis=axis, anchor=(0, 0, 0), magnitude=float(n))
    group = apply_symmetry(b, s)
    assert len(group) == n
    # Distances from every member to the axis line must match the generator's.
    d0 = np.linalg.norm(np.cross(b.center, s.axis))
    for g in group:
        assert np.linalg.norm(np.cross(g.center, s.axis)) == pytest.approx(d0, abs=1e-9)


def test_rotation_matrix_matches_known_values():
    r = rotation_matrix((0, 0, 1), math.pi / 2)
    np.testing.assert_allclose(r @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(r @ np.array([0.0, 1, 0]), [-1, 0, 0], atol=1e-12)
