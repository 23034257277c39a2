import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langsteer.groups import (
    FeatureField,
    GroupElement,
    Representation,
    apply_group_to_action,
    irrep,
    regular,
    rotate_field,
    shift_spatial,
)

ORDERS = [4, 8, 36, 180]


@pytest.mark.parametrize("n", ORDERS)
def test_representation_homomorphism(n):
    rng = np.random.default_rng(n)
    reps = [Representation("trivial"), Representation("standard"), regular(n), irrep(n, 3), irrep(n, 1)]
    pairs = rng.integers(0, n, size=(1000, 2))
    for rep in reps:
        for a, b in pairs[: (1000 if rep.kind != "regular" or n < 100 else 200)]:
            g, h = GroupElement(n, a), GroupElement(n, b)
            lhs, rhs = rep(g * h), rep(g) @ rep(h)
            if rep.kind in ("trivial", "regular"):
                assert np.array_equal(lhs, rhs)
            else:
                assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_regular_rep_is_cyclic_permutation():
    P = regular(4)(GroupElement(4, 1))
    assert np.array_equal(P @ np.array([0, 1, 2, 3]), [3, 0, 1, 2])
    assert np.array_equal(P.sum(axis=0), np.ones(4)) and set(np.unique(P)) == {0.0, 1.0}


def test_standard_rep_is_rotation():
    for k in range(36):
        m = Representation("standard")(GroupElement(36, k))
        assert np.allclose(m @ m.T, np.eye(2), atol=1e-14)
        assert abs(np.linalg.det(m) - 1) < 1e-12


def test_group_inverse_and_identity():
    for n in ORDERS:
        for k in range(0, n, max(1, n // 7)):
            g = GroupElement(n, k)
            assert (g * g.inverse()).is_identity()
            assert g.inverse().index == (n - k) % n


def test_rotate_identity_bit_identical():
    f = np.random.default_rng(0).normal(size=(3, 9, 11))
    assert np.array_equal(rotate_field(f, GroupElement(4, 0)), f)


def test_quarter_turn_moves_pixel_from_below_to_right():
    f = np.zeros((1, 9, 9))
    c, r = 4, 3
    f[0, c + r, c] = 7.0  # offset (r, 0)
    out = rotate_field(f, GroupElement(4, 1), "nearest")
    assert out[0, c, c + r] == 7.0 and np.count_nonzero(out) == 1


@pytest.mark.parametrize("k", range(4))
def test_rotate_then_inverse_restores(k):
    rng = np.random.default_rng(k)
    f = rng.normal(size=(2, 16, 16))
    g = GroupElement(4, k)
    assert np.array_equal(rotate_field(rotate_field(f, g), g.inverse()), f)


def test_quarter_turn_matches_pixel_enumeration():
    # every pixel (u, v) must land on the hand-computed image of its centre offset
    H = 10
    f = np.arange(H * H, dtype=float).reshape(1, H, H)
    out = rotate_field(f, GroupElement(4, 1))
    c = (H - 1) / 2
    for u in range(H):
        for v in range(H):
            du, dv = u - c, v - c
            nu, nv = c - dv, c + du
            assert out[0, int(nu), int(nv)] == f[0, u, v]


def test_regular_field_channels_permute():
    f = np.zeros((4, 5, 5))
    for i in range(4):
        f[i, 2, 2] = i + 1
    out = rotate_field(FeatureField(f, regular(4)), GroupElement(4, 1))
    assert out.values[:, 2, 2].tolist() == [4, 1, 2, 3]


def test_regular_field_order_mismatch_rejected():
    with pytest.raises(ValueError):
        rotate_field(np.zeros((4, 5, 5)), GroupElement(8, 1), rep=regular(4))


def test_feature_field_validation():
    with pytest.raises(ValueError):
        FeatureField(np.full((1, 3, 3), np.nan))
    with pytest.raises(ValueError):
        FeatureField(np.zeros((3, 4, 4)), regular(4))


def test_shift_zero_fill():
    f = np.arange(16.0).reshape(1, 4, 4)
    out = shift_spatial(f, 1, -1)
    assert out[0, 1, 0] == f[0, 0, 1]
    assert np.all(out[0, 0] == 0) and np.all(out[0, :, 3] == 0)


def test_action_identity():
    assert apply_group_to_action((5, 7, 1.0), GroupElement(4, 0), (32, 32))[:3] == (5, 7, 1.0)


def test_action_quarter_turn():
    u, v, t, ok = apply_group_to_action((42, 32, 0.0), GroupElement(4, 1), (32, 32), (64, 64))
    assert (u, v) == (32, 42) and t == pytest.approx(math.pi / 2) and ok


def test_action_translation():
    u, v, t, _ = apply_group_to_action((10, 10, 0.3), GroupElement.shift(3, -2), (32, 32))
    assert (u, v, t) == (13, 8, 0.3)


def test_action_out_of_bounds_flagged():
    assert not apply_group_to_action((60, 60, 0), GroupElement.shift(10, 0), (32, 32), (64, 64)).in_bounds


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_action_transform_tracks_pixel(u, v, k, du, dv):
    # the pixel carried by rotate_field lands exactly where apply_group_to_action predicts
    f = np.zeros((1, 16, 16))
    f[0, u, v] = 1.0
    g = GroupElement(4, k, translation=(du, dv))
    out = rotate_field(f, g)
    nu, nv, _, ok = apply_group_to_action((u, v, 0.0), g, (7.5, 7.5), (16, 16))
    if ok:
        assert out[0, int(nu), int(nv)] == 1.0
    else:
        assert out.sum() == 0.0


def test_composition_with_shift():
    g = GroupElement(4, 1, translation=(2, 0))
    h = GroupElement(4, 1, translation=(0, 3))
    f = np.zeros((1, 16, 16))
    f[0, 5, 6] = 1
    assert np.array_equal(rotate_field(rotate_field(f, h), g), rotate_field(f, g * h))
