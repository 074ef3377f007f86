import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from magcal.errors import InvalidArgumentError
from magcal.geometry import (
    canonical_sign,
    min_eigvec_sym4,
    quat_normalize,
    quat_to_matrix,
    random_rotation,
    random_rotations,
    rotation_form,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = arrays(np.float64, 3, elements=finite)


def char_poly_min_root(B):
    """Smallest eigenvalue from the characteristic polynomial (Faddeev-LeVerrier)."""
    n = B.shape[0]
    coeffs = [1.0]
    M = np.zeros_like(B)
    for k in range(1, n + 1):
        M = B @ M + coeffs[-1] * np.eye(n)
        coeffs.append(-np.trace(B @ M) / k)
    roots = np.roots(coeffs)
    return float(np.min(roots.real))


@pytest.mark.parametrize(
    "q, expected",
    [
        ((1, 0, 0, 0), np.eye(3)),
        ((0, 1, 0, 0), np.diag([1.0, -1.0, -1.0])),
        ((0, 0, 1, 0), np.diag([-1.0, 1.0, -1.0])),
        ((np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)), np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])),
    ],
)
def test_quat_to_matrix_known_values(q, expected):
    np.testing.assert_allclose(quat_to_matrix(np.array(q, dtype=float)), expected, atol=1e-15)


def test_quat_to_matrix_orthonormal_for_seeded_samples():
    R = quat_to_matrix(random_rotations(np.random.default_rng(0), 1000))
    np.testing.assert_allclose(np.swapaxes(R, 1, 2) @ R, np.broadcast_to(np.eye(3), R.shape), atol=1e-13)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-13)


@given(quats)
def test_quat_to_matrix_is_rotation(q):
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(quat_to_matrix(-q), R, atol=1e-14)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidArgumentError):
        quat_to_matrix(np.zeros(4))
    with pytest.raises(InvalidArgumentError):
        quat_normalize(np.array([[1.0, 0, 0, 0], [0, 0, 0, 0]]))


def test_composition_is_hamilton_product():
    rng = np.random.default_rng(3)
    p, q = random_rotations(rng, 2)
    w1, v1 = p[0], p[1:]
    w2, v2 = q[0], q[1:]
    pq = np.concatenate([[w1 * w2 - v1 @ v2], w1 * v2 + w2 * v1 + np.cross(v1, v2)])
    np.testing.assert_allclose(quat_to_matrix(pq), quat_to_matrix(p) @ quat_to_matrix(q), atol=1e-14)


@given(quats, vec3, vec3)
def test_rotation_form_matches_bilinear_form(q, a, b):
    P = rotation_form(a, b)
    np.testing.assert_allclose(P, P.T)
    lhs = b @ quat_to_matrix(q) @ a
    rhs = q @ P @ q / (q @ q)
    assert rhs == pytest.approx(lhs, abs=1e-10 * (1 + np.linalg.norm(a) * np.linalg.norm(b)))


def test_random_rotation_unit_and_deterministic():
    a = random_rotation(np.random.default_rng(42))
    b = random_rotation(np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-15)
    qs = random_rotations(np.random.default_rng(1), 500)
    np.testing.assert_allclose(np.linalg.norm(qs, axis=1), 1.0, atol=1e-15)


def test_rotation_angle_distribution_is_uniform_on_so3():
    q = random_rotations(np.random.default_rng(2024), 100_000)
    theta = 2.0 * np.arccos(np.clip(np.abs(q[:, 0]), 0.0, 1.0))
    # density (1 - cos t) / pi on [0, pi]
    res = stats.kstest(theta, lambda t: (t - np.sin(t)) / np.pi)
    assert res.statistic < 0.01


def test_rotated_axes_have_zero_mean():
    n = 20_000
    R = quat_to_matrix(random_rotations(np.random.default_rng(9), n))
    # each column is uniform on the sphere: per-coordinate variance 1/3
    tol = 3.0 * np.sqrt(1.0 / 3.0 / n)
    assert np.all(np.abs(R.mean(axis=0)) < tol)


def test_min_eigvec_diagonal():
    np.testing.assert_array_equal(min_eigvec_sym4(np.diag([3.0, 2.0, 1.0, 0.0])), [0, 0, 0, 1])
    np.testing.assert_array_equal(min_eigvec_sym4(np.diag([0.0, 2.0, 1.0, 3.0])), [1, 0, 0, 0])


def test_min_eigvec_fully_degenerate():
    B = 5.0 * np.eye(4)
    v = min_eigvec_sym4(B)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_allclose(B @ v, 5.0 * v)
    assert np.array_equal(v, min_eigvec_sym4(B.copy()))


@pytest.mark.parametrize("seed", range(20))
def test_min_eigvec_against_characteristic_polynomial(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    B = A + A.T
    lam = char_poly_min_root(B)
    v = min_eigvec_sym4(B)
    assert np.linalg.norm(B @ v - lam * v) < 1e-9
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-14)


@given(arrays(np.float64, (4, 4), elements=finite))
def test_min_eigvec_minimizes_rayleigh_quotient(A):
    B = A + A.T
    v = min_eigvec_sym4(B)
    u = np.random.default_rng(0).normal(size=(100, 4))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    scale = 1e-9 * (1.0 + np.abs(B).max())
    assert np.all(v @ B @ v <= np.einsum("ni,ij,nj->n", u, B, u) + scale)


def test_min_eigvec_batched_and_shape_checked():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(7, 4, 4))
    B = A + np.swapaxes(A, 1, 2)
    batch = min_eigvec_sym4(B)
    for k in range(7):
        np.testing.assert_array_equal(batch[k], min_eigvec_sym4(B[k]))
    with pytest.raises(InvalidArgumentError):
        min_eigvec_sym4(np.eye(3))


@pytest.mark.parametrize(
    "v, expected",
    [
        ([-1.0, 2.0], [1.0, -2.0]),
        ([0.0, -3.0, 1.0], [0.0, 3.0, -1.0]),
        ([1e-14, -1.0], [-1e-14, 1.0]),
        ([2.0, -1.0], [2.0, -1.0]),
    ],
)
def test_canonical_sign(v, expected):
    np.testing.assert_array_equal(canonical_sign(np.array(v)), expected)
