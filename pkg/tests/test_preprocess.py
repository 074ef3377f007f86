import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magcal.errors import EmptyDatasetError, InsufficientDataError, InvalidInputError
from magcal.preprocess import (
    RawDataset,
    group_by_set_id,
    pooled_covariance,
    regularize_covariance,
    sample_means,
    segment_by_norm,
    static_mask,
    summarize,
)

samples = st.integers(2, 12).flatmap(lambda n: arrays(np.float64, (n, 3), elements=st.floats(-5, 5)))


def test_two_point_mean_and_single_sample():
    means, counts = sample_means([np.array([[1.0, 2, 3], [3, 2, 1]]), np.array([[4.0, 5, 6]])])
    np.testing.assert_array_equal(means, [[2, 2, 2], [4, 5, 6]])
    np.testing.assert_array_equal(counts, [2, 1])


def test_mean_statistical():
    rng = np.random.default_rng(6)
    mu, sigma = np.array([0.5, -1.0, 2.0]), 0.1
    means, _ = sample_means([mu + sigma * rng.standard_normal((500, 3))])
    assert np.all(np.abs(means[0] - mu) < 4 * sigma / np.sqrt(500))


def test_empty_set_rejected():
    with pytest.raises(InvalidInputError):
        sample_means([np.ones((3, 3)), np.zeros((0, 3))])
    with pytest.raises(InvalidInputError):
        sample_means([])


def test_pooled_covariance_hand_example():
    sets = [np.array([[2.0, 0, 0], [4, 0, 0]]), np.array([[0.0, 2, 0], [0, 4, 0]])]
    means, _ = sample_means(sets)
    np.testing.assert_allclose(pooled_covariance(sets, means), np.diag([1.0, 1.0, 0.0]))


def test_pooled_covariance_zero_and_insufficient():
    sets = [np.tile([1.0, 2, 3], (5, 1)), np.tile([0.0, 1, 0], (4, 1))]
    means, _ = sample_means(sets)
    np.testing.assert_array_equal(pooled_covariance(sets, means), np.zeros((3, 3)))
    single = [np.ones((1, 3)), np.zeros((1, 3))]
    with pytest.raises(InsufficientDataError):
        pooled_covariance(single, sample_means(single)[0])


def test_pooled_covariance_consistent():
    rng = np.random.default_rng(21)
    Sigma = np.array([[1.0, 0.2, 0.0], [0.2, 0.5, -0.1], [0.0, -0.1, 2.0]])
    L = np.linalg.cholesky(Sigma)
    sets = [rng.uniform(-3, 3, 3) + rng.standard_normal((10_000, 3)) @ L.T for _ in range(10)]
    S = pooled_covariance(sets, sample_means(sets)[0])
    assert np.linalg.norm(S - Sigma) / np.linalg.norm(Sigma) < 0.05


@given(st.lists(samples, min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_pooled_covariance_permutation_invariant(sets, rnd):
    S = pooled_covariance(sets, sample_means(sets)[0])
    shuffled = [s[rnd.sample(range(len(s)), len(s))] for s in sets]
    rnd.shuffle(shuffled)
    S2 = pooled_covariance(shuffled, sample_means(shuffled)[0])
    np.testing.assert_allclose(S2, S, rtol=1e-10, atol=1e-10)


@given(samples, arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, (3, 3), elements=st.floats(-1, 1)))
def test_scatter_decomposition_identity(v, m, A):
    P = A @ A.T + 0.1 * np.eye(3)
    mu = v.mean(axis=0)
    lhs = np.einsum("ni,ij,nj->", m - v, P, m - v)
    rhs = len(v) * (m - mu) @ P @ (m - mu) + np.einsum("ni,ij,nj->", v - mu, P, v - mu)
    assert lhs == pytest.approx(rhs, rel=1e-8, abs=1e-8)


def test_regularize_covariance():
    S = np.diag([1.0, 2.0, 3.0])
    out, flag = regularize_covariance(S)
    assert not flag and np.array_equal(out, S)
    out, flag = regularize_covariance(np.diag([1.0, 1.0, 0.0]))
    assert flag
    np.testing.assert_allclose(out, np.diag([1.0, 1.0, 0.0]) + (1e-10 * 2.0 / 3.0) * np.eye(3))
    out, flag = regularize_covariance(np.zeros((3, 3)))
    assert flag and np.linalg.eigvalsh(out)[0] > 0


def test_summarize_flags_noiseless_data():
    data = RawDataset([np.ones((4, 3)), 2 * np.ones((4, 3))], [np.ones((4, 3)), np.zeros((4, 3))])
    stats = summarize(data)
    assert stats.n_sets == 2
    assert stats.accel.jittered and stats.mag.jittered
    np.testing.assert_array_equal(stats.accel.counts, [4, 4])


def test_dataset_requires_matching_set_counts():
    with pytest.raises(InvalidInputError):
        RawDataset([np.ones((2, 3))], [])


# -- segmentation ------------------------------------------------------------


def test_constant_stream_is_one_set():
    a = np.tile([0.0, 0.0, -1.0], (1000, 1))
    m = np.tile([0.4, 0.0, 0.3], (1000, 1))
    data = segment_by_norm(a, m, window=50, tol=0.02)
    assert data.n_sets == 1
    assert len(data.accel[0]) == 1000
    np.testing.assert_array_equal(data.indices[0], np.arange(1000))


def plateau_trace(n1=400, ramp=100, n2=400):
    a1, a2 = np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, -2.0])
    m1, m2 = np.array([0.5, 0.0, 0.2]), np.array([1.0, 0.0, 0.4])
    t = np.linspace(0, 1, ramp + 2)[1:-1, None]
    a = np.vstack([np.tile(a1, (n1, 1)), a1 + t * (a2 - a1), np.tile(a2, (n2, 1))])
    m = np.vstack([np.tile(m1, (n1, 1)), m1 + t * (m2 - m1), np.tile(m2, (n2, 1))])
    return a, m


def test_two_plateaus_ramp_discarded():
    a, m = plateau_trace()
    data = segment_by_norm(a, m, window=50, tol=0.02)
    assert data.n_sets == 2
    # plateau edges next to the ramp may be trimmed, ramp samples never survive
    assert set(data.indices[0]) <= set(range(400))
    assert set(data.indices[1]) <= set(range(500, 900))
    assert len(data.indices[0]) >= 350 and len(data.indices[1]) >= 350
    np.testing.assert_array_equal(data.accel[0], np.tile([0.0, 0.0, -1.0], (len(data.accel[0]), 1)))
    np.testing.assert_array_equal(data.accel[1], np.tile([0.0, 0.0, -2.0], (len(data.accel[1]), 1)))


def test_pure_noise_has_no_static_segment():
    rng = np.random.default_rng(1)
    scale = np.where(np.arange(2000) % 2 == 0, 1.0, 1.5)[:, None]
    direction = rng.normal(size=(2000, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    with pytest.raises(EmptyDatasetError):
        segment_by_norm(direction * scale, direction * scale[::-1], window=50, tol=0.02)


def test_segmentation_is_idempotent():
    rng = np.random.default_rng(2)
    a, m = plateau_trace()
    a = a * (1 + 1e-3 * rng.standard_normal((len(a), 1)))
    data = segment_by_norm(a, m)
    for k in range(data.n_sets):
        again = segment_by_norm(data.accel[k], data.mag[k])
        assert again.n_sets == 1
        np.testing.assert_array_equal(again.accel[0], data.accel[k])


def test_static_mask_relative_tolerance():
    norms = np.r_[np.ones(60), 1.05 * np.ones(5), np.ones(60)]
    mask = static_mask(norms, window=50, tol=0.02)
    assert mask[:60].all() and not mask[60:65].any() and mask[65:].all()


@pytest.mark.parametrize("window, tol", [(1, 0.02), (50, 0.0), (50, -1.0)])
def test_segmentation_argument_checks(window, tol):
    a, m = plateau_trace()
    with pytest.raises(InvalidInputError):
        segment_by_norm(a, m, window=window, tol=tol)


def test_segmentation_length_mismatch():
    with pytest.raises(InvalidInputError):
        segment_by_norm(np.ones((10, 3)), np.ones((9, 3)))


def test_group_by_set_id():
    a = np.arange(18.0).reshape(6, 3)
    data = group_by_set_id(a, -a, [0, 0, 3, 3, 3, 7])
    assert data.n_sets == 3
    assert [len(s) for s in data.accel] == [2, 3, 1]
    np.testing.assert_array_equal(data.mag[2], -a[5:])
    with pytest.raises(InvalidInputError):
        group_by_set_id(a, a, [0, 1, 0, 1, 1, 1])
