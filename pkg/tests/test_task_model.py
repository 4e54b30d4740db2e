import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metalora.errors import DimensionError, GenerationError, TaskIndexError
from metalora.task_model import (
    GroundTruth,
    RngSpec,
    check_task_diversity,
    generate_ground_truth,
    sample_task,
    samples_per_task,
)


def svd_rank(m, tol=1e-10):
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > tol * s[0]))


def test_ground_truth_default_setting_has_independent_columns():
    gt = generate_ground_truth(10, 1, 3, RngSpec(0))
    assert (gt.d, gt.k, gt.T) == (10, 1, 3)
    assert len(gt.u_star) == 4
    assert all(u.shape == (10, 1) for u in gt.u_star)
    assert svd_rank(np.hstack(gt.u_star)) == 4


def test_dimension_bound_rejected():
    with pytest.raises(DimensionError):
        generate_ground_truth(2, 1, 2, RngSpec(5))


def test_diversity_against_svd_oracle():
    gt = generate_ground_truth(6, 1, 3, RngSpec(7))
    assert check_task_diversity(gt)
    assert svd_rank(np.hstack(gt.u_star)) == 4


def test_diversity_orthonormal_and_duplicate():
    e = np.eye(10)
    gt = GroundTruth(np.zeros((10, 10)), [e[:, [i]] for i in range(4)])
    assert check_task_diversity(gt)
    dup = GroundTruth(np.zeros((10, 10)), [e[:, [0]], e[:, [0]], e[:, [2]], e[:, [3]]])
    assert not check_task_diversity(dup)


def test_diversity_random_instances_over_100_seeds():
    for seed in range(100):
        gt = generate_ground_truth(10, 1, 3, RngSpec(seed), require_diversity=False)
        assert check_task_diversity(gt) == (svd_rank(np.hstack(gt.u_star)) == 4)
        assert check_task_diversity(gt)


def test_generation_failure_after_attempt_cap(monkeypatch):
    import metalora.task_model as tm

    monkeypatch.setattr(tm, "check_task_diversity", lambda gt, tol=0: False)
    with pytest.raises(GenerationError):
        tm.generate_ground_truth(10, 1, 3, RngSpec(0))


def test_rng_spec_reproducible_and_streams_differ():
    a = RngSpec(11, (1, 2)).generator().standard_normal(5)
    b = RngSpec(11, (1, 2)).generator().standard_normal(5)
    c = RngSpec(11, (1, 3)).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert RngSpec(11).child(1, 2) == RngSpec(11, (1, 2))
    assert RngSpec.from_dict(RngSpec(3, (4,)).to_dict()) == RngSpec(3, (4,))
    with pytest.raises(ValueError):
        RngSpec(-1)


def test_task_index_is_one_based():
    gt = generate_ground_truth(6, 1, 2, RngSpec(1))
    assert np.array_equal(gt.factor(1), gt.u_star[0])
    assert np.array_equal(gt.factor(3), gt.u_star[2])
    for bad in (0, 4):
        with pytest.raises(TaskIndexError):
            gt.factor(bad)
    with pytest.raises(TaskIndexError):
        sample_task(gt, 4, 10, rng=RngSpec(0))


def test_noiseless_samples_are_exact():
    gt = generate_ground_truth(6, 1, 2, RngSpec(2))
    ds = sample_task(gt, 1, 50, sigma_eps=0.0, rng=RngSpec(3))
    assert np.allclose(ds.y, gt.task_matrix(1) @ ds.x, atol=1e-12)
    assert ds.n == 50 and ds.d == 6


def test_sample_statistics():
    gt = generate_ground_truth(4, 1, 2, RngSpec(2))
    ds = sample_task(gt, 2, 20000, sigma_x=2.0, sigma_eps=0.5, rng=RngSpec(4))
    assert np.allclose(ds.x @ ds.x.T / ds.n, 4.0 * np.eye(4), atol=0.15)
    resid = ds.y - gt.task_matrix(2) @ ds.x
    assert abs(resid.std() - 0.5) < 0.01


def test_sample_task_rejects_bad_arguments():
    gt = generate_ground_truth(6, 1, 2, RngSpec(1))
    with pytest.raises(DimensionError):
        sample_task(gt, 1, 0, rng=RngSpec(0))
    with pytest.raises(ValueError):
        sample_task(gt, 1, 5, sigma_x=0.0, rng=RngSpec(0))


def test_moments_match_data():
    gt = generate_ground_truth(5, 1, 2, RngSpec(8))
    ds = sample_task(gt, 1, 30, rng=RngSpec(9))
    cxx, cyx, cyy = ds.moments
    assert np.allclose(cxx, ds.x @ ds.x.T / 30)
    assert np.allclose(cyx, ds.y @ ds.x.T / 30)
    assert np.isclose(cyy, np.trace(ds.y @ ds.y.T) / 30)


@given(st.integers(1, 100_000), st.integers(1, 50))
def test_samples_per_task_is_floor(n, T):
    assert samples_per_task(n, T) == n // T


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3), st.integers(1, 3))
def test_generated_factors_full_rank(seed, k, T):
    d = k * (T + 1) + 1
    gt = generate_ground_truth(d, k, T, RngSpec(seed))
    assert all(np.linalg.matrix_rank(u) == k for u in gt.u_star)
    assert check_task_diversity(gt)
