import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metalora.errors import DimensionError, SingularSystemError
from metalora.objectives import Adapter, MetaParams, meta_loss_population, test_loss_population as population_test_loss
from metalora.solvers import (
    EmpiricalObjective,
    PopulationObjective,
    TrainConfig,
    best_rank_approx,
    finetune_empirical,
    finetune_population,
    init_meta_params,
    default_finetune_rank,
    solve_sr_empirical,
    solve_sr_population,
    train_meta_gd,
)
from metalora.task_model import GroundTruth, RngSpec, generate_ground_truth, sample_task


def numerical_rank(m, tol=1e-8):
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > tol * s[0]))


def test_sr_population_is_mean_perturbation():
    gt = generate_ground_truth(10, 2, 3, RngSpec(0))
    a = solve_sr_population(gt)
    manual = gt.a_star + sum(gt.perturbation(t) for t in (1, 2, 3)) / 3
    assert np.max(np.abs(a - manual)) < 1e-14


def test_sr_rank_law():
    for seed, T in itertools.product(range(10), (1, 2, 3, 4)):
        gt = generate_ground_truth(10, 1, T, RngSpec(seed, (T,)))
        assert numerical_rank(solve_sr_population(gt) - gt.a_star) == T


def test_sr_empirical_noiseless_single_task_exact():
    gt = generate_ground_truth(5, 1, 1, RngSpec(1))
    ds = sample_task(gt, 1, 20, sigma_eps=0.0, rng=RngSpec(2))
    assert np.max(np.abs(solve_sr_empirical([ds]) - gt.task_matrix(1))) < 1e-8


def test_sr_empirical_gap_matches_covariance_oracle():
    # noiseless pooled fit: A_emp - A_SR = sum_t (S_t - mean S) C_t (sum_s C_s)^{-1}
    gt = generate_ground_truth(6, 1, 2, RngSpec(3))
    data = [sample_task(gt, t, 500, sigma_eps=0.0, rng=RngSpec(3, (t,))) for t in (1, 2)]
    covs = [ds.x @ ds.x.T for ds in data]
    s_bar = gt.retrain_perturbations.mean(axis=0)
    oracle = sum((gt.perturbation(t + 1) - s_bar) @ c for t, c in enumerate(covs)) @ np.linalg.inv(sum(covs))
    assert np.max(np.abs(solve_sr_empirical(data) - solve_sr_population(gt) - oracle)) < 1e-10


def test_sr_empirical_converges_to_population():
    for seed in range(3):
        gt = generate_ground_truth(4, 1, 2, RngSpec(seed))
        errs = []
        for n in (1_000, 100_000):
            data = [sample_task(gt, t, n, sigma_eps=0.0, rng=RngSpec(seed, (t,))) for t in (1, 2)]
            errs.append(np.linalg.norm(solve_sr_empirical(data) - solve_sr_population(gt)))
        assert errs[1] < 1e-2 and errs[1] < errs[0]


def test_sr_empirical_ridge_and_singular():
    gt = generate_ground_truth(5, 1, 1, RngSpec(4))
    ds = sample_task(gt, 1, 50, sigma_eps=0.0, rng=RngSpec(4))
    assert np.linalg.norm(solve_sr_empirical([ds], ridge=1e-6) - solve_sr_empirical([ds])) < 1e-4
    few = sample_task(gt, 1, 3, rng=RngSpec(5))
    with pytest.raises(SingularSystemError):
        solve_sr_empirical([few])
    solve_sr_empirical([few], ridge=1e-3)


def test_best_rank_approx_examples():
    u = np.arange(1.0, 5.0)[:, None]
    ad, err = best_rank_approx(u @ u.T, 1)
    assert err < 1e-24 and np.allclose(ad.matrix(), u @ u.T)
    ad, err = best_rank_approx(np.eye(4), 2)
    assert np.isclose(err, 1.0)
    with pytest.raises(DimensionError):
        best_rank_approx(np.eye(3), 4)


def test_best_rank_approx_beats_random_candidates():
    gen = np.random.default_rng(0)
    m = gen.standard_normal((6, 6))
    ad, err = best_rank_approx(m, 3)
    assert np.isclose(0.5 * np.linalg.norm(m - ad.matrix()) ** 2, err)
    for _ in range(1000):
        cand = gen.standard_normal((6, 3)) @ gen.standard_normal((3, 6))
        assert 0.5 * np.linalg.norm(m - cand) ** 2 >= err


def test_finetune_population_ranks():
    gt = generate_ground_truth(10, 1, 3, RngSpec(6))
    assert finetune_population(gt.task_matrix(4), gt, 2)[1] < 1e-28
    assert finetune_population(gt.a_star, gt, 1)[1] <= 1e-16
    a_sr = solve_sr_population(gt)
    assert finetune_population(a_sr, gt, 3)[1] > 0
    assert finetune_population(a_sr, gt, 4)[1] <= 1e-16


def test_finetune_empirical_noiseless_exact():
    gt = generate_ground_truth(6, 1, 2, RngSpec(7))
    ds = sample_task(gt, 3, 60, sigma_eps=0.0, rng=RngSpec(7))
    ad, tr = finetune_empirical(gt.a_star, ds, 1, TrainConfig(grad_tol=1e-10, max_iters=20000), RngSpec(8))
    assert tr.final_loss < 1e-10
    assert population_test_loss(ad, gt.a_star, gt) < 1e-8


def test_finetune_empirical_not_below_population_optimum():
    gt = generate_ground_truth(10, 1, 3, RngSpec(9))
    ds = sample_task(gt, 4, 100, rng=RngSpec(9))
    a_hat = solve_sr_population(gt)
    ad, _ = finetune_empirical(a_hat, ds, 1, rng=RngSpec(10))
    assert population_test_loss(ad, a_hat, gt) >= finetune_population(a_hat, gt, 1)[1] - 1e-12


def test_finetune_empirical_noise_floor_persists():
    # the held-out sample budget caps accuracy even with the exact base matrix
    gt = generate_ground_truth(10, 1, 3, RngSpec(11))
    losses = []
    for s in range(5):
        ds = sample_task(gt, 4, 100, sigma_eps=0.1, rng=RngSpec(11, (s,)))
        ad, _ = finetune_empirical(gt.a_star, ds, 1, rng=RngSpec(12, (s,)))
        losses.append(population_test_loss(ad, gt.a_star, gt))
    assert np.median(losses) > 1e-5


def test_train_from_ground_truth_converges_immediately():
    gt = generate_ground_truth(8, 1, 3, RngSpec(13))
    tr = train_meta_gd(MetaParams.at_ground_truth(gt), gt, TrainConfig(), RngSpec(0))
    assert tr.converged and tr.iterations_used <= 1 and tr.final_loss < 1e-12


def test_train_recovers_ground_truth_t3():
    gt = generate_ground_truth(10, 1, 3, RngSpec(14))
    tr = train_meta_gd(init_meta_params(10, 1, 3, 0.01, RngSpec(15)), gt, TrainConfig(), RngSpec(16))
    assert tr.final_loss < 1e-10
    p = tr.final_params
    assert np.linalg.norm(p.a - gt.a_star) < 1e-4
    assert all(np.linalg.norm(o - s) < 1e-4 for o, s in zip(p.outer(), gt.retrain_perturbations))


def test_loss_history_monotone_with_safeguard():
    gt = generate_ground_truth(6, 1, 3, RngSpec(17))
    tr = train_meta_gd(init_meta_params(6, 1, 3, 1.0, RngSpec(18)), gt,
                       TrainConfig(learning_rate=1.0, max_iters=500), RngSpec(19))
    diffs = np.diff(tr.loss_history)
    assert np.all(diffs <= 0)
    assert tr.final_learning_rate < 1.0


def test_divergence_reported_without_safeguard():
    gt = generate_ground_truth(6, 1, 3, RngSpec(20))
    tr = train_meta_gd(init_meta_params(6, 1, 3, 1.0, RngSpec(21)), gt,
                       TrainConfig(learning_rate=5.0, max_iters=200, safeguard=False), RngSpec(22))
    assert tr.diverged and not tr.converged
    assert "diverged" in tr.message


def test_t2_with_perturbation_reaches_zero_loss():
    for s in range(5):
        gt = generate_ground_truth(6, 1, 2, RngSpec(23, (s,)))
        tr = train_meta_gd(init_meta_params(6, 1, 2, 0.01, RngSpec(24, (s,))), gt,
                           TrainConfig(perturbation_radius=1e-3), RngSpec(25, (s,)))
        assert tr.final_loss < 1e-6


def test_perturbation_kicks_at_exact_saddle():
    # U = 0 with A at its critical value is stationary with nonzero loss
    gt = generate_ground_truth(6, 1, 2, RngSpec(26))
    a0 = gt.a_star + gt.retrain_perturbations.mean(axis=0)
    start = MetaParams(a0, [np.zeros((6, 1)), np.zeros((6, 1))])
    stuck = train_meta_gd(start, gt, TrainConfig(perturbation_radius=0.0), RngSpec(27))
    assert stuck.converged and stuck.final_loss > 1e-3
    free = train_meta_gd(start, gt, TrainConfig(perturbation_radius=1e-3), RngSpec(27))
    assert free.perturbations >= 1 and free.final_loss < 1e-6


def test_empirical_objective_never_perturbs():
    gt = generate_ground_truth(6, 1, 2, RngSpec(28))
    data = [sample_task(gt, t, 200, rng=RngSpec(28, (t,))) for t in (1, 2)]
    tr = train_meta_gd(init_meta_params(6, 1, 2, 0.01, RngSpec(29)), EmpiricalObjective(data),
                       TrainConfig(grad_tol=1e-6, perturbation_radius=1e-2, max_iters=3000), RngSpec(30))
    assert tr.perturbations == 0
    assert PopulationObjective(gt).zero_floor and not EmpiricalObjective(data).zero_floor


def test_train_is_deterministic():
    gt = generate_ground_truth(6, 1, 3, RngSpec(31))
    runs = [train_meta_gd(init_meta_params(6, 1, 3, 0.01, RngSpec(32)), gt, TrainConfig(max_iters=300), RngSpec(33))
            for _ in range(2)]
    assert runs[0].loss_history == runs[1].loss_history


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(stall_window=0)
    cfg = TrainConfig(learning_rate=0.1, perturbation_radius=1e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_rank_policy():
    assert default_finetune_rank(1, 2) == 3 and default_finetune_rank(2, 2) == 6
    assert default_finetune_rank(1, 3) == 1 and default_finetune_rank(2, 5) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_best_rank_error_equals_tail_energy(seed, rank):
    m = np.random.default_rng(seed).standard_normal((5, 5))
    ad, err = best_rank_approx(m, rank)
    assert np.isclose(err, 0.5 * np.linalg.norm(m - ad.matrix()) ** 2, atol=1e-12)
    s = np.linalg.svd(m, compute_uv=False)
    assert np.isclose(err, 0.5 * np.sum(s[rank:] ** 2), atol=1e-12)
