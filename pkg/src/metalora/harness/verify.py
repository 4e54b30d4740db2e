"""Theorem-verification suites with pass/fail entries and measured values."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..landscape import (
    Classification,
    classify_stationary_point,
    eigenbasis_commutator,
    find_negative_curvature_t2,
    hessian_meta,
    inertia,
    joint_span_dim,
    manufacture_t2_stationary_point,
    schur_complement_q,
)
from ..objectives import MetaParams, central_difference_jacobian, meta_grad_population, meta_loss_population
from ..solvers import TrainConfig, finetune_population, init_meta_params, default_finetune_rank, solve_sr_population, train_meta_gd
from ..task_model import RngSpec, generate_ground_truth

RANK_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, measured, threshold, detail=""):
        self.checks.append(CheckResult(name, bool(passed), float(measured), float(threshold), detail))

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def table(self) -> str:
        width = max([len(c.name) for c in self.checks] + [5])
        lines = [f"{'check':<{width}}  result  measured      threshold     detail"]
        for c in self.checks:
            lines.append(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.measured:<12.4e}  "
                         f"{c.threshold:<12.4e}  {c.detail}")
        return "\n".join(lines)


def numerical_rank(m: np.ndarray, tol: float = RANK_TOL) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def _corrupt(a_sr: np.ndarray, a_star: np.ndarray) -> np.ndarray:
    """Drop the smallest nonzero direction of ``A_SR - A*`` (negative control)."""
    left, s, right_t = np.linalg.svd(a_sr - a_star)
    r = numerical_rank(a_sr - a_star)
    s = s.copy()
    s[r - 1] = 0.0
    return a_star + (left * s) @ right_t


def verify_theorems(d_values: Sequence[int] = (6, 8), k_values: Sequence[int] = (1,), T_values: Sequence[int] = (2, 3),
                    seeds: Sequence[int] = (0, 1), corrupt_sr: bool = False, t2_probes: int = 100,
                    gd_cfg: Optional[TrainConfig] = None) -> VerificationReport:
    """Run the retraining and landscape suites over all (d, k, T, seed) combinations.

    ``corrupt_sr`` replaces the standard-retraining solution with a
    rank-deficient one, which must make the rank-law check fail.
    """
    report = VerificationReport()
    gd_cfg = gd_cfg or TrainConfig(learning_rate=0.05, max_iters=50_000, grad_tol=1e-9)
    combos = [(d, k, T, s) for d, k, T, s in itertools.product(d_values, k_values, T_values, seeds) if k * (T + 1) <= d]
    if not combos:
        raise ValueError("no (d, k, T) combination satisfies k(T+1) <= d")
    worst = {}

    def track(name, value, bad):
        cur = worst.get(name)
        if cur is None or bad(value, cur):
            worst[name] = value

    for d, k, T, seed in combos:
        spec = RngSpec(seed, (d, k, T))
        gt = generate_ground_truth(d, k, T, spec.child(0))
        a_sr = solve_sr_population(gt)
        identity_err = float(np.max(np.abs(a_sr - gt.a_star - gt.retrain_perturbations.mean(axis=0))))
        track("sr_mean_perturbation_identity", identity_err, lambda v, c: v > c)
        if corrupt_sr:
            a_sr = _corrupt(a_sr, gt.a_star)
        rank = numerical_rank(a_sr - gt.a_star)
        report.add(f"sr_rank_law[d={d},k={k},T={T},seed={seed}]", rank == k * T, rank, k * T,
                   "numerical rank of A_SR - A*")
        losses = [finetune_population(a_sr, gt, r)[1] for r in range(1, k * (T + 1) + 1)]
        track("sr_finetune_gap_min_loss_below_kT", min(losses[:k * T]), lambda v, c: v < c)
        track("sr_finetune_loss_at_k(T+1)", losses[-1], lambda v, c: v > c)
        if T >= 2:
            pos, neg = inertia(gt.perturbation(2) - gt.perturbation(1), 1e-10)
            track("task_difference_inertia_mismatch", abs(pos - k) + abs(neg - k), lambda v, c: v > c)

        gen = spec.child(1).generator()
        p = MetaParams(gen.standard_normal((d, d)), [gen.standard_normal((d, k)) for _ in range(T)])
        g = meta_grad_population(p, gt).flatten()
        g_fd = central_difference_jacobian(lambda v: np.array([meta_loss_population(MetaParams.unflatten(v, d, k, T), gt)]),
                                           p.flatten())[0]
        track("gradient_fd_rel_error", np.linalg.norm(g - g_fd) / np.linalg.norm(g), lambda v, c: v > c)
        H = hessian_meta(p, gt)
        H_fd = central_difference_jacobian(lambda v: meta_grad_population(MetaParams.unflatten(v, d, k, T), gt).flatten(),
                                           p.flatten())
        track("hessian_fd_rel_error", np.linalg.norm(H - H_fd) / np.linalg.norm(H), lambda v, c: v > c)
        track("hessian_a_block_error", np.max(np.abs(H[:d * d, :d * d] - T * np.eye(d * d))), lambda v, c: v > c)

        trace = train_meta_gd(init_meta_params(d, k, T, 0.01, spec.child(2)), gt, gd_cfg, spec.child(3))
        fp = trace.final_params
        report.add(f"meta_gd_reaches_zero_loss[d={d},k={k},T={T},seed={seed}]", trace.final_loss < 1e-10,
                   trace.final_loss, 1e-10, f"{trace.iterations_used} iterations")
        if trace.final_loss < 1e-10:
            # absolute cutoff: for T >= 3 the difference is pure roundoff
            rank_gap = int(np.sum(np.linalg.svd(fp.a - gt.a_star, compute_uv=False) > 1e-6))
            track("zero_loss_base_error_rank_excess", max(0, rank_gap - 2 * k), lambda v, c: v > c)
            if T >= 3:
                err = max(np.linalg.norm(fp.a - gt.a_star),
                          max(np.linalg.norm(o - s) for o, s in zip(fp.outer(), gt.retrain_perturbations)))
                track("recovery_error_T>=3", err, lambda v, c: v > c)
            ft_loss = finetune_population(fp.a, gt, default_finetune_rank(k, T))[1]
            track("zero_loss_finetune_at_policy_rank", ft_loss, lambda v, c: v > c)
            H = hessian_meta(fp, gt)
            track("zero_loss_min_hessian_eig", float(np.linalg.eigvalsh(H)[0]), lambda v, c: v < c)

    thresholds = {
        "sr_mean_perturbation_identity": (1e-12, "le"),
        "sr_finetune_gap_min_loss_below_kT": (1e-4, "gt"),
        "sr_finetune_loss_at_k(T+1)": (1e-12, "lt"),
        "task_difference_inertia_mismatch": (0, "le"),
        "gradient_fd_rel_error": (1e-5, "lt"),
        "hessian_fd_rel_error": (1e-5, "lt"),
        "hessian_a_block_error": (0.0, "le"),
        "zero_loss_base_error_rank_excess": (0, "le"),
        "recovery_error_T>=3": (1e-4, "lt"),
        "zero_loss_finetune_at_policy_rank": (1e-12, "lt"),
        "zero_loss_min_hessian_eig": (-1e-8, "ge"),
    }
    compare = {"le": np.less_equal, "lt": np.less, "gt": np.greater, "ge": np.greater_equal}
    for name, value in worst.items():
        thr, op = thresholds[name]
        report.add(name, compare[op](value, thr), value, thr, "worst case over all combinations")

    _t2_suite(report, [c for c in combos if c[2] == 2], t2_probes)
    return report


def _t2_suite(report: VerificationReport, combos, n_probes: int) -> None:
    """Strict-saddle checks at manufactured two-task critical points."""
    if not combos or n_probes < 1:
        return
    candidate_minima = missing_direction = sign_mismatch = 0
    max_commutator = 0.0
    span_excess = 0
    for i in range(n_probes):
        d, k, T, seed = combos[i % len(combos)]
        spec = RngSpec(seed, (d, k, T, 99, i))
        gt = generate_ground_truth(d, k, T, spec.child(0))
        p = manufacture_t2_stationary_point(gt, spec.child(1))
        rep = classify_stationary_point(p, gt)
        candidate_minima += rep.classification is Classification.CANDIDATE_LOCAL_MINIMUM
        direction = find_negative_curvature_t2(p, gt)
        missing_direction += direction is None
        q_min = float(np.linalg.eigvalsh(schur_complement_q(p, gt))[0])
        sign_mismatch += (q_min < -1e-8) != (rep.min_hessian_eig < -1e-8)
        max_commutator = max(max_commutator, eigenbasis_commutator(p, gt))
        span_excess = max(span_excess, joint_span_dim(p.u) - (2 * k - 1))
    report.add("t2_no_candidate_local_minimum", candidate_minima == 0, candidate_minima, 0, f"{n_probes} probes")
    report.add("t2_negative_curvature_found", missing_direction == 0, missing_direction, 0, f"{n_probes} probes")
    report.add("t2_schur_sign_agreement", sign_mismatch == 0, sign_mismatch, 0, "Q vs full Hessian")
    report.add("t2_shared_eigenbasis", max_commutator < 1e-6, max_commutator, 1e-6, "relative commutator norm")
    report.add("t2_rank_deficiency", span_excess <= 0, span_excess, 0, "dim(im U1 + im U2) - (2k - 1)")
