"""Standard retraining, Meta-LoRA gradient descent and LoRA fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, SingularSystemError
from .objectives import (
    Adapter,
    MetaParams,
    _moment_grad,
    _moment_loss,
    meta_grad_empirical,
    meta_grad_population,
    meta_loss_empirical_fast,
    meta_loss_population,
)
from .task_model import GroundTruth, RngSpec, TaskDataset, as_rng

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
MIN_LEARNING_RATE = 1e-20


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    max_iters: int = 50_000
    grad_tol: float = 1e-9
    init_scale: float = 0.01
    perturbation_radius: float = 1e-3
    stall_window: int = 50
    safeguard: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.init_scale < 0 or self.perturbation_radius < 0:
            raise ValueError("init_scale and perturbation_radius must be nonnegative")
        if self.stall_window < 1:
            raise ValueError("stall_window must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class TrainTrace:
    loss_history: list
    grad_norm_history: list
    final_params: Any
    converged: bool
    iterations_used: int
    diverged: bool = False
    perturbations: int = 0
    final_learning_rate: float = 0.0
    config: Optional[TrainConfig] = None
    seed: Optional[RngSpec] = None
    message: str = ""

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


class PopulationObjective:
    """Infinite-sample Meta-LoRA loss; its global minimum value is zero."""

    zero_floor = True

    def __init__(self, gt: GroundTruth):
        self.gt = gt

    def value(self, p: MetaParams) -> float:
        return meta_loss_population(p, self.gt)

    def value_and_grad(self, p: MetaParams):
        return meta_loss_population(p, self.gt), meta_grad_population(p, self.gt)


class EmpiricalObjective:
    """Finite-sample Meta-LoRA loss; its minimum sits at the noise floor."""

    zero_floor = False

    def __init__(self, data: Sequence[TaskDataset]):
        self.data = list(data)

    def value(self, p: MetaParams) -> float:
        return meta_loss_empirical_fast(p, self.data)

    def value_and_grad(self, p: MetaParams):
        return meta_loss_empirical_fast(p, self.data), meta_grad_empirical(p, self.data)


def _as_objective(objective):
    if isinstance(objective, GroundTruth):
        return PopulationObjective(objective)
    if isinstance(objective, (list, tuple)):
        return EmpiricalObjective(objective)
    return objective


def _sample_ball(gen: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Uniform sample from the n-dimensional ball."""
    v = gen.standard_normal(n)
    v /= np.linalg.norm(v)
    return radius * gen.random() ** (1.0 / n) * v


def _descend(x0: list, value_and_grad: Callable, cfg: TrainConfig, gen: np.random.Generator,
             allow_perturbation: bool) -> dict:
    """Full-batch gradient descent over a list of arrays.

    Steps that would increase the loss are retried at half the step size when
    ``cfg.safeguard`` is set. With perturbations allowed, a near-stationary
    iterate whose loss is still above ``10 * grad_tol`` is kicked by a uniform
    ball sample at most once per ``stall_window`` iterations.
    """
    x = [a.copy() for a in x0]
    lr = cfg.learning_rate
    loss, grads = value_and_grad(x)
    initial = max(abs(loss), np.finfo(float).tiny)
    losses, gnorms = [loss], []
    converged = diverged = False
    perturbations = 0
    last_kick = -cfg.stall_window
    message = "max_iters reached"
    it = 0
    n_total = sum(a.size for a in x)
    for it in range(cfg.max_iters):
        gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        gnorms.append(gnorm)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
            diverged = True
            message = f"diverged: loss {loss:.3e} exceeds {DIVERGENCE_FACTOR:.0e} x initial {initial:.3e}"
            log.warning(message)
            break
        if gnorm < cfg.grad_tol:
            stuck_high = allow_perturbation and cfg.perturbation_radius > 0 and loss > 10 * cfg.grad_tol
            if not stuck_high:
                converged = True
                message = "gradient norm below tolerance"
                break
            if it - last_kick >= cfg.stall_window:
                kick = _sample_ball(gen, n_total, cfg.perturbation_radius)
                off = 0
                for a in x:
                    a += kick[off: off + a.size].reshape(a.shape)
                    off += a.size
                loss, grads = value_and_grad(x)
                losses.append(loss)
                perturbations += 1
                last_kick = it
                continue
        while True:
            trial = [a - lr * g for a, g in zip(x, grads)]
            new_loss, new_grads = value_and_grad(trial)
            if not cfg.safeguard or new_loss <= loss or lr < MIN_LEARNING_RATE:
                break
            lr *= 0.5
        if lr < MIN_LEARNING_RATE:
            message = "step size underflow"
            break
        x, loss, grads = trial, new_loss, new_grads
        losses.append(loss)
    else:
        it = cfg.max_iters
        gnorms.append(float(np.sqrt(sum(np.sum(g * g) for g in grads))))
    return dict(x=x, losses=losses, gnorms=gnorms, converged=converged, diverged=diverged,
                iterations=it, perturbations=perturbations, lr=lr, message=message)


def init_meta_params(d: int, k: int, T: int, init_scale: float, rng) -> MetaParams:
    """Small i.i.d. N(0, init_scale^2) entries for ``A`` and every ``U_t``."""
    gen = as_rng(rng)
    a = init_scale * gen.standard_normal((d, d))
    u = [init_scale * gen.standard_normal((d, k)) for _ in range(T)]
    return MetaParams(a, u)


def train_meta_gd(init: MetaParams, objective: Union[PopulationObjective, EmpiricalObjective, GroundTruth, list],
                  cfg: TrainConfig = TrainConfig(), rng=None) -> TrainTrace:
    """Joint gradient descent on ``(A, U_1..U_T)``.

    ``objective`` is a :class:`PopulationObjective`, an
    :class:`EmpiricalObjective`, or a GroundTruth / list of datasets that is
    wrapped accordingly. Perturbations only apply to objectives whose minimum
    value is zero, since the stall test compares the loss against zero.
    """
    obj = _as_objective(objective)
    d, k, T = init.d, init.k, init.T

    def vg(arrs):
        p = MetaParams(arrs[0], arrs[1:])
        loss, g = obj.value_and_grad(p)
        return loss, [g.grad_a] + g.grad_u

    out = _descend([init.a] + list(init.u), vg, cfg, as_rng(rng if rng is not None else 0),
                   allow_perturbation=getattr(obj, "zero_floor", False))
    final = MetaParams(out["x"][0], out["x"][1:])
    assert final.d == d and final.k == k and final.T == T
    return TrainTrace(out["losses"], out["gnorms"], final, out["converged"], out["iterations"],
                      out["diverged"], out["perturbations"], out["lr"], cfg,
                      rng if isinstance(rng, RngSpec) else None, out["message"])


def solve_sr_population(gt: GroundTruth) -> np.ndarray:
    """Standard retraining on the population loss: ``A* + mean_t U_t* U_t*^T``."""
    return gt.a_star + gt.retrain_perturbations.mean(axis=0)


def solve_sr_empirical(data: Sequence[TaskDataset], ridge: float = 0.0) -> np.ndarray:
    """Pooled least squares ``(sum Y X^T)(sum X X^T + ridge I)^{-1}``."""
    if not data:
        raise DimensionError("no datasets")
    d = data[0].d
    gram = sum(ds.x @ ds.x.T for ds in data) + ridge * np.eye(d)
    cross = sum(ds.y @ ds.x.T for ds in data)
    s = np.linalg.svd(gram, compute_uv=False)
    if s[-1] <= s[0] * d * np.finfo(float).eps:
        raise SingularSystemError(f"pooled Gram matrix is singular (sigma_min={s[-1]:.3e}); add a ridge")
    return np.linalg.solve(gram.T, cross.T).T


def best_rank_approx(m: np.ndarray, rank: int):
    """Truncated SVD factors of ``m`` and the error ``1/2 sum_{i>r} s_i^2``.

    Each factor carries ``sqrt(s)`` so that ``u v^T`` is the best rank-r
    approximation in Frobenius norm.
    """
    m = np.asarray(m, dtype=np.float64)
    if not 1 <= rank <= min(m.shape):
        raise DimensionError(f"rank {rank} outside 1..{min(m.shape)}")
    left, s, right_t = np.linalg.svd(m)
    root = np.sqrt(s[:rank])
    adapter = Adapter(left[:, :rank] * root, right_t[:rank].T * root)
    return adapter, 0.5 * float(np.sum(s[rank:] ** 2))


def finetune_population(a_hat: np.ndarray, gt: GroundTruth, rank: int):
    """Optimal rank-r adapter for the held-out task and its population loss."""
    return best_rank_approx(gt.task_matrix(gt.T + 1) - a_hat, rank)


def finetune_empirical(a_hat: np.ndarray, data: TaskDataset, rank: int,
                       cfg: TrainConfig = TrainConfig(grad_tol=1e-6), rng=None):
    """Gradient descent on an asymmetric adapter with ``a_hat`` frozen."""
    if rank < 1:
        raise DimensionError("rank must be >= 1")
    d = data.d
    if np.shape(a_hat) != (d, d):
        raise DimensionError(f"a_hat must be {d}x{d}")
    gen = as_rng(rng if rng is not None else 0)
    u0 = cfg.init_scale * gen.standard_normal((d, rank))
    v0 = cfg.init_scale * gen.standard_normal((d, rank))

    def vg(arrs):
        u, v = arrs
        m = a_hat + u @ v.T
        g = _moment_grad(m, data)
        return _moment_loss(m, data), [g @ v, g.T @ u]

    out = _descend([u0, v0], vg, cfg, gen, allow_perturbation=False)
    adapter = Adapter(*out["x"])
    trace = TrainTrace(out["losses"], out["gnorms"], adapter, out["converged"], out["iterations"],
                       out["diverged"], 0, out["lr"], cfg, rng if isinstance(rng, RngSpec) else None,
                       out["message"])
    return adapter, trace


def default_finetune_rank(k: int, T: int) -> int:
    """Fine-tuning rank used for the synthetic experiments: 3k when T = 2, else k."""
    return 3 * k if T == 2 else k
