"""Ground truth and synthetic task data for the linear multi-task model.

Each task ``t`` maps features through ``A* + U_t* U_t*^T``; tasks ``1..T``
are used for retraining and task ``T+1`` is held out for fine-tuning.
Task indices are 1-based throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DimensionError, GenerationError, TaskIndexError

DIVERSITY_TOL = 1e-10
MAX_GENERATION_ATTEMPTS = 100


@dataclass(frozen=True)
class RngSpec:
    """A reproducible random stream: master seed plus a derivation path.

    Streams with equal ``(master_seed, stream_id)`` produce identical draws.
    ``child`` derives independent sub-streams, so trials and tasks can be
    generated in any order (or in parallel) without changing results.
    """

    master_seed: int
    stream_id: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError(f"master_seed must fit in 64 unsigned bits, got {self.master_seed}")
        object.__setattr__(self, "stream_id", tuple(int(s) for s in self.stream_id))

    def child(self, *keys: int) -> "RngSpec":
        return RngSpec(self.master_seed, self.stream_id + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(seq))

    def to_dict(self) -> dict:
        return {"master_seed": int(self.master_seed), "stream_id": list(self.stream_id)}

    @classmethod
    def from_dict(cls, obj: dict) -> "RngSpec":
        return cls(int(obj["master_seed"]), tuple(obj.get("stream_id", ())))


def as_rng(rng) -> np.random.Generator:
    """Accept an RngSpec, a Generator or an int seed."""
    if isinstance(rng, RngSpec):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class GroundTruth:
    """Shared matrix ``a_star`` and ``T+1`` task factors ``u_star`` (each d x k)."""

    a_star: np.ndarray
    u_star: list
    seed: Optional[RngSpec] = None

    def __post_init__(self):
        self.a_star = np.asarray(self.a_star, dtype=np.float64)
        self.u_star = [np.asarray(u, dtype=np.float64) for u in self.u_star]
        d = self.a_star.shape[0]
        if self.a_star.shape != (d, d):
            raise DimensionError(f"a_star must be square, got {self.a_star.shape}")
        if len(self.u_star) < 2:
            raise DimensionError("need at least one retraining task and one test task")
        k = self.u_star[0].shape[1] if self.u_star[0].ndim == 2 else 0
        for u in self.u_star:
            if u.shape != (d, k):
                raise DimensionError(f"every u_star must be {d}x{k}, got {u.shape}")

    @property
    def d(self) -> int:
        return self.a_star.shape[0]

    @property
    def k(self) -> int:
        return self.u_star[0].shape[1]

    @property
    def T(self) -> int:
        return len(self.u_star) - 1

    def _check_index(self, t: int) -> None:
        if not 1 <= t <= self.T + 1:
            raise TaskIndexError(f"task index {t} outside 1..{self.T + 1}")

    def factor(self, t: int) -> np.ndarray:
        self._check_index(t)
        return self.u_star[t - 1]

    def perturbation(self, t: int) -> np.ndarray:
        """``U_t* U_t*^T``."""
        u = self.factor(t)
        return u @ u.T

    def task_matrix(self, t: int) -> np.ndarray:
        """``A* + U_t* U_t*^T``."""
        return self.a_star + self.perturbation(t)

    @property
    def retrain_perturbations(self) -> np.ndarray:
        """Stack of ``U_t* U_t*^T`` for t = 1..T, shape (T, d, d)."""
        u = np.stack(self.u_star[:-1])
        return u @ u.transpose(0, 2, 1)


@dataclass
class TaskDataset:
    """Samples of one task; columns of ``x`` and ``y`` are the samples."""

    x: np.ndarray
    y: np.ndarray
    task_index: int
    sigma_eps: float = 0.1
    sigma_x: float = 1.0
    seed: Optional[RngSpec] = field(default=None, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape != self.y.shape:
            raise DimensionError(f"x and y must be d x n with equal shapes, got {self.x.shape}, {self.y.shape}")
        if self.x.shape[1] < 1:
            raise DimensionError("dataset must contain at least one sample")

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @cached_property
    def moments(self):
        """Second moments ``(XX^T/n, YX^T/n, tr(YY^T)/n)``.

        Every squared loss over this dataset is a quadratic in these, which
        keeps gradient steps independent of the sample count.
        """
        n = self.n
        return self.x @ self.x.T / n, self.y @ self.x.T / n, float(np.sum(self.y * self.y)) / n


def samples_per_task(n_total: int, T: int) -> int:
    """Per-task retraining sample count ``floor(N / T)``."""
    return int(n_total) // int(T)


def check_task_diversity(gt: GroundTruth, tol: float = DIVERSITY_TOL) -> bool:
    """True iff all ``k(T+1)`` ground-truth factor columns are linearly independent."""
    cols = np.concatenate(gt.u_star, axis=1)
    if cols.shape[1] > cols.shape[0]:
        return False
    s = np.linalg.svd(cols, compute_uv=False)
    return bool(s[0] > 0 and s[-1] > tol * s[0])


def generate_ground_truth(d: int, k: int, T: int, rng, *, require_diversity: bool = True,
                          max_attempts: int = MAX_GENERATION_ATTEMPTS) -> GroundTruth:
    """Draw ``A*`` and ``U_1*..U_{T+1}*`` with i.i.d. standard normal entries.

    With ``require_diversity`` (the default) the draw is repeated until the
    factor columns are jointly independent, which needs ``k(T+1) <= d``.
    Landscape experiments on tiny ``d`` pass ``require_diversity=False``.
    """
    if d < 1 or k < 1 or T < 1:
        raise DimensionError(f"d, k, T must be positive, got d={d}, k={k}, T={T}")
    if require_diversity and k * (T + 1) > d:
        raise DimensionError(f"k(T+1) = {k * (T + 1)} exceeds d = {d}; task diversity is impossible")
    gen = as_rng(rng)
    for _ in range(max_attempts if require_diversity else 1):
        a_star = gen.standard_normal((d, d))
        u_star = [gen.standard_normal((d, k)) for _ in range(T + 1)]
        gt = GroundTruth(a_star, u_star, seed=rng if isinstance(rng, RngSpec) else None)
        if not require_diversity or check_task_diversity(gt):
            return gt
    raise GenerationError(f"no diverse ground truth after {max_attempts} attempts (d={d}, k={k}, T={T})")


def sample_task(gt: GroundTruth, task_index: int, n: int, sigma_x: float = 1.0,
                sigma_eps: float = 0.1, rng=None) -> TaskDataset:
    """Draw ``n`` samples ``y = (A* + U_t* U_t*^T) x + eps`` for one task."""
    m = gt.task_matrix(task_index)
    if n < 1:
        raise DimensionError(f"n must be >= 1, got {n}")
    if sigma_x <= 0 or sigma_eps < 0:
        raise ValueError("sigma_x must be positive and sigma_eps nonnegative")
    gen = as_rng(rng if rng is not None else 0)
    x = sigma_x * gen.standard_normal((gt.d, n))
    eps = gen.standard_normal((gt.d, n))
    y = m @ x + sigma_eps * eps
    return TaskDataset(x, y, task_index, float(sigma_eps), float(sigma_x),
                       seed=rng if isinstance(rng, RngSpec) else None)
