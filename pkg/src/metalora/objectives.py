"""Losses of the linear retraining/fine-tuning model and their gradients.

Parameters flatten in the order ``[vec(A); vec(U_1); ...; vec(U_T)]`` with
column-major ``vec``, so a rank-one perturbation ``z a^T`` of a factor maps
to ``kron(a, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError
from .task_model import GroundTruth, TaskDataset


@dataclass
class MetaParams:
    """Learner state: base matrix ``a`` and symmetric-adapter factors ``u``."""

    a: np.ndarray
    u: list

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.u = [np.asarray(ut, dtype=np.float64) for ut in self.u]
        d = self.a.shape[0]
        if self.a.shape != (d, d):
            raise DimensionError(f"a must be square, got {self.a.shape}")
        if not self.u:
            raise DimensionError("need at least one adapter factor")
        shape = self.u[0].shape
        if len(shape) != 2 or shape[0] != d or any(ut.shape != shape for ut in self.u):
            raise DimensionError("all u[t] must share shape d x k")

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def k(self) -> int:
        return self.u[0].shape[1]

    @property
    def T(self) -> int:
        return len(self.u)

    @property
    def size(self) -> int:
        return self.d * self.d + self.T * self.d * self.k

    def outer(self) -> np.ndarray:
        """Stack of ``U_t U_t^T``, shape (T, d, d)."""
        u = np.stack(self.u)
        return u @ u.transpose(0, 2, 1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(order="F")] + [ut.ravel(order="F") for ut in self.u])

    @classmethod
    def unflatten(cls, vec: np.ndarray, d: int, k: int, T: int) -> "MetaParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != d * d + T * d * k:
            raise DimensionError(f"vector of length {vec.size} does not match d={d}, k={k}, T={T}")
        a = vec[: d * d].reshape((d, d), order="F")
        off = d * d
        u = []
        for _ in range(T):
            u.append(vec[off: off + d * k].reshape((d, k), order="F"))
            off += d * k
        return cls(a, u)

    def copy(self) -> "MetaParams":
        return MetaParams(self.a.copy(), [ut.copy() for ut in self.u])

    @classmethod
    def at_ground_truth(cls, gt: GroundTruth) -> "MetaParams":
        return cls(gt.a_star.copy(), [u.copy() for u in gt.u_star[:-1]])


@dataclass
class MetaGradient:
    grad_a: np.ndarray
    grad_u: list

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.grad_a.ravel(order="F")] + [g.ravel(order="F") for g in self.grad_u])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.grad_a ** 2) + sum(np.sum(g ** 2) for g in self.grad_u)))


@dataclass
class Adapter:
    """Asymmetric rank-``r`` perturbation ``u v^T``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape or self.u.shape[1] < 1:
            raise DimensionError(f"u and v must both be d x r with r >= 1, got {self.u.shape}, {self.v.shape}")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def matrix(self) -> np.ndarray:
        return self.u @ self.v.T


def _check_compatible(p: MetaParams, gt: GroundTruth) -> None:
    if p.T != gt.T or p.d != gt.d:
        raise DimensionError(f"params (d={p.d}, T={p.T}) do not match ground truth (d={gt.d}, T={gt.T})")


def _residuals(p: MetaParams, gt: GroundTruth) -> np.ndarray:
    """``R_t = A + U_t U_t^T - A* - U_t* U_t*^T`` stacked over t."""
    _check_compatible(p, gt)
    return p.a - gt.a_star + p.outer() - gt.retrain_perturbations


def task_loss_population(a_t: np.ndarray, gt: GroundTruth, t: int) -> float:
    return 0.5 * float(np.sum((gt.task_matrix(t) - a_t) ** 2))


def task_loss_empirical(a_t: np.ndarray, data: TaskDataset) -> float:
    r = data.y - a_t @ data.x
    return float(np.sum(r * r)) / (2 * data.n)


def _moment_loss(m: np.ndarray, data: TaskDataset) -> float:
    cxx, cyx, cyy = data.moments
    return 0.5 * (float(np.sum((m @ cxx) * m)) - 2.0 * float(np.sum(m * cyx)) + cyy)


def _moment_grad(m: np.ndarray, data: TaskDataset) -> np.ndarray:
    cxx, cyx, _ = data.moments
    return m @ cxx - cyx


def meta_loss_population(p: MetaParams, gt: GroundTruth) -> float:
    return 0.5 * float(np.sum(_residuals(p, gt) ** 2))


def meta_loss_empirical(p: MetaParams, data: Sequence[TaskDataset]) -> float:
    if len(data) != p.T:
        raise DimensionError(f"{len(data)} datasets for {p.T} adapters")
    return sum(task_loss_empirical(p.a + ut @ ut.T, ds) for ut, ds in zip(p.u, data))


def test_loss_population(adapter: Adapter, a_hat: np.ndarray, gt: GroundTruth) -> float:
    """Held-out population loss ``1/2 ||A* + U*U*^T - A_hat - U V^T||_F^2``."""
    if adapter.u.shape[0] != gt.d or np.shape(a_hat) != (gt.d, gt.d):
        raise DimensionError("adapter / a_hat dimension does not match ground truth")
    return task_loss_population(np.asarray(a_hat) + adapter.matrix(), gt, gt.T + 1)


def meta_grad_population(p: MetaParams, gt: GroundTruth) -> MetaGradient:
    r = _residuals(p, gt)
    # A and A* need not be symmetric, hence R + R^T in the factor gradient
    grad_u = [(rt + rt.T) @ ut for rt, ut in zip(r, p.u)]
    return MetaGradient(r.sum(axis=0), grad_u)


def meta_grad_empirical(p: MetaParams, data: Sequence[TaskDataset]) -> MetaGradient:
    if len(data) != p.T:
        raise DimensionError(f"{len(data)} datasets for {p.T} adapters")
    grad_a = np.zeros_like(p.a)
    grad_u = []
    for ut, ds in zip(p.u, data):
        g = _moment_grad(p.a + ut @ ut.T, ds)
        grad_a += g
        grad_u.append((g + g.T) @ ut)
    return MetaGradient(grad_a, grad_u)


def meta_loss_empirical_fast(p: MetaParams, data: Sequence[TaskDataset]) -> float:
    """Same value as :func:`meta_loss_empirical`, computed from data moments."""
    return sum(_moment_loss(p.a + ut @ ut.T, ds) for ut, ds in zip(p.u, data))


# -- finite-difference oracles ------------------------------------------------

def central_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Column ``i`` is ``(fn(x + h e_i) - fn(x - h e_i)) / 2h``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=1)
