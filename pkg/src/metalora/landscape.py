"""Critical points of the population Meta-LoRA loss.

Covers the dense Hessian and its Schur complement, the explicit
negative-curvature construction for two retraining tasks, stationary-point
classification, and the reduced loss used to hunt for (and certify)
spurious local minima with three or more tasks.

Conventions: ``S_t = U_t* U_t*^T``, ``P_t = U_t U_t^T - S_t`` and
``B_t = P_t - mean_s P_s``. Flattened vectors use column-major ``vec``.
"""
from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .errors import DimensionError, InfeasibleNetError, PreconditionError
from .objectives import MetaParams, meta_grad_population, meta_loss_population
from .solvers import TrainConfig
from .task_model import GroundTruth, RngSpec, as_rng

log = logging.getLogger(__name__)

MAX_HESSIAN_ORDER = 5000
MAX_NET_DIM = 8


class Classification(str, enum.Enum):
    GLOBAL_MINIMUM = "GlobalMinimum"
    STRICT_SADDLE = "StrictSaddle"
    CANDIDATE_LOCAL_MINIMUM = "CandidateLocalMinimum"
    NOT_STATIONARY = "NotStationary"


class NetMode(str, enum.Enum):
    FULL_NET = "FullNet"
    MONTE_CARLO = "MonteCarlo"


@dataclass
class CurvatureDirection:
    """A direction of negative curvature built from ``alpha`` and ``z``.

    ``vector`` is the full flattened direction (A-part included), ``quad``
    its Hessian quadratic form and ``rayleigh`` the normalized value.
    """

    vector: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    lam: float
    g_value: float
    quad: float
    rayleigh: float
    method: str


@dataclass
class StationaryReport:
    grad_norm: float
    min_hessian_eig: float
    classification: Classification
    loss_value: float
    b_norms: list
    curvature_direction: Optional[np.ndarray] = None
    direction_method: Optional[str] = None
    rayleigh_quotient: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "grad_norm": self.grad_norm,
            "min_hessian_eig": self.min_hessian_eig,
            "classification": self.classification.value,
            "loss_value": self.loss_value,
            "b_norms": list(self.b_norms),
            "curvature_direction": None if self.curvature_direction is None else self.curvature_direction.tolist(),
            "direction_method": self.direction_method,
            "rayleigh_quotient": self.rayleigh_quotient,
        }


@dataclass
class NetCertificate:
    center: list
    delta: float
    epsilon: float
    gamma: float
    min_r_value: float
    points_checked: int
    mode: NetMode
    certified: bool
    resolution: Optional[float] = None
    argmin: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "center": [u.tolist() for u in self.center],
            "delta": self.delta,
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "min_r_value": self.min_r_value,
            "points_checked": self.points_checked,
            "mode": self.mode.value,
            "certified": self.certified,
            "resolution": self.resolution,
        }


# -- basic pieces ---------------------------------------------------------------

def _stack_u(u: Sequence[np.ndarray], gt: GroundTruth) -> np.ndarray:
    if len(u) != gt.T:
        raise DimensionError(f"{len(u)} factors for T={gt.T}")
    arr = np.stack([np.asarray(ut, dtype=np.float64) for ut in u])
    if arr.shape[1:] != (gt.d, arr.shape[2]) or arr.ndim != 3:
        raise DimensionError(f"factors must be {gt.d} x k")
    return arr


def compute_b_matrices(u: Sequence[np.ndarray], gt: GroundTruth) -> np.ndarray:
    """``B_t = P_t - mean_s P_s`` stacked over t; the stack sums to zero."""
    arr = _stack_u(u, gt)
    p = arr @ arr.transpose(0, 2, 1) - gt.retrain_perturbations
    return p - p.mean(axis=0)


def critical_a(u: Sequence[np.ndarray], gt: GroundTruth) -> np.ndarray:
    """The unique ``A`` zeroing the A-gradient for fixed factors."""
    arr = _stack_u(u, gt)
    return gt.a_star - (arr @ arr.transpose(0, 2, 1) - gt.retrain_perturbations).mean(axis=0)


def _commutation(d: int, k: int) -> np.ndarray:
    """``K`` with ``K vec(X) = vec(X^T)`` for X of shape d x k."""
    K = np.zeros((d * k, d * k))
    for i in range(d):
        for j in range(k):
            K[j + i * k, i + j * d] = 1.0
    return K


def _factor_jacobian(ut: np.ndarray) -> np.ndarray:
    """Jacobian of ``vec(U U^T)`` with respect to ``vec(U)``, shape d^2 x dk."""
    d, k = ut.shape
    eye = np.eye(d)
    return np.kron(ut, eye) + np.kron(eye, ut) @ _commutation(d, k)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_order(n: int) -> None:
    if n > MAX_HESSIAN_ORDER:
        raise DimensionError(f"Hessian order {n} exceeds the dense limit {MAX_HESSIAN_ORDER}")


def hessian_meta(p: MetaParams, gt: GroundTruth) -> np.ndarray:
    """Dense Hessian of the population meta loss in ``[vec A; vec U_1; ...]`` order."""
    if p.T != gt.T or p.d != gt.d:
        raise DimensionError("params do not match ground truth")
    d, k, T = p.d, p.k, p.T
    n = p.size
    _check_order(n)
    H = np.zeros((n, n))
    dd = d * d
    H[:dd, :dd] = T * np.eye(dd)
    resid = p.a - gt.a_star + p.outer() - gt.retrain_perturbations
    for t in range(T):
        o = dd + t * d * k
        J = _factor_jacobian(p.u[t])
        H[:dd, o:o + d * k] = J
        H[o:o + d * k, :dd] = J.T
        H[o:o + d * k, o:o + d * k] = J.T @ J + 2.0 * np.kron(np.eye(k), _sym(resid[t]))
    return H


def hessian_quadratic_form(p: MetaParams, gt: GroundTruth, direction: np.ndarray) -> float:
    """``v^T H v`` evaluated without forming ``H``."""
    dp = MetaParams.unflatten(direction, p.d, p.k, p.T)
    resid = p.a - gt.a_star + p.outer() - gt.retrain_perturbations
    total = 0.0
    for t in range(p.T):
        ut, du = p.u[t], dp.u[t]
        total += float(np.sum((dp.a + du @ ut.T + ut @ du.T) ** 2))
        total += 2.0 * float(np.sum(resid[t] * (du @ du.T)))
    return total


def schur_complement_q(p: MetaParams, gt: GroundTruth) -> np.ndarray:
    """Schur complement of the (always ``T I``) A-block in the Hessian."""
    H = hessian_meta(p, gt)
    dd = p.d * p.d
    cross = H[dd:, :dd]
    return H[dd:, dd:] - cross @ cross.T / p.T


def _direction_from_factor_step(p: MetaParams, du: Sequence[np.ndarray]) -> np.ndarray:
    """Complete a factor step with the A-step minimizing the quadratic form."""
    da = -sum(dut @ ut.T + ut @ dut.T for ut, dut in zip(p.u, du)) / p.T
    return MetaParams(da, list(du)).flatten()


def inertia(m: np.ndarray, tol: float = 1e-10):
    """Counts of (positive, negative) eigenvalues beyond ``tol * max(1, ||m||)``."""
    ev = np.linalg.eigvalsh(_sym(m))
    thresh = tol * max(1.0, float(np.max(np.abs(ev))) if ev.size else 1.0)
    return int(np.sum(ev > thresh)), int(np.sum(ev < -thresh))


# -- two-task negative curvature -------------------------------------------------

def g_quadratic_form(alpha: np.ndarray, z: np.ndarray, u_hat: Sequence[np.ndarray], lam: float,
                     gt: Optional[GroundTruth] = None, tol: float = 1e-8) -> float:
    """``||U1 a1 + U2 a2||^2 + lam (||a1||^2 - ||a2||^2)`` for ``alpha = [a1; a2]``.

    This is the Schur-complement quadratic form along the factor step
    ``(z a1^T, -z a2^T)`` (see :func:`embed_alpha`). When ``gt`` is given
    the preconditions on ``z`` are checked: unit norm, eigenvector of
    ``S_2 - S_1`` with eigenvalue ``lam``, and in the kernel of
    ``U2 U2^T - U1 U1^T``.
    """
    u1, u2 = (np.asarray(u, dtype=np.float64) for u in u_hat)
    k = u1.shape[1]
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (2 * k,):
        raise DimensionError(f"alpha must have length {2 * k}")
    if gt is not None:
        z = np.asarray(z, dtype=np.float64)
        delta_star = gt.perturbation(2) - gt.perturbation(1)
        delta_hat = u2 @ u2.T - u1 @ u1.T
        scale = max(1.0, np.linalg.norm(delta_star, 2), np.linalg.norm(delta_hat, 2))
        residual = max(abs(np.linalg.norm(z) - 1.0),
                       np.linalg.norm(delta_star @ z - lam * z) / scale,
                       np.linalg.norm(delta_hat @ z) / scale)
        if residual > tol:
            raise PreconditionError(f"z violates the eigen/kernel preconditions (residual {residual:.3e})", residual)
    a1, a2 = alpha[:k], alpha[k:]
    w = u1 @ a1 + u2 @ a2
    return float(w @ w + lam * (a1 @ a1 - a2 @ a2))


def _g_matrix(u1: np.ndarray, u2: np.ndarray, lam: float) -> np.ndarray:
    k = u1.shape[1]
    eye = np.eye(k)
    return np.block([[u1.T @ u1 + lam * eye, u1.T @ u2], [u2.T @ u1, u2.T @ u2 - lam * eye]])


def embed_alpha(alpha: np.ndarray, z: np.ndarray):
    """Factor steps ``(z a1^T, -z a2^T)`` whose Schur form equals ``g``."""
    k = len(alpha) // 2
    return [np.outer(z, alpha[:k]), -np.outer(z, alpha[k:])]


def _null_space(m: np.ndarray, tol: float) -> np.ndarray:
    _, s, vt = np.linalg.svd(m)
    scale = max(1.0, s[0] if s.size else 1.0)
    rank = int(np.sum(s > tol * scale))
    return vt[rank:].T


def _kernel_candidates(delta_hat, delta_star, tol):
    """Eigenpairs of ``delta_star`` restricted to ``ker(delta_hat)``.

    At a stationary point the two matrices commute, so the kernel is an
    invariant subspace of ``delta_star``; diagonalizing inside it copes
    with repeated eigenvalues.
    """
    scale = max(1.0, np.linalg.norm(delta_star, 2), np.linalg.norm(delta_hat, 2))
    mu, vecs = np.linalg.eigh(delta_hat)
    basis = vecs[:, np.abs(mu) <= tol * scale]
    if basis.shape[1] == 0:
        return [], scale
    lam, c = np.linalg.eigh(basis.T @ delta_star @ basis)
    out = []
    for i in np.argsort(-np.abs(lam)):
        if abs(lam[i]) <= tol * scale:
            continue
        z = basis @ c[:, i]
        z /= np.linalg.norm(z)
        resid = np.linalg.norm(delta_star @ z - lam[i] * z) / scale
        if resid <= math.sqrt(tol):
            out.append((float(lam[i]), z))
    return out, scale


def _nudge(alpha, G, g_val):
    """Step from ``alpha`` along ``-grad g`` to a strictly negative value of g."""
    grad = 2.0 * G @ alpha
    gg = float(grad @ grad)
    if gg == 0.0:
        return None
    h = -grad
    curv = float(h @ G @ h)
    t = gg / (2.0 * curv) if curv > 0 else 1.0 / math.sqrt(gg)
    for _ in range(60):
        cand = alpha + t * h
        if float(cand @ G @ cand) < min(0.0, g_val):
            return cand
        t *= 0.5
    return None


def _case_alpha(u1, u2, cands, k, tol):
    """Alpha and z from the two-case argument; yields (alpha, lam, z, method)."""
    delta_hat = u2 @ u2.T - u1 @ u1.T
    pos = [c for c in cands if c[0] > 0]
    neg = [c for c in cands if c[0] < 0]
    # task swap makes the chosen eigenvalue positive
    for lam, z in cands:
        swapped = lam < 0
        ua, ub = (u2, u1) if swapped else (u1, u2)
        _, n_neg = inertia(-delta_hat if swapped else delta_hat, tol)
        if n_neg < k:
            null = _null_space(np.hstack([u1, u2]), tol)
            if null.shape[1] == 0:
                continue
            alpha = null[:, 0]
            diff = alpha[:k] @ alpha[:k] - alpha[k:] @ alpha[k:]
            if abs(diff) > tol:
                pool = neg if diff > 0 else pos
                if pool:
                    lam2, z2 = pool[0]
                    yield alpha, lam2, z2, "case1"
                    continue
            yield alpha, lam, z, "case1"
        else:
            null = _null_space(np.hstack([ua, -ub]), tol)
            picked = None
            for j in range(null.shape[1]):
                b = null[k:, j]
                if np.linalg.norm(b) > tol:
                    picked = b / np.linalg.norm(b)
                    break
            if picked is None:
                continue
            y = ub @ picked
            a1 = np.linalg.lstsq(ua, -y, rcond=None)[0]
            a_frame = np.concatenate([a1, picked])
            alpha = np.concatenate([a_frame[k:], a_frame[:k]]) if swapped else a_frame
            yield alpha, lam, z, "case2"


def find_negative_curvature_t2(p: MetaParams, gt: GroundTruth, tol: float = 1e-8,
                               match_tol: float = 1e-8) -> Optional[CurvatureDirection]:
    """Negative-curvature direction at a nonzero-loss critical point when T = 2.

    Follows the constructive argument: pick an eigenvector ``z`` of
    ``S_2 - S_1`` lying in ``ker(U2 U2^T - U1 U1^T)``, choose ``alpha`` by
    the negative-eigenvalue count of ``U2 U2^T - U1 U1^T`` (kernel
    combination when it is below k, shared image direction when it equals
    k), and nudge along ``-grad g`` when ``g`` lands exactly on zero. As a
    last resort within the same ``alpha (x) z`` family the minimizing
    eigenvector of ``g`` is used. Returns None when the preconditions fail.
    """
    if p.T != 2 or gt.T != 2:
        raise DimensionError("the two-task construction needs T = 2")
    grad_norm = meta_grad_population(p, gt).norm()
    loss = meta_loss_population(p, gt)
    if grad_norm >= tol or loss <= tol:
        log.info("preconditions fail: grad_norm=%.3e loss=%.3e tol=%.1e", grad_norm, loss, tol)
        return None
    u1, u2 = p.u
    k = p.k
    delta_hat = u2 @ u2.T - u1 @ u1.T
    delta_star = gt.perturbation(2) - gt.perturbation(1)
    cands, _ = _kernel_candidates(delta_hat, delta_star, match_tol)
    if not cands:
        log.info("no eigenvector of S2 - S1 with nonzero eigenvalue in ker(U2U2^T - U1U1^T)")
        return None

    def build(alpha, lam, z, method):
        G = _g_matrix(u1, u2, lam)
        g_val = float(alpha @ G @ alpha)
        if g_val >= -tol * max(1.0, alpha @ alpha):
            nudged = _nudge(alpha, G, g_val)
            if nudged is None:
                return None
            alpha, method = nudged, method + "-nudge"
            g_val = float(alpha @ G @ alpha)
        vec = _direction_from_factor_step(p, embed_alpha(alpha, z))
        quad = hessian_quadratic_form(p, gt, vec)
        rq = quad / float(vec @ vec)
        if rq >= -tol:
            return None
        return CurvatureDirection(vec, alpha, z, lam, g_val, quad, rq, method)

    for alpha, lam, z, method in _case_alpha(u1, u2, cands, k, match_tol):
        found = build(alpha, lam, z, method)
        if found is not None:
            return found
    for lam, z in cands:
        evals, evecs = np.linalg.eigh(_g_matrix(u1, u2, lam))
        if evals[0] < 0:
            found = build(evecs[:, 0], lam, z, "g-eigen")
            if found is not None:
                return found
    log.info("no negative g found along any kernel eigenvector")
    return None


# -- classification ---------------------------------------------------------------

def classify_stationary_point(p: MetaParams, gt: GroundTruth, grad_tol: float = 1e-8,
                              eig_tol: float = 1e-8) -> StationaryReport:
    """Label a point as NotStationary, GlobalMinimum, StrictSaddle or CandidateLocalMinimum."""
    grad_norm = meta_grad_population(p, gt).norm()
    loss = meta_loss_population(p, gt)
    b_norms = [float(np.linalg.norm(b)) for b in compute_b_matrices(p.u, gt)]
    H = hessian_meta(p, gt)
    evals, evecs = np.linalg.eigh(H)
    min_eig = float(evals[0])
    report = StationaryReport(grad_norm, min_eig, Classification.NOT_STATIONARY, loss, b_norms)
    if grad_norm >= grad_tol:
        return report
    if loss < grad_tol:
        report.classification = Classification.GLOBAL_MINIMUM
        return report
    if min_eig < -eig_tol:
        report.classification = Classification.STRICT_SADDLE
        direction = None
        if p.T == 2:
            direction = find_negative_curvature_t2(p, gt, tol=max(grad_tol, eig_tol))
        if direction is not None:
            report.curvature_direction = direction.vector
            report.direction_method = direction.method
            report.rayleigh_quotient = direction.rayleigh
        else:
            report.curvature_direction = evecs[:, 0]
            report.direction_method = "hessian-eigenvector"
            report.rayleigh_quotient = min_eig
        return report
    report.classification = Classification.CANDIDATE_LOCAL_MINIMUM
    return report


def eigenbasis_commutator(p: MetaParams, gt: GroundTruth) -> float:
    """Relative Frobenius norm of ``[U2U2^T - U1U1^T, S2 - S1]`` (T = 2)."""
    dh = p.u[1] @ p.u[1].T - p.u[0] @ p.u[0].T
    ds = gt.perturbation(2) - gt.perturbation(1)
    c = dh @ ds - ds @ dh
    return float(np.linalg.norm(c) / max(np.finfo(float).tiny, np.linalg.norm(dh) * np.linalg.norm(ds)))


def joint_span_dim(factors: Sequence[np.ndarray], tol: float = 1e-8) -> int:
    """Numerical dimension of the sum of the factors' column spaces."""
    m = np.hstack(factors)
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0])))


# -- manufactured critical points -------------------------------------------------

def manufacture_t2_stationary_point(gt: GroundTruth, rng) -> MetaParams:
    """An exact nonzero-loss critical point for T = 2.

    Factors are built from a proper subset of the eigenpairs of ``S_2 - S_1``
    (positive ones in ``U_2``, negative ones in ``U_1``), padded with a shared
    column lying in the span where both differences agree, and mixed by a
    random orthogonal matrix per task. ``A`` sits at its critical value.
    """
    if gt.T != 2:
        raise DimensionError("needs T = 2")
    gen = as_rng(rng)
    d, k = gt.d, gt.k
    lam, z = np.linalg.eigh(gt.perturbation(2) - gt.perturbation(1))
    order = np.argsort(lam)
    neg, pos = list(order[:k]), list(order[-k:])
    while True:
        keep_pos = [i for i in pos if gen.random() < 0.5]
        keep_neg = [i for i in neg if gen.random() < 0.5]
        if len(keep_pos) + len(keep_neg) < 2 * k:
            break
    agree = np.hstack([z[:, keep_pos + keep_neg], z[:, order[k:d - k]]])
    cols2 = [math.sqrt(lam[i]) * z[:, i] for i in keep_pos]
    cols1 = [math.sqrt(-lam[i]) * z[:, i] for i in keep_neg]
    n_shared = min(k - len(cols1), k - len(cols2))
    if agree.shape[1] and n_shared:
        n_shared = int(gen.integers(0, n_shared + 1))
        for _ in range(n_shared):
            c = agree @ gen.standard_normal(agree.shape[1])
            cols1.append(c)
            cols2.append(c)
    u = []
    for cols in (cols1, cols2):
        m = np.zeros((d, k))
        if cols:
            m[:, :len(cols)] = np.stack(cols, axis=1)
        q, _ = np.linalg.qr(gen.standard_normal((k, k)))
        u.append(m @ q)
    return MetaParams(critical_a(u, gt), u)


def hyperbola_instance() -> GroundTruth:
    """``T=2, k=1, d=2, A*=0, u_t*=e_t``; the test-task factor is ``(e_1+e_2)/sqrt 2``."""
    e = np.eye(2)
    return GroundTruth(np.zeros((2, 2)), [e[:, [0]], e[:, [1]], (e[:, [0]] + e[:, [1]]) / math.sqrt(2)])


def hyperbola_point(theta: float, s1: float = 1.0, s2: float = 1.0) -> list:
    """A global minimizer of the hyperbola instance: ``u1=(cosh, sinh)``, ``u2=(sinh, cosh)``."""
    c, s = math.cosh(theta), math.sinh(theta)
    return [s1 * np.array([[c], [s]]), s2 * np.array([[s], [c]])]


# -- reduced loss and spurious minima ---------------------------------------------

def reduced_loss_and_grad(u: Sequence[np.ndarray], gt: GroundTruth):
    """``sum_t ||B_t||_F^2`` (no 1/2) and its gradient ``4 B_t U_t``."""
    arr = _stack_u(u, gt)
    b = compute_b_matrices(arr, gt)
    return float(np.sum(b * b)), list(4.0 * b @ arr)


def reduced_hessian(u: Sequence[np.ndarray], gt: GroundTruth) -> np.ndarray:
    """Analytic Hessian of the reduced loss in flattened ``[vec U_1; ...]`` order."""
    arr = _stack_u(u, gt)
    T, d, k = arr.shape
    _check_order(T * d * k)
    b = compute_b_matrices(arr, gt)
    jac = [_factor_jacobian(ut) for ut in arr]
    centered = np.eye(T) - 1.0 / T
    m = np.block([[centered[t, s] * jac[s] for s in range(T)] for t in range(T)])
    curv = np.zeros((T * d * k, T * d * k))
    for t in range(T):
        o = t * d * k
        curv[o:o + d * k, o:o + d * k] = np.kron(np.eye(k), b[t])
    return 2.0 * m.T @ m + 4.0 * curv


def _flat_u(u) -> np.ndarray:
    return np.concatenate([np.asarray(ut).ravel(order="F") for ut in u])


def _unflat_u(vec, T, d, k) -> list:
    return [vec[t * d * k:(t + 1) * d * k].reshape((d, k), order="F") for t in range(T)]


def reduced_hessian_fd(u: Sequence[np.ndarray], gt: GroundTruth, h: float = 1e-5) -> np.ndarray:
    """Symmetrized central-difference Hessian of the reduced loss."""
    arr = _stack_u(u, gt)
    T, d, k = arr.shape
    x = _flat_u(arr)

    def grad(v):
        return _flat_u(reduced_loss_and_grad(_unflat_u(v, T, d, k), gt)[1])

    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad(x + e) - grad(x - e)) / (2 * h)
    return _sym(H)


@dataclass
class SpuriousCandidate:
    u_hat: list
    gt: GroundTruth
    reduced_loss: float
    reduced_grad_norm: float
    reduced_min_eig: float
    report: StationaryReport
    starts_used: int


def _polish_critical_point(x0, gt, T, d, k, max_nfev):
    def resid(v):
        return _flat_u(reduced_loss_and_grad(_unflat_u(v, T, d, k), gt)[1])

    def jac(v):
        return reduced_hessian(_unflat_u(v, T, d, k), gt)

    return least_squares(resid, x0, jac=jac, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev).x


def probe_spurious_minimum(gt: GroundTruth, search_cfg: TrainConfig = TrainConfig(init_scale=1.0, max_iters=200),
                           rng=None, n_starts: int = 1, grad_tol: float = 1e-8, loss_floor: float = 1e-4,
                           eig_floor: float = 1e-8) -> Optional[SpuriousCandidate]:
    """Multi-start search for a nonzero-loss local minimum of the reduced loss.

    Each start draws factors with standard deviation ``search_cfg.init_scale``
    and solves ``grad = 0`` by Gauss-Newton (least squares on the gradient,
    whose Jacobian is the reduced Hessian); a second pass first descends the
    reduced loss with BFGS and then polishes the same way. Acceptance:
    gradient norm below ``grad_tol``, reduced loss above ``loss_floor`` and
    finite-difference Hessian minimum eigenvalue above ``eig_floor``.
    """
    if gt.T < 3:
        log.info("T=%d: no spurious second-order points exist for T = 2; skipping", gt.T)
        return None
    gen = as_rng(rng if rng is not None else 0)
    T, d, k = gt.T, gt.d, gt.k
    n = T * d * k

    def fun(v):
        loss, g = reduced_loss_and_grad(_unflat_u(v, T, d, k), gt)
        return loss, _flat_u(g)

    for start in range(n_starts):
        x0 = search_cfg.init_scale * gen.standard_normal(n)
        seeds = [x0]
        res = minimize(fun, x0, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 20 * search_cfg.max_iters})
        seeds.append(res.x)
        for seed in seeds:
            x = _polish_critical_point(seed, gt, T, d, k, search_cfg.max_iters)
            u = _unflat_u(x, T, d, k)
            loss, g = reduced_loss_and_grad(u, gt)
            gnorm = float(np.linalg.norm(_flat_u(g)))
            if gnorm >= grad_tol or loss <= loss_floor:
                continue
            min_eig = float(np.linalg.eigvalsh(reduced_hessian_fd(u, gt))[0])
            if min_eig <= eig_floor:
                continue
            p = MetaParams(critical_a(u, gt), u)
            report = classify_stationary_point(p, gt, grad_tol=max(grad_tol, 10 * meta_grad_population(p, gt).norm()))
            return SpuriousCandidate(u, gt, loss, gnorm, min_eig, report, start + 1)
    return None


def search_spurious_minimum(d: int, k: int, T: int, rng: RngSpec, n_pairs: int = 500,
                            search_cfg: TrainConfig = TrainConfig(init_scale=1.0, max_iters=200)):
    """Probe fresh random (ground truth, start) pairs until a candidate appears.

    Ground truths here skip the diversity requirement so that tiny ``d`` can
    be explored. Returns ``(candidate or None, pairs_tried)``.
    """
    from .task_model import generate_ground_truth

    for i in range(n_pairs):
        gt = generate_ground_truth(d, k, T, rng.child(i, 0), require_diversity=False)
        found = probe_spurious_minimum(gt, search_cfg, rng.child(i, 1), n_starts=1)
        if found is not None:
            found.starts_used = i + 1
            return found, i + 1
    return None, n_pairs


def r_values(points: np.ndarray, u_hat: Sequence[np.ndarray], gt: GroundTruth) -> np.ndarray:
    """``r(U) = <U - U_hat, grad L_hat(U)>`` for a batch of flattened offsets.

    ``points`` has shape (m, T*d*k) and holds ``vec(U - U_hat)``.
    """
    arr = _stack_u(u_hat, gt)
    T, d, k = arr.shape
    off = points.reshape(-1, T, k, d).transpose(0, 1, 3, 2)
    u = arr[None] + off
    p = u @ u.transpose(0, 1, 3, 2) - gt.retrain_perturbations[None]
    b = p - p.mean(axis=1, keepdims=True)
    g = 4.0 * b @ u
    return np.einsum("mtdk,mtdk->m", off, g)


def _net_axis_points(n: int, delta: float, epsilon: float) -> int:
    """Grid points per axis so that the projected cube-surface grid is an epsilon-net."""
    return int(math.ceil(delta * math.sqrt(n - 1) / epsilon)) + 1


def full_net_size(n: int, delta: float, epsilon: float) -> int:
    m = _net_axis_points(n, delta, epsilon)
    return 2 * n * m ** (n - 1)


def certify_local_min(u_hat: Sequence[np.ndarray], gt: GroundTruth, delta: float, epsilon: float, gamma: float,
                      max_points: int = 100_000, mode: NetMode = NetMode.FULL_NET, rng=None,
                      chunk: int = 500_000) -> NetCertificate:
    """Evaluate ``r`` on the delta-sphere around ``u_hat``.

    FullNet covers the sphere deterministically: a grid of spacing
    ``2/(m-1)`` on every face of the cube ``[-1, 1]^n`` is pushed radially
    onto the sphere, which is 1-Lipschitz, so every sphere point lies within
    ``delta * sqrt(n-1) / (m-1) <= epsilon`` of a net point. It is only
    attempted for ``n = T d k <= 8`` and ``k = 1`` (for ``k > 1`` ``r``
    vanishes along the orthogonal-symmetry orbit). MonteCarlo draws
    ``max_points`` uniform sphere points and never certifies.
    """
    if delta <= 0 or epsilon <= 0 or gamma <= 0:
        raise ValueError("delta, epsilon and gamma must be positive")
    arr = _stack_u(u_hat, gt)
    T, d, k = arr.shape
    n = T * d * k
    mode = NetMode(mode)
    center = [u.copy() for u in arr]
    if mode is NetMode.MONTE_CARLO:
        gen = as_rng(rng if rng is not None else 0)
        best, best_pt, done = np.inf, None, 0
        while done < max_points:
            m = min(chunk, max_points - done)
            pts = gen.standard_normal((m, n))
            pts *= delta / np.linalg.norm(pts, axis=1, keepdims=True)
            r = r_values(pts, arr, gt)
            i = int(np.argmin(r))
            if r[i] < best:
                best, best_pt = float(r[i]), pts[i]
            done += m
        return NetCertificate(center, delta, epsilon, gamma, best, done, mode, False, None, best_pt)

    if n > MAX_NET_DIM:
        raise InfeasibleNetError(
            f"a full epsilon-net in {n} dimensions needs about {full_net_size(n, delta, epsilon):.3e} points "
            f"(limit: {MAX_NET_DIM} dimensions)", full_net_size(n, delta, epsilon))
    if k != 1:
        raise DimensionError("full-net certification is limited to k = 1")
    m_axis = _net_axis_points(n, delta, epsilon)
    grid = np.linspace(-1.0, 1.0, m_axis)
    resolution = delta * math.sqrt(n - 1) * (grid[1] - grid[0]) / 2 if m_axis > 1 else delta
    best, best_pt, done = np.inf, None, 0
    # chunk over the leading free coordinates, vectorize over the rest
    lead = 1
    while lead < n - 1 and m_axis ** (n - 1 - lead) > chunk:
        lead += 1
    tail = np.stack(np.meshgrid(*([grid] * (n - 1 - lead)), indexing="ij"), axis=-1).reshape(-1, n - 1 - lead) \
        if n - 1 - lead > 0 else np.zeros((1, 0))
    for axis in range(n):
        for sign in (-1.0, 1.0):
            for head in itertools.product(grid, repeat=lead):
                free = np.hstack([np.broadcast_to(np.array(head), (tail.shape[0], lead)), tail])
                pts = np.insert(free, axis, sign, axis=1)
                pts *= delta / np.linalg.norm(pts, axis=1, keepdims=True)
                r = r_values(pts, arr, gt)
                i = int(np.argmin(r))
                if r[i] < best:
                    best, best_pt = float(r[i]), pts[i].copy()
                done += pts.shape[0]
    certified = bool(best > gamma and resolution <= epsilon)
    return NetCertificate(center, delta, epsilon, gamma, best, done, mode, certified, resolution, best_pt)
