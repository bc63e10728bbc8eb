"""A trace inequality between positive definite matrices, with fuzzing.

For a unit vector v, exponent rho > 1, the weight matrix is
``A = I + (rho - 2) v v^T`` (eigenvalue rho - 1 along v, 1 elsewhere).  For
SPD matrices M, a1, a2 with ``a_i - a_low I`` positive semidefinite, the
inequality states

    Tr[A ((I - A^{-1} M) a1 + (I - M^{-1} A) a2)]
        <=  (1 v (rho-1))^2 / (4 a_low (1 ^ (rho-1))) * Tr[(a1 - a2)^2],

writing ``v`` for max and ``^`` for min.  The left side is evaluated through
three independent algebraic routes (factored, direct, eigenvalue-split) that
must agree; the module also provides the sharper scalar bound for d = 1 and
a Cauchy-Schwarz variant, plus random-instance generation, bulk fuzzing, and
a derivative-free adversarial search in factor space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


class SingularMatrixError(ValueError):
    """An input matrix required eigenvalue clamping below 1e-12."""


@dataclass(frozen=True)
class LemmaInstance:
    """One instance of the inequality's data."""

    dimension: int
    v: np.ndarray
    rho: float
    m_mat: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    floor: float

    def __post_init__(self) -> None:
        d = self.dimension
        v = np.asarray(self.v, dtype=float)
        if v.shape != (d,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise ValueError("v must be a unit vector of length d")
        if not self.rho > 1:
            raise ValueError(f"rho must be > 1, got {self.rho}")
        if not self.floor > 0:
            raise ValueError(f"floor must be > 0, got {self.floor}")
        for label, mat in (("M", self.m_mat), ("a1", self.a1), ("a2", self.a2)):
            m = np.asarray(mat, dtype=float)
            if m.shape != (d, d):
                raise ValueError(f"{label} must be {d}x{d}")
            if np.abs(m - m.T).max() > 1e-12:
                raise ValueError(f"{label} must be symmetric within 1e-12")
            eigs = np.linalg.eigvalsh(m)
            if eigs.min() <= 0:
                raise ValueError(f"{label} must be positive definite")
            if label != "M" and eigs.min() < self.floor * (1 - 1e-9):
                raise ValueError(f"{label} violates the ellipticity floor")
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class InequalityCheck:
    holds: bool
    slack: float
    lhs: float
    rhs: float


def _weight_power(inst: LemmaInstance, exponent: float) -> np.ndarray:
    """A^s = I + ((rho-1)^s - 1) v v^T, valid because A has two eigenvalues."""
    lam = inst.rho - 1.0
    outer = np.outer(inst.v, inst.v)
    return np.eye(inst.dimension) + (lam**exponent - 1.0) * outer


def _eigh_clamped(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eigs, vecs = np.linalg.eigh(mat)
    if eigs.min() < 1e-12:
        raise SingularMatrixError(
            f"eigenvalue {eigs.min():.3e} below the 1e-12 clamping threshold"
        )
    return eigs, vecs


def lemma_lhs(inst: LemmaInstance) -> float:
    """Left side via the factored form Tr[(I-Mt)(S1 - Mt^{-1} S2)].

    Mt = A^{-1/2} M A^{-1/2} and S_i = A^{1/2} a_i A^{1/2}.  This conditioning
    keeps all inversions on a symmetrized matrix.
    """
    a_half = _weight_power(inst, 0.5)
    a_neg_half = _weight_power(inst, -0.5)
    m_tilde = a_neg_half @ inst.m_mat @ a_neg_half
    eigs, vecs = _eigh_clamped((m_tilde + m_tilde.T) / 2)
    m_tilde_inv = (vecs / eigs) @ vecs.T
    s1 = a_half @ inst.a1 @ a_half
    s2 = a_half @ inst.a2 @ a_half
    eye = np.eye(inst.dimension)
    return float(np.trace((eye - m_tilde) @ (s1 - m_tilde_inv @ s2)))


def lemma_lhs_direct(inst: LemmaInstance) -> float:
    """Left side via the defining form Tr[(A-M)a1 + (A - A M^{-1} A)a2]."""
    a = _weight_power(inst, 1.0)
    eigs, vecs = _eigh_clamped(inst.m_mat)
    m_inv = (vecs / eigs) @ vecs.T
    return float(np.trace((a - inst.m_mat) @ inst.a1 + (a - a @ m_inv @ a) @ inst.a2))


def lemma_lhs_eigensplit(inst: LemmaInstance) -> float:
    """Left side via the eigenvalue split of Mt.

    With Mt = U diag(lam) U^T and W_i = U^T A^{1/2} a_i A^{1/2} U:

        sum_i (1-lam_i)/max(1,lam_i) (W1-W2)_{ii}
            - ((lam_i-1)^+)^2/lam_i W1_{ii} - ((1-lam_i)^+)^2/lam_i W2_{ii}

    The last two sums are nonpositive, which is what makes the Cauchy-Schwarz
    variant possible.
    """
    a_half = _weight_power(inst, 0.5)
    a_neg_half = _weight_power(inst, -0.5)
    m_tilde = a_neg_half @ inst.m_mat @ a_neg_half
    eigs, vecs = _eigh_clamped((m_tilde + m_tilde.T) / 2)
    w1 = vecs.T @ a_half @ inst.a1 @ a_half @ vecs
    w2 = vecs.T @ a_half @ inst.a2 @ a_half @ vecs
    d1, d2 = np.diag(w1), np.diag(w2)
    term1 = np.sum((1 - eigs) / np.maximum(1.0, eigs) * (d1 - d2))
    term2 = np.sum(np.maximum(eigs - 1.0, 0.0) ** 2 / eigs * d1)
    term3 = np.sum(np.maximum(1.0 - eigs, 0.0) ** 2 / eigs * d2)
    return float(term1 - term2 - term3)


def lemma_rhs(inst: LemmaInstance) -> float:
    """Right side (1 v (rho-1))^2 / (4 a_low (1 ^ (rho-1))) Tr[(a1-a2)^2]."""
    lam = inst.rho - 1.0
    diff = inst.a1 - inst.a2
    pref = max(1.0, lam) ** 2 / (4.0 * inst.floor * min(1.0, lam))
    return float(pref * np.trace(diff @ diff))


def lemma_rhs_1d(inst: LemmaInstance) -> float:
    """Sharper scalar bound (rho-1)/(4 a_low) (a1-a2)^2, valid for d=1."""
    if inst.dimension != 1:
        raise ValueError("the sharpened bound applies to scalar instances only")
    diff = float(inst.a1[0, 0] - inst.a2[0, 0])
    return (inst.rho - 1.0) / (4.0 * inst.floor) * diff * diff


def cauchy_schwarz_bound(inst: LemmaInstance) -> float:
    """Cauchy-Schwarz bound sqrt((d+rho-2)(1 v (rho-1))) |a1-a2|_F.

    Unlike the main right side this variant needs no ellipticity floor; the
    left side is bounded by it on arbitrary symmetric a_i.
    """
    diff = inst.a1 - inst.a2
    factor = (inst.dimension + inst.rho - 2.0) * max(1.0, inst.rho - 1.0)
    return float(np.sqrt(factor) * np.sqrt(np.trace(diff @ diff.T)))


def check_inequality(inst: LemmaInstance, tol: float = 1e-9) -> InequalityCheck:
    """Evaluate both sides; holds iff lhs <= rhs + tol*(|lhs|+|rhs|+1)."""
    lhs = lemma_lhs(inst)
    rhs = lemma_rhs(inst)
    slack = rhs - lhs
    holds = lhs <= rhs + tol * (abs(lhs) + abs(rhs) + 1.0)
    return InequalityCheck(holds=holds, slack=slack, lhs=lhs, rhs=rhs)


def random_instance(
    rng: np.random.Generator, d: int, rho: float, floor: float
) -> LemmaInstance:
    """Random instance: v uniform on the sphere, M = GG^T + 1e-3 I, a_i = H_i H_i^T + floor I."""
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    g = rng.normal(size=(d, d))
    m = g @ g.T + 1e-3 * np.eye(d)
    mats = []
    for _ in range(2):
        h = rng.normal(size=(d, d))
        mats.append(h @ h.T + floor * np.eye(d))
    return LemmaInstance(
        dimension=d, v=v, rho=rho, m_mat=m, a1=mats[0], a2=mats[1], floor=floor
    )


@dataclass(frozen=True)
class FuzzReport:
    instances: int
    violations: int
    min_slack: float
    min_rel_slack: float
    worst: LemmaInstance


def fuzz_inequality(
    n_instances: int,
    dims: tuple[int, ...] = (1, 2, 3, 5),
    rhos: tuple[float, ...] = (1.1, 2.0, 3.0, 6.0),
    seed: int = 0,
    tol: float = 1e-9,
) -> FuzzReport:
    """Check the inequality on n random instances cycling over (d, rho) pairs.

    The ellipticity floor is drawn log-uniformly in [0.05, 5] per instance.
    rho values below 1.05 are rejected: the right side's 1/(rho-1) prefactor
    blows up there and swamps float comparisons.
    """
    if any(r < 1.05 for r in rhos):
        raise ValueError("fuzzing floor is rho >= 1.05")
    rng = np.random.default_rng(seed)
    combos = [(d, r) for d in dims for r in rhos]
    min_rel = np.inf
    min_slack = np.inf
    worst = None
    violations = 0
    for i in range(n_instances):
        d, rho = combos[i % len(combos)]
        floor = float(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        inst = random_instance(rng, d, rho, floor)
        res = check_inequality(inst, tol=tol)
        rel = res.slack / (abs(res.lhs) + abs(res.rhs) + 1.0)
        if not res.holds:
            violations += 1
        if rel < min_rel:
            min_rel = rel
            min_slack = res.slack
            worst = inst
    return FuzzReport(
        instances=n_instances,
        violations=violations,
        min_slack=float(min_slack),
        min_rel_slack=float(min_rel),
        worst=worst,
    )


def _instance_from_params(theta: np.ndarray, d: int, rho: float, floor: float) -> LemmaInstance:
    """Map unconstrained parameters to a valid instance (SPD by construction)."""
    k = d * d
    v_raw = theta[:d]
    norm = np.linalg.norm(v_raw)
    v = v_raw / norm if norm > 1e-12 else np.eye(d)[0]
    g = theta[d : d + k].reshape(d, d)
    h1 = theta[d + k : d + 2 * k].reshape(d, d)
    h2 = theta[d + 2 * k : d + 3 * k].reshape(d, d)
    return LemmaInstance(
        dimension=d,
        v=v,
        rho=rho,
        m_mat=g @ g.T + 1e-3 * np.eye(d),
        a1=h1 @ h1.T + floor * np.eye(d),
        a2=h2 @ h2.T + floor * np.eye(d),
        floor=floor,
    )


@dataclass(frozen=True)
class AdversarialReport:
    best_violation: float
    best_rel_violation: float
    restarts: int
    worst: LemmaInstance


def adversarial_search(
    dims: tuple[int, ...] = (1, 2, 3),
    rhos: tuple[float, ...] = (1.1, 2.0, 6.0),
    restarts_per_combo: int = 3,
    max_iter: int = 300,
    seed: int = 0,
) -> AdversarialReport:
    """Derivative-free search for violations, maximizing lhs - rhs.

    The search runs Nelder-Mead in factor space (v raw vector plus the
    Cholesky-like factors of M, a1, a2) so every iterate is a valid SPD
    instance.  Returns the largest lhs - rhs found; nonpositive means no
    violation.
    """
    rng = np.random.default_rng(seed)
    best = -np.inf
    best_rel = -np.inf
    worst = None
    for d in dims:
        for rho in rhos:
            for _ in range(restarts_per_combo):
                floor = float(np.exp(rng.uniform(np.log(0.1), np.log(2.0))))

                def neg_slack(theta: np.ndarray) -> float:
                    inst = _instance_from_params(theta, d, rho, floor)
                    try:
                        res = check_inequality(inst)
                    except SingularMatrixError:
                        return 0.0
                    return res.slack  # minimize slack = maximize violation

                theta0 = rng.normal(size=d + 3 * d * d)
                result = minimize(
                    neg_slack,
                    theta0,
                    method="Nelder-Mead",
                    options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-12},
                )
                inst = _instance_from_params(result.x, d, rho, floor)
                res = check_inequality(inst)
                violation = -res.slack
                rel = violation / (abs(res.lhs) + abs(res.rhs) + 1.0)
                if violation > best:
                    best = violation
                    best_rel = rel
                    worst = inst
    return AdversarialReport(
        best_violation=float(best),
        best_rel_violation=float(best_rel),
        restarts=len(dims) * len(rhos) * restarts_per_combo,
        worst=worst,
    )


def instance_to_dict(inst: LemmaInstance) -> dict:
    """JSON-ready serialization of an instance."""
    return {
        "dimension": inst.dimension,
        "rho": inst.rho,
        "floor": inst.floor,
        "v": inst.v.tolist(),
        "m_mat": inst.m_mat.tolist(),
        "a1": inst.a1.tolist(),
        "a2": inst.a2.tolist(),
    }
