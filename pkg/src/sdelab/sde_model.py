"""SDE coefficient specifications and a catalog of benchmark problems.

A spec bundles drift ``b(t, x)`` and diffusion ``sigma(t, x)`` with the
regularity metadata the rest of the package relies on: the time-Holder
exponent of the coefficients, a uniform-ellipticity floor for
``a = sigma sigma^T``, and (when available) the affine structure
``b(t, x) = B(t) x + c(t)``, ``sigma(t, x) = Sigma(t)`` that unlocks exact
Gaussian marginal laws.

Coefficient callables must be pure and must broadcast over a leading batch
axis: ``drift(t, x)`` maps ``(d,) -> (d,)`` and ``(n, d) -> (n, d)``;
``diffusion(t, x)`` maps ``(d,) -> (d, d)`` and ``(n, d) -> (n, d, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class CoefficientError(ValueError):
    """Raised when a coefficient evaluation returns non-finite values."""


@dataclass(frozen=True)
class AffineStructure:
    """Affine coefficient data: drift B(t)x + c(t), state-independent Sigma(t)."""

    matrix_fn: Callable[[float], np.ndarray]
    offset_fn: Callable[[float], np.ndarray]
    noise_fn: Callable[[float], np.ndarray]


@dataclass(frozen=True)
class SdeSpec:
    """An SDE test problem with declared regularity metadata.

    Parameters
    ----------
    name : str
        Identifier used in configs and reports.
    dimension : int
        State (and Brownian) dimension d >= 1.
    initial_point : ndarray
        Deterministic starting point x0, shape (d,).
    horizon : float
        Terminal time T > 0.
    drift, diffusion : callable
        Coefficient functions, batch-broadcasting as described in the module
        docstring.
    holder_exponent : float
        Declared time regularity gamma in (0, 1]:
        |f(t,x) - f(s,x)| <= K |t-s|^gamma for f in {drift, diffusion}.
    ellipticity_floor : float
        Declared a_low > 0 with sigma sigma^T - a_low I positive semidefinite.
    affine_part : AffineStructure, optional
        Present iff drift is affine in x and diffusion is state-independent.
    drift_jacobian : callable, optional
        (t, x) -> J with J[..., k, j] = d b_j / d x_k.  Finite differences are
        used when absent.
    diffusion_jacobian : callable, optional
        (t, x) -> J with J[..., k, j, l] = d sigma_{jl} / d x_k.
    holder_constant : float
        Declared K for the Holder certificate, valid for samples with
        |x_i| <= holder_radius coordinatewise.
    holder_radius : float
        Coordinate box half-width on which holder_constant is declared.
    """

    name: str
    dimension: int
    initial_point: np.ndarray
    horizon: float
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    holder_exponent: float
    ellipticity_floor: float
    affine_part: Optional[AffineStructure] = None
    drift_jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    diffusion_jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    holder_constant: float = 0.0
    holder_radius: float = 3.0

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dimension}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if not self.ellipticity_floor > 0:
            raise ValueError(
                f"ellipticity_floor must be > 0, got {self.ellipticity_floor}"
            )
        if not 0 < self.holder_exponent <= 1:
            raise ValueError(
                f"holder_exponent must be in (0, 1], got {self.holder_exponent}"
            )
        x0 = np.asarray(self.initial_point, dtype=float)
        if x0.shape != (self.dimension,) or not np.all(np.isfinite(x0)):
            raise ValueError("initial_point must be a finite vector of length d")
        object.__setattr__(self, "initial_point", x0)

    @property
    def is_affine(self) -> bool:
        return self.affine_part is not None


@dataclass(frozen=True)
class EllipticityReport:
    """Result of a sampled uniform-ellipticity check."""

    min_eigenvalue: float
    passed: bool


def evaluate_coefficients(
    spec: SdeSpec, t: float, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (drift, diffusion) at one point, validating finiteness.

    Raises
    ------
    CoefficientError
        If the input point is non-finite or either coefficient evaluates to a
        non-finite value; the error message names (t, x).
    """
    x = np.asarray(x, dtype=float)
    if not 0 <= t <= spec.horizon:
        raise CoefficientError(f"time {t} outside [0, {spec.horizon}]")
    if x.shape != (spec.dimension,) or not np.all(np.isfinite(x)):
        raise CoefficientError(f"non-finite or misshaped state at t={t}: x={x}")
    b = np.asarray(spec.drift(t, x), dtype=float)
    sig = np.asarray(spec.diffusion(t, x), dtype=float)
    if b.shape != (spec.dimension,) or not np.all(np.isfinite(b)):
        raise CoefficientError(f"drift evaluation failed at t={t}, x={x}")
    if sig.shape != (spec.dimension, spec.dimension) or not np.all(np.isfinite(sig)):
        raise CoefficientError(f"diffusion evaluation failed at t={t}, x={x}")
    return b, sig


def verify_ellipticity(
    spec: SdeSpec,
    sample_times: np.ndarray,
    sample_points: np.ndarray,
) -> EllipticityReport:
    """Check min eig of sigma sigma^T over a sample grid against the floor.

    Every (t, x) pair from the Cartesian product of ``sample_times`` and
    ``sample_points`` is evaluated; passes iff the minimum eigenvalue is at
    least ``ellipticity_floor * (1 - 1e-9)``.
    """
    times = np.atleast_1d(np.asarray(sample_times, dtype=float))
    points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if times.size == 0 or points.size == 0:
        raise ValueError("ellipticity check requires non-empty samples")
    min_eig = math.inf
    for t in times:
        sigs = np.asarray(spec.diffusion(float(t), points), dtype=float)
        a = np.einsum("nij,nkj->nik", sigs, sigs)
        eigs = np.linalg.eigvalsh(a)
        min_eig = min(min_eig, float(eigs.min()))
    return EllipticityReport(
        min_eigenvalue=min_eig,
        passed=min_eig >= spec.ellipticity_floor * (1 - 1e-9),
    )


def _affine_callables(structure: AffineStructure):
    """Drift/diffusion callables derived from an affine structure."""

    def drift(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        bt = structure.matrix_fn(t)
        ct = structure.offset_fn(t)
        return x @ bt.T + ct

    def diffusion(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        sig = structure.noise_fn(t)
        if x.ndim == 1:
            return sig.copy()
        return np.broadcast_to(sig, x.shape[:-1] + sig.shape).copy()

    def drift_jacobian(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        # J[k, j] = d b_j / d x_k = B_{jk}
        j = structure.matrix_fn(t).T
        if x.ndim == 1:
            return j.copy()
        return np.broadcast_to(j, x.shape[:-1] + j.shape).copy()

    def diffusion_jacobian(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = structure.noise_fn(t).shape[0]
        shape = x.shape[:-1] + (d, d, d) if x.ndim > 1 else (d, d, d)
        return np.zeros(shape)

    return drift, diffusion, drift_jacobian, diffusion_jacobian


def _affine_spec(
    name: str,
    matrix_fn,
    offset_fn,
    noise_fn,
    dimension: int,
    initial_point,
    holder_exponent: float,
    ellipticity_floor: float,
    holder_constant: float,
    horizon: float = 1.0,
) -> SdeSpec:
    structure = AffineStructure(matrix_fn, offset_fn, noise_fn)
    drift, diffusion, djac, sjac = _affine_callables(structure)
    return SdeSpec(
        name=name,
        dimension=dimension,
        initial_point=np.asarray(initial_point, dtype=float),
        horizon=horizon,
        drift=drift,
        diffusion=diffusion,
        holder_exponent=holder_exponent,
        ellipticity_floor=ellipticity_floor,
        affine_part=structure,
        drift_jacobian=djac,
        diffusion_jacobian=sjac,
        holder_constant=holder_constant,
    )


def _tanh_spec(gamma: float) -> SdeSpec:
    def drift(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scale = 1.0 + t**gamma
        return np.stack(
            [np.tanh(x[..., 1]) * scale, np.tanh(x[..., 0]) * scale], axis=-1
        )

    def diffusion(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + 0.5 * np.tanh(x[..., 0])
        out[..., 1, 1] = 1.0 + 0.5 * np.tanh(x[..., 1])
        return out

    def drift_jacobian(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scale = 1.0 + t**gamma
        j = np.zeros(x.shape[:-1] + (2, 2))
        # J[k, j] = d b_j / d x_k; b_1 depends on x_2 and vice versa
        j[..., 0, 1] = scale / np.cosh(x[..., 0]) ** 2
        j[..., 1, 0] = scale / np.cosh(x[..., 1]) ** 2
        return j

    def diffusion_jacobian(t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        j = np.zeros(x.shape[:-1] + (2, 2, 2))
        j[..., 0, 0, 0] = 0.5 / np.cosh(x[..., 0]) ** 2
        j[..., 1, 1, 1] = 0.5 / np.cosh(x[..., 1]) ** 2
        return j

    return SdeSpec(
        name="tanh-2d",
        dimension=2,
        initial_point=np.array([0.5, -0.5]),
        horizon=1.0,
        drift=drift,
        diffusion=diffusion,
        holder_exponent=gamma,
        # sigma is diagonal with entries in [0.5, 1.5], so a >= 0.25 I
        ellipticity_floor=0.25,
        drift_jacobian=drift_jacobian,
        diffusion_jacobian=diffusion_jacobian,
        holder_constant=2.0,
    )


def _format_gamma(gamma: float) -> str:
    for num, den in ((1, 4), (1, 2), (3, 4)):
        if math.isclose(gamma, num / den):
            return f"{num}/{den}"
    if math.isclose(gamma, 1.0):
        return "1"
    return f"{gamma:g}"


def _const_ou() -> SdeSpec:
    eye = np.eye(2)
    return _affine_spec(
        "const-ou",
        matrix_fn=lambda t: -eye,
        offset_fn=lambda t: np.zeros(2),
        noise_fn=lambda t: eye,
        dimension=2,
        initial_point=[1.0, -0.5],
        holder_exponent=1.0,
        ellipticity_floor=1.0,
        holder_constant=0.0,
    )


def _brownian() -> SdeSpec:
    one = np.eye(1)
    return _affine_spec(
        "brownian",
        matrix_fn=lambda t: np.zeros((1, 1)),
        offset_fn=lambda t: np.zeros(1),
        noise_fn=lambda t: one,
        dimension=1,
        initial_point=[0.0],
        holder_exponent=1.0,
        ellipticity_floor=1.0,
        holder_constant=0.0,
    )


def _holder_ou(gamma: float) -> SdeSpec:
    eye = np.eye(2)
    # |x| <= 3*sqrt(2) on the declared sample box and |t^g - s^g| <= |t-s|^g
    return _affine_spec(
        f"holder-ou({_format_gamma(gamma)})",
        matrix_fn=lambda t: -(1.0 + t**gamma) * eye,
        offset_fn=lambda t: np.zeros(2),
        noise_fn=lambda t: (1.0 + t**gamma) * eye,
        dimension=2,
        initial_point=[1.0, -0.5],
        holder_exponent=gamma,
        ellipticity_floor=1.0,
        holder_constant=5.0,
    )


def _bures_2d() -> SdeSpec:
    b_mat = np.array([[-1.0, 0.8], [-0.3, -0.6]])
    c_vec = np.array([0.5, 0.0])

    def noise_fn(t: float) -> np.ndarray:
        return np.array([[1.0 + 0.5 * t, 0.2], [0.0, 0.6]])

    return _affine_spec(
        "bures-2d",
        matrix_fn=lambda t: b_mat,
        offset_fn=lambda t: c_vec,
        noise_fn=noise_fn,
        dimension=2,
        initial_point=[0.8, -0.3],
        holder_exponent=1.0,
        # min over t in [0,1] of lambda_min(Sigma Sigma^T), attained at t=0
        ellipticity_floor=0.33,
        holder_constant=1.0,
    )


def builtin_catalog() -> dict[str, SdeSpec]:
    """Benchmark problems keyed by name.

    Includes constant-coefficient and time-Holder Ornstein-Uhlenbeck families,
    a bounded-coefficient nonlinear 2d problem, an anisotropic affine problem
    with non-commuting drift/noise matrices, and scalar Brownian motion.
    """
    entries = [
        _brownian(),
        _const_ou(),
        _holder_ou(0.25),
        _holder_ou(0.5),
        _holder_ou(1.0),
        _tanh_spec(0.5),
        _bures_2d(),
    ]
    return {spec.name: spec for spec in entries}


def get_spec(name: str, gamma: float | None = None) -> SdeSpec:
    """Resolve a catalog entry by id, optionally parameterized by gamma.

    ``get_spec("holder-ou", gamma=0.5)`` and ``get_spec("holder-ou(1/2)")``
    are equivalent; ``tanh-2d`` accepts gamma the same way.
    """
    if name == "holder-ou":
        if gamma is None:
            raise KeyError("holder-ou requires a gamma parameter")
        return _holder_ou(gamma)
    if name == "tanh-2d":
        return _tanh_spec(0.5 if gamma is None else gamma)
    catalog = builtin_catalog()
    if name in catalog:
        spec = catalog[name]
        if gamma is not None and not math.isclose(spec.holder_exponent, gamma):
            raise KeyError(f"catalog entry {name!r} has fixed gamma")
        return spec
    raise KeyError(f"unknown SDE spec {name!r}")
