"""Path simulation: the Euler scheme, coupled refinements, first variation.

All randomness is drawn from counter-based Philox streams keyed by
``(seed, path)``, so a given path is identical no matter the batch size,
chunking, or execution order.  States between grid nodes use the frozen
coefficients from the last node plus the genuine Brownian increment carved
from the fine lattice, never interpolation of states.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sde_model import SdeSpec
from .time_grid import TimeGrid

__all__ = [
    "SimulationError",
    "BrownianLattice",
    "PathBatch",
    "FirstVariationBatch",
    "StrongError",
    "simulate_euler",
    "simulate_coupled",
    "simulate_first_variation",
    "simulate_first_variation_coupled",
    "strong_error_estimate",
]

_CHUNK_FLOATS = 16_000_000  # per-chunk increment buffer budget


class SimulationError(RuntimeError):
    """A path left the finite range; carries the first offending path and time."""

    def __init__(self, path_index: int, time: float, detail: str = ""):
        self.path_index = int(path_index)
        self.time = float(time)
        msg = f"non-finite state on path {path_index} at t={time}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class BrownianLattice:
    """Fine time partition plus the keyed generator recipe for increments."""

    times: np.ndarray
    dimension: int
    seed: int

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("lattice needs at least two times")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0.0):
            raise ValueError("lattice times must start at 0 and strictly increase")
        object.__setattr__(self, "times", t)

    @property
    def step_count(self) -> int:
        return self.times.size - 1

    def increments(self, first_path: int, n_paths: int) -> np.ndarray:
        """Brownian increments, shape (n_paths, steps, d), path-keyed."""
        steps = self.step_count
        out = np.empty((n_paths, steps, self.dimension))
        for i in range(n_paths):
            gen = np.random.Generator(
                np.random.Philox(key=(int(self.seed) << 64) + first_path + i)
            )
            out[i] = gen.standard_normal((steps, self.dimension))
        out *= np.sqrt(np.diff(self.times))[None, :, None]
        return out


def _checked_checkpoints(checkpoints, horizon: float) -> np.ndarray:
    times = np.unique(np.asarray(checkpoints, dtype=float).reshape(-1))
    if times.size == 0:
        raise ValueError("need at least one checkpoint")
    if not np.all(np.isfinite(times)):
        raise ValueError("checkpoints must be finite")
    if times[0] < 0.0 or times[-1] > horizon:
        raise ValueError(f"checkpoints must lie in [0, {horizon}]")
    return times


@dataclass(frozen=True)
class PathBatch:
    """States of a scheme at the requested checkpoint times.

    ``states[k]`` is the n_paths x d matrix at ``checkpoint_times[k]``.
    """

    checkpoint_times: np.ndarray
    states: np.ndarray
    spec_name: str
    grid: TimeGrid
    seed: int

    def __post_init__(self) -> None:
        times = np.asarray(self.checkpoint_times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[0] != times.size:
            raise ValueError("states must have shape (checkpoints, paths, dim)")
        if times.size and (times[0] < 0.0 or times[-1] > self.grid.horizon):
            raise ValueError("checkpoint times outside the grid horizon")
        if not np.all(np.isfinite(states)):
            raise ValueError("batch contains non-finite states")
        object.__setattr__(self, "checkpoint_times", times)
        object.__setattr__(self, "states", states)

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def dimension(self) -> int:
        return self.states.shape[2]

    def states_at(self, t: float) -> np.ndarray:
        idx = np.searchsorted(self.checkpoint_times, t)
        if idx >= self.checkpoint_times.size or self.checkpoint_times[idx] != t:
            raise KeyError(f"time {t} is not a checkpoint of this batch")
        return self.states[idx]

    def to_npz(self, path) -> None:
        np.savez_compressed(
            path,
            checkpoint_times=self.checkpoint_times,
            states=self.states,
            spec_name=np.array(self.spec_name),
            seed=np.array(self.seed),
        )

    def to_csv(self, path) -> None:
        d = self.dimension
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "t"] + [f"x{j + 1}" for j in range(d)])
            for k, t in enumerate(self.checkpoint_times):
                for p in range(self.n_paths):
                    writer.writerow(
                        [p, repr(float(t))] + [repr(float(v)) for v in self.states[k, p]]
                    )


@dataclass(frozen=True)
class FirstVariationBatch:
    """Sensitivity matrices of the scheme state to its initial point."""

    checkpoint_times: np.ndarray
    matrices: np.ndarray
    spec_name: str
    grid: TimeGrid
    seed: int

    def __post_init__(self) -> None:
        times = np.asarray(self.checkpoint_times, dtype=float)
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim != 4 or mats.shape[0] != times.size or mats.shape[2] != mats.shape[3]:
            raise ValueError("matrices must have shape (checkpoints, paths, dim, dim)")
        if not np.all(np.isfinite(mats)):
            raise ValueError("batch contains non-finite matrices")
        zero = np.flatnonzero(times == 0.0)
        if zero.size:
            eye = np.eye(mats.shape[2])
            if not np.all(mats[zero[0]] == eye):
                raise ValueError("first variation at t=0 must be the identity")
        object.__setattr__(self, "checkpoint_times", times)
        object.__setattr__(self, "matrices", mats)

    @property
    def n_paths(self) -> int:
        return self.matrices.shape[1]

    def matrices_at(self, t: float) -> np.ndarray:
        idx = np.searchsorted(self.checkpoint_times, t)
        if idx >= self.checkpoint_times.size or self.checkpoint_times[idx] != t:
            raise KeyError(f"time {t} is not a checkpoint of this batch")
        return self.matrices[idx]


def _fd_drift_jacobian(spec: SdeSpec):
    def jac(t, x):
        n, d = x.shape
        out = np.empty((n, d, d))
        delta = 1e-6 * (1.0 + np.linalg.norm(x, axis=1))
        for k in range(d):
            shift = np.zeros(d)
            shift[k] = 1.0
            up = spec.drift(t, x + delta[:, None] * shift)
            dn = spec.drift(t, x - delta[:, None] * shift)
            out[:, k, :] = (up - dn) / (2.0 * delta[:, None])
        return out

    return jac


def _fd_diffusion_jacobian(spec: SdeSpec):
    def jac(t, x):
        n, d = x.shape
        out = np.empty((n, d, d, d))
        delta = 1e-6 * (1.0 + np.linalg.norm(x, axis=1))
        for k in range(d):
            shift = np.zeros(d)
            shift[k] = 1.0
            up = spec.diffusion(t, x + delta[:, None] * shift)
            dn = spec.diffusion(t, x - delta[:, None] * shift)
            out[:, k, :, :] = (up - dn) / (2.0 * delta[:, None, None])
        return out

    return jac


class _SchemeState:
    """One Euler scheme walking the shared lattice."""

    def __init__(self, grid: TimeGrid, lattice_times: np.ndarray, spec: SdeSpec,
                 n: int, track_variation: bool, jac_b=None, jac_s=None):
        self.grid = grid
        self.spec = spec
        node_idx = np.searchsorted(lattice_times, grid.nodes)
        if not np.array_equal(lattice_times[node_idx], grid.nodes):
            raise ValueError("scheme grid nodes missing from the lattice")
        self.is_node = np.zeros(lattice_times.size, dtype=bool)
        self.is_node[node_idx] = True
        self.x = np.broadcast_to(spec.initial_point, (n, spec.dimension)).copy()
        self.node_time = 0.0
        self.acc = np.zeros((n, spec.dimension))
        self.track_variation = track_variation
        if track_variation:
            self.e_mat = np.broadcast_to(
                np.eye(spec.dimension), (n, spec.dimension, spec.dimension)
            ).copy()
        self.jac_b = jac_b
        self.jac_s = jac_s
        self._refresh_coeffs()

    def _refresh_coeffs(self) -> None:
        t, x = self.node_time, self.x
        self.b = self.spec.drift(t, x)
        self.sig = self.spec.diffusion(t, x)
        if self.track_variation:
            self.jb = self.jac_b(t, x)
            self.js = self.jac_s(t, x)

    def extend(self, t: float):
        """Continuous extension at t in [node_time, next node]."""
        h = t - self.node_time
        return self.x + h * self.b + np.einsum("njl,nl->nj", self.sig, self.acc)

    def extend_variation(self, t: float):
        h = t - self.node_time
        step = h * self.jb + np.einsum("nkjl,nl->nkj", self.js, self.acc)
        step += np.eye(self.spec.dimension)
        return np.einsum("nij,njk->nik", self.e_mat, step)

    def advance_node(self, t: float, first_path: int) -> None:
        new_x = self.extend(t)
        if not np.all(np.isfinite(new_x)):
            bad = np.flatnonzero(~np.all(np.isfinite(new_x), axis=1))[0]
            raise SimulationError(first_path + int(bad), t, self.spec.name)
        if self.track_variation:
            self.e_mat = self.extend_variation(t)
        self.x = new_x
        self.node_time = t
        self.acc[:] = 0.0
        self._refresh_coeffs()


def _run_lattice(
    spec: SdeSpec,
    grids: list[TimeGrid],
    checkpoints: np.ndarray,
    n_paths: int,
    seed: int,
    track_variation: bool,
):
    """Walk all schemes over the shared lattice; collect checkpoint data."""
    horizon = grids[0].horizon
    lattice_times = np.unique(
        np.concatenate([g.nodes for g in grids] + [checkpoints, np.array([0.0])])
    )
    lattice = BrownianLattice(lattice_times, spec.dimension, seed)
    ckpt_flag = np.isin(lattice_times, checkpoints)
    n_ck = checkpoints.size
    d = spec.dimension
    states = [np.empty((n_ck, n_paths, d)) for _ in grids]
    variations = (
        [np.empty((n_ck, n_paths, d, d)) for _ in grids] if track_variation else None
    )
    if track_variation:
        jac_b = spec.drift_jacobian or _fd_drift_jacobian(spec)
        jac_s = spec.diffusion_jacobian or _fd_diffusion_jacobian(spec)
    else:
        jac_b = jac_s = None

    chunk = max(64, _CHUNK_FLOATS // max(1, lattice.step_count * d))
    start = 0
    while start < n_paths:
        count = min(chunk, n_paths - start)
        inc = lattice.increments(start, count)
        schemes = [
            _SchemeState(g, lattice_times, spec, count, track_variation, jac_b, jac_s)
            for g in grids
        ]
        ck_pos = 0
        if ckpt_flag[0]:
            for s_i, sch in enumerate(schemes):
                states[s_i][ck_pos, start : start + count] = sch.x
                if track_variation:
                    variations[s_i][ck_pos, start : start + count] = sch.e_mat
            ck_pos += 1
        for j in range(lattice.step_count):
            t_next = lattice_times[j + 1]
            for sch in schemes:
                sch.acc += inc[:, j, :]
            for s_i, sch in enumerate(schemes):
                if sch.is_node[j + 1]:
                    sch.advance_node(t_next, start)
            if ckpt_flag[j + 1]:
                for s_i, sch in enumerate(schemes):
                    val = sch.extend(t_next)
                    if not np.all(np.isfinite(val)):
                        bad = np.flatnonzero(~np.all(np.isfinite(val), axis=1))[0]
                        raise SimulationError(start + int(bad), t_next, spec.name)
                    states[s_i][ck_pos, start : start + count] = val
                    if track_variation:
                        variations[s_i][ck_pos, start : start + count] = (
                            sch.extend_variation(t_next)
                        )
                ck_pos += 1
        start += count

    path_batches = [
        PathBatch(checkpoints.copy(), states[i], spec.name, grids[i], seed)
        for i in range(len(grids))
    ]
    if not track_variation:
        return path_batches, None
    var_batches = [
        FirstVariationBatch(checkpoints.copy(), variations[i], spec.name, grids[i], seed)
        for i in range(len(grids))
    ]
    return path_batches, var_batches


def simulate_euler(
    spec: SdeSpec, grid: TimeGrid, checkpoints, n_paths: int, seed: int
) -> PathBatch:
    """Simulate the continuous Euler extension at the checkpoint times."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    ck = _checked_checkpoints(checkpoints, grid.horizon)
    batches, _ = _run_lattice(spec, [grid], ck, n_paths, seed, False)
    return batches[0]


def _require_refinement(coarse: TimeGrid, fine: TimeGrid) -> None:
    if coarse.horizon != fine.horizon:
        raise ValueError("grids must share the horizon")
    if not np.all(np.isin(coarse.nodes, fine.nodes)):
        raise ValueError("fine grid does not contain every coarse node")


def simulate_coupled(
    spec: SdeSpec,
    coarse: TimeGrid,
    fine: TimeGrid,
    checkpoints,
    n_paths: int,
    seed: int,
) -> tuple[PathBatch, PathBatch]:
    """Coarse and fine schemes on one Brownian lattice (synchronous coupling)."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _require_refinement(coarse, fine)
    ck = _checked_checkpoints(checkpoints, coarse.horizon)
    batches, _ = _run_lattice(spec, [coarse, fine], ck, n_paths, seed, False)
    return batches[0], batches[1]


def simulate_first_variation(
    spec: SdeSpec, grid: TimeGrid, checkpoints, n_paths: int, seed: int
) -> FirstVariationBatch:
    """Per-path sensitivity matrices via the per-step linearized scheme."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    ck = _checked_checkpoints(checkpoints, grid.horizon)
    _, var = _run_lattice(spec, [grid], ck, n_paths, seed, True)
    return var[0]


def simulate_first_variation_coupled(
    spec: SdeSpec,
    coarse: TimeGrid,
    fine: TimeGrid,
    checkpoints,
    n_paths: int,
    seed: int,
) -> tuple[FirstVariationBatch, FirstVariationBatch]:
    """First-variation batches for coupled coarse/fine schemes on shared noise."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _require_refinement(coarse, fine)
    ck = _checked_checkpoints(checkpoints, coarse.horizon)
    _, var = _run_lattice(spec, [coarse, fine], ck, n_paths, seed, True)
    return var[0], var[1]


@dataclass(frozen=True)
class StrongError:
    """Moment of the pathwise gap with a jackknife standard error."""

    value: float
    stderr: float

    def __float__(self) -> float:
        return self.value


def strong_error_estimate(
    coarse: PathBatch, fine: PathBatch, t: float, rho: float
) -> StrongError:
    """(E |coarse - fine|^rho)^(1/rho) at a shared checkpoint."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if coarse.n_paths != fine.n_paths:
        raise ValueError("batches have different path counts")
    gaps = coarse.states_at(t) - fine.states_at(t)
    norms = np.linalg.norm(gaps, axis=1)
    n = norms.size
    top = float(norms.max(initial=0.0))
    if top == 0.0:
        return StrongError(0.0, 0.0)
    powered = (norms / top) ** rho
    total = float(powered.sum())
    value = top * (total / n) ** (1.0 / rho)
    if n < 2:
        return StrongError(value, 0.0)
    loo = top * ((total - powered) / (n - 1)) ** (1.0 / rho)
    stderr = float(np.sqrt((n - 1) / n * ((loo - loo.mean()) ** 2).sum()))
    return StrongError(value, stderr)
