"""Tests for the path simulator, coupling, and strong-error estimators."""
import dataclasses

import numpy as np
import pytest

from sdelab.euler import (
    BrownianLattice,
    FirstVariationBatch,
    PathBatch,
    SimulationError,
    simulate_coupled,
    simulate_euler,
    simulate_first_variation,
    simulate_first_variation_coupled,
    strong_error_estimate,
)
from sdelab.gaussian import euler_marginal_law
from sdelab.sde_model import SdeSpec, get_spec
from sdelab.time_grid import build_power, build_uniform


def still_spec() -> SdeSpec:
    """Zero drift, zero noise: paths never leave the initial point."""
    return SdeSpec(
        name="still",
        dimension=2,
        initial_point=np.array([1.5, -2.0]),
        horizon=1.0,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=lambda t, x: np.zeros(x.shape[:-1] + (2, 2)),
        holder_exponent=1.0,
        ellipticity_floor=1.0,  # declared metadata only, unused by the simulator
    )


def drift_only_spec() -> SdeSpec:
    vel = np.array([1.0, 2.0])
    return SdeSpec(
        name="drift-only",
        dimension=2,
        initial_point=np.zeros(2),
        horizon=1.0,
        drift=lambda t, x: np.broadcast_to(vel, x.shape).copy(),
        diffusion=lambda t, x: np.zeros(x.shape[:-1] + (2, 2)),
        holder_exponent=1.0,
        ellipticity_floor=1.0,
    )


def blowup_spec() -> SdeSpec:
    """Cubic drift from x0=3: deterministic blow-up within a handful of steps."""
    return SdeSpec(
        name="cubic-blowup",
        dimension=1,
        initial_point=np.array([3.0]),
        horizon=1.0,
        drift=lambda t, x: x**3,
        diffusion=lambda t, x: np.full(x.shape[:-1] + (1, 1), 1e-8),
        holder_exponent=1.0,
        ellipticity_floor=1e-16,
    )


def make_batch(states, times=(1.0,)):
    """Hand-built PathBatch on a one-step unit grid."""
    states = np.asarray(states, dtype=float)
    return PathBatch(
        checkpoint_times=np.asarray(times, dtype=float),
        states=states,
        spec_name="custom",
        grid=build_uniform(1.0, 1),
        seed=0,
    )


class TestBrownianLattice:
    def test_increment_variance(self):
        lat = BrownianLattice(np.array([0.0, 0.1, 0.4, 1.0]), 2, seed=7)
        inc = lat.increments(0, 4000)
        steps = np.diff(lat.times)
        for j, h in enumerate(steps):
            var = inc[:, j, :].var(axis=0, ddof=1)
            assert np.all(np.abs(var - h) <= 5.0 * h * np.sqrt(2.0 / 4000))

    def test_path_keying_is_offset_invariant(self):
        lat = BrownianLattice(np.array([0.0, 0.5, 1.0]), 2, seed=3)
        full = lat.increments(0, 8)
        tail = lat.increments(5, 3)
        assert np.array_equal(full[5:], tail)

    def test_validation(self):
        with pytest.raises(ValueError):
            BrownianLattice(np.array([0.1, 0.5]), 1, seed=0)
        with pytest.raises(ValueError):
            BrownianLattice(np.array([0.0]), 1, seed=0)
        with pytest.raises(ValueError):
            BrownianLattice(np.array([0.0, 0.5, 0.5]), 1, seed=0)


class TestSimulateEuler:
    def test_still_spec_stays_put(self):
        spec = still_spec()
        for grid in [build_uniform(1.0, 4), build_power(1.0, 8, 2.0)]:
            batch = simulate_euler(spec, grid, [0.0, 0.3, 1.0], 10, seed=1)
            for t in [0.0, 0.3, 1.0]:
                assert np.array_equal(
                    batch.states_at(t), np.broadcast_to(spec.initial_point, (10, 2))
                )

    def test_pure_drift_is_exact_at_any_checkpoint(self):
        spec = drift_only_spec()
        grid = build_uniform(1.0, 5)
        times = [0.1, 0.2, 0.55, 1.0]
        batch = simulate_euler(spec, grid, times, 6, seed=2)
        for t in times:
            expect = t * np.array([1.0, 2.0])
            assert np.allclose(batch.states_at(t), expect, atol=1e-15)

    def test_one_step_ou_is_brownian_endpoint(self):
        # x - x*1 + W_T collapses to W_T regardless of x0
        spec = get_spec("const-ou")
        grid = build_uniform(1.0, 1)
        n = 20000
        batch = simulate_euler(spec, grid, [1.0], n, seed=4)
        x = batch.states_at(1.0)
        assert np.all(np.abs(x.mean(axis=0)) <= 5.0 / np.sqrt(n))
        cov = np.cov(x.T)
        assert np.all(np.abs(np.diag(cov) - 1.0) <= 5.0 * np.sqrt(2.0 / n))
        assert abs(cov[0, 1]) <= 5.0 / np.sqrt(n)

    def test_matches_scheme_law(self):
        spec = get_spec("const-ou")
        grid = build_uniform(1.0, 64)
        n = 100_000
        batch = simulate_euler(spec, grid, [1.0], n, seed=12)
        law = euler_marginal_law(spec, grid, 1.0)
        x = batch.states_at(1.0)
        mean_se = x.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(x.mean(axis=0) - law.mean) <= 5.0 * mean_se)
        cov = np.cov(x.T)
        C = law.covariance
        cov_se = np.sqrt(
            (np.outer(np.diag(C), np.diag(C)) + C**2) / n
        )
        assert np.all(np.abs(cov - C) <= 5.0 * cov_se)

    def test_deterministic_and_slice_invariant(self):
        spec = get_spec("const-ou")
        grid = build_uniform(1.0, 8)
        a = simulate_euler(spec, grid, [0.5, 1.0], 100, seed=9)
        b = simulate_euler(spec, grid, [0.5, 1.0], 100, seed=9)
        assert np.array_equal(a.states, b.states)
        small = simulate_euler(spec, grid, [0.5, 1.0], 40, seed=9)
        assert np.array_equal(a.states[:, :40], small.states)

    def test_zero_time_checkpoint(self):
        spec = get_spec("const-ou")
        batch = simulate_euler(spec, build_uniform(1.0, 4), [0.0], 3, seed=0)
        assert np.array_equal(
            batch.states_at(0.0), np.broadcast_to(spec.initial_point, (3, 2))
        )

    def test_validation_errors(self):
        spec = get_spec("brownian")
        grid = build_uniform(1.0, 4)
        with pytest.raises(ValueError):
            simulate_euler(spec, grid, [0.5], 0, seed=0)
        with pytest.raises(ValueError):
            simulate_euler(spec, grid, [], 5, seed=0)
        with pytest.raises(ValueError):
            simulate_euler(spec, grid, [1.5], 5, seed=0)
        batch = simulate_euler(spec, grid, [0.5], 5, seed=0)
        with pytest.raises(KeyError):
            batch.states_at(0.75)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_blowup_carries_path_and_time(self):
        spec = blowup_spec()
        grid = build_uniform(1.0, 16)
        with pytest.raises(SimulationError) as err:
            simulate_euler(spec, grid, [1.0], 4, seed=1)
        assert err.value.path_index >= 0
        assert 0.0 < err.value.time <= 1.0

    def test_npz_round_trip(self, tmp_path):
        spec = get_spec("const-ou")
        batch = simulate_euler(spec, build_uniform(1.0, 4), [0.5, 1.0], 7, seed=3)
        target = tmp_path / "batch.npz"
        batch.to_npz(target)
        data = np.load(target)
        assert np.array_equal(data["states"], batch.states)
        assert np.array_equal(data["checkpoint_times"], batch.checkpoint_times)
        assert str(data["spec_name"]) == "const-ou"
        assert int(data["seed"]) == 3

    def test_csv_round_trip(self, tmp_path):
        spec = get_spec("const-ou")
        batch = simulate_euler(spec, build_uniform(1.0, 4), [0.5, 1.0], 7, seed=3)
        target = tmp_path / "batch.csv"
        batch.to_csv(target)
        lines = target.read_text().strip().splitlines()
        assert lines[0] == "path,t,x1,x2"
        assert len(lines) == 1 + 2 * 7
        row = lines[1].split(",")
        assert int(row[0]) == 0
        assert float(row[1]) == 0.5
        assert float(row[2]) == batch.states[0, 0, 0]


class TestCoupled:
    def test_identical_grids_identical_batches(self):
        spec = get_spec("const-ou")
        grid = build_uniform(1.0, 8)
        a, b = simulate_coupled(spec, grid, grid, [0.5, 1.0], 50, seed=6)
        assert np.array_equal(a.states, b.states)

    def test_additive_noise_exact_at_coarse_nodes(self):
        # b=0, sigma=I: both schemes just sum the shared increments, so they
        # agree at shared nodes up to summation-order roundoff.
        spec = get_spec("brownian")
        coarse = build_uniform(1.0, 10)
        fine = build_uniform(1.0, 640)
        bc, bf = simulate_coupled(spec, coarse, fine, coarse.nodes[1:], 500, seed=3)
        for t in coarse.nodes[1:]:
            assert strong_error_estimate(bc, bf, t, 2.0).value <= 1e-13

    def test_non_refining_grid_rejected(self):
        spec = get_spec("brownian")
        with pytest.raises(ValueError):
            simulate_coupled(
                spec, build_uniform(1.0, 10), build_uniform(1.0, 15), [1.0], 5, seed=0
            )
        with pytest.raises(ValueError):
            simulate_coupled(
                spec, build_uniform(1.0, 4), build_uniform(2.0, 8), [1.0], 5, seed=0
            )

    def test_power_grid_refinement_accepted(self):
        spec = get_spec("brownian")
        coarse = build_power(1.0, 8, 2.0)
        fine = build_power(1.0, 64, 2.0)
        a, b = simulate_coupled(spec, coarse, fine, [1.0], 10, seed=5)
        assert a.n_paths == b.n_paths == 10

    def test_strong_rate_time_holder_ou(self):
        # The coupling error here is driven by sigma(s)-sigma(tau_s), whose
        # square integrates to O(h^2 log N) for the t^(1/2) coefficient, so
        # the observed strong rate is ~N^-1 rather than the generic N^-gamma
        # worst case.
        spec = get_spec("holder-ou", gamma=0.5)
        fine = build_uniform(1.0, 1024)
        ns = [8, 16, 32, 64, 128]
        errs = []
        for n_steps in ns:
            coarse = build_uniform(1.0, n_steps)
            bc, bf = simulate_coupled(spec, coarse, fine, [1.0], 4000, seed=21)
            errs.append(strong_error_estimate(bc, bf, 1.0, 2.0).value)
        assert all(a > b for a, b in zip(errs, errs[1:]))
        slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
        assert -1.2 <= slope <= -0.85


class TestStrongError:
    def test_hand_built_distance(self):
        a = make_batch([[[0.0, 0.0]]])
        b = make_batch([[[3.0, 4.0]]])
        est = strong_error_estimate(a, b, 1.0, 2.0)
        assert est.value == pytest.approx(5.0, rel=1e-15)
        assert est.stderr == 0.0

    def test_identical_batches(self):
        a = make_batch(np.random.default_rng(0).normal(size=(1, 20, 3)))
        est = strong_error_estimate(a, a, 1.0, 2.0)
        assert est.value == 0.0 and est.stderr == 0.0

    def test_rho_one_is_mean_norm(self):
        rng = np.random.default_rng(1)
        xa, xb = rng.normal(size=(2, 1, 50, 2))
        est = strong_error_estimate(make_batch(xa), make_batch(xb), 1.0, 1.0)
        norms = np.linalg.norm(xa[0] - xb[0], axis=1)
        assert est.value == pytest.approx(norms.mean(), rel=1e-12)
        # for rho=1 the jackknife collapses to the classical se of the mean
        assert est.stderr == pytest.approx(norms.std(ddof=1) / np.sqrt(50), rel=1e-10)

    def test_rho_two_is_rms(self):
        rng = np.random.default_rng(2)
        xa, xb = rng.normal(size=(2, 1, 64, 3))
        est = strong_error_estimate(make_batch(xa), make_batch(xb), 1.0, 2.0)
        norms = np.linalg.norm(xa[0] - xb[0], axis=1)
        assert est.value == pytest.approx(np.sqrt((norms**2).mean()), rel=1e-12)
        assert 0.0 < est.stderr < est.value

    def test_tiny_scales_do_not_underflow(self):
        xa = np.zeros((1, 8, 2))
        xb = np.zeros((1, 8, 2))
        xb[0, :4, 0] = 1e-160
        est = strong_error_estimate(make_batch(xa), make_batch(xb), 1.0, 8.0)
        assert est.value == pytest.approx(1e-160 * 0.5**0.125, rel=1e-12)

    def test_float_conversion(self):
        a = make_batch([[[0.0]]])
        b = make_batch([[[2.0]]])
        assert float(strong_error_estimate(a, b, 1.0, 2.0)) == pytest.approx(2.0)

    def test_validation(self):
        a = make_batch([[[0.0, 0.0]]])
        b = make_batch([[[3.0, 4.0]]])
        with pytest.raises(ValueError):
            strong_error_estimate(a, b, 1.0, 0.5)
        with pytest.raises(KeyError):
            strong_error_estimate(a, b, 0.25, 2.0)
        c = make_batch(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            strong_error_estimate(a, c, 1.0, 2.0)


class TestFirstVariation:
    def test_flat_spec_gives_identity(self):
        spec = get_spec("brownian")
        batch = simulate_first_variation(
            spec, build_uniform(1.0, 8), [0.0, 0.5, 1.0], 5, seed=1
        )
        for t in [0.0, 0.5, 1.0]:
            assert np.array_equal(
                batch.matrices_at(t), np.broadcast_to(np.eye(1), (5, 1, 1))
            )

    @pytest.mark.parametrize("n_steps", [16, 64])
    def test_linear_drift_product_formula(self, n_steps):
        spec = get_spec("const-ou")
        grid = build_uniform(1.0, n_steps)
        batch = simulate_first_variation(spec, grid, [1.0], 3, seed=0)
        h = 1.0 / n_steps
        target = (1.0 - h) ** n_steps * np.eye(2)
        assert np.allclose(batch.matrices_at(1.0), target, rtol=1e-13, atol=0)

    def test_affine_variation_is_deterministic(self):
        spec = get_spec("const-ou")
        batch = simulate_first_variation(spec, build_uniform(1.0, 8), [1.0], 4, seed=7)
        mats = batch.matrices_at(1.0)
        assert np.ptp(mats, axis=0).max() == 0.0

    def test_finite_difference_fallback_matches_analytic(self):
        spec = get_spec("tanh-2d")
        stripped = dataclasses.replace(
            spec, drift_jacobian=None, diffusion_jacobian=None
        )
        grid = build_uniform(1.0, 16)
        times = [0.25, 0.5, 1.0]
        exact = simulate_first_variation(spec, grid, times, 50, seed=5)
        approx = simulate_first_variation(stripped, grid, times, 50, seed=5)
        for t in times:
            assert np.abs(exact.matrices_at(t) - approx.matrices_at(t)).max() <= 1e-8

    def test_coupled_variation_gap_shrinks(self):
        spec = get_spec("tanh-2d")
        fine = build_uniform(1.0, 512)
        ns = [8, 32, 128]
        gaps = []
        for n_steps in ns:
            coarse = build_uniform(1.0, n_steps)
            vc, vf = simulate_first_variation_coupled(
                spec, coarse, fine, [1.0], 2000, seed=33
            )
            diff = vc.matrices_at(1.0) - vf.matrices_at(1.0)
            gaps.append(float(np.linalg.norm(diff, axis=(1, 2)).mean()))
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        slope = np.polyfit(np.log(ns), np.log(gaps), 1)[0]
        assert -0.95 <= slope <= -0.40

    def test_batch_requires_identity_at_zero(self):
        mats = np.full((1, 2, 2, 2), 0.5)
        with pytest.raises(ValueError):
            FirstVariationBatch(
                checkpoint_times=np.array([0.0]),
                matrices=mats,
                spec_name="custom",
                grid=build_uniform(1.0, 1),
                seed=0,
            )

    def test_missing_checkpoint(self):
        spec = get_spec("brownian")
        batch = simulate_first_variation(spec, build_uniform(1.0, 4), [1.0], 2, seed=0)
        with pytest.raises(KeyError):
            batch.matrices_at(0.5)


class TestMomentIncrements:
    # E|X_t - X_s|^q / (t-s)^(q/2) stays bounded over refinement for the
    # bounded-coefficient specs; bands frozen from a reference run.
    BANDS = {
        ("brownian", 2): 2.0,
        ("brownian", 4): 6.0,
        ("tanh-2d", 2): 8.0,
        ("tanh-2d", 4): 80.0,
    }

    @pytest.mark.parametrize("name", ["brownian", "tanh-2d"])
    @pytest.mark.parametrize("q", [2, 4])
    def test_ratio_bounded(self, name, q):
        spec = get_spec(name)
        base = np.linspace(0.0, spec.horizon, 9)
        cks = np.union1d(base, 0.5 * (base[:-1] + base[1:]))
        for n_steps in (8, 64, 256):
            grid = build_uniform(spec.horizon, n_steps)
            batch = simulate_euler(spec, grid, cks, 3000, seed=11)
            times = batch.checkpoint_times
            worst = 0.0
            for i in range(times.size):
                for j in range(i + 1, times.size):
                    gap = times[j] - times[i]
                    d = batch.states[j] - batch.states[i]
                    mom = float((np.linalg.norm(d, axis=1) ** q).mean())
                    worst = max(worst, mom / gap ** (q / 2))
            assert worst <= self.BANDS[(name, q)]


class TestBatchValidation:
    def test_non_finite_states_rejected(self):
        states = np.zeros((1, 2, 2))
        states[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            make_batch(states)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            make_batch(np.zeros((2, 3)))

    def test_checkpoint_beyond_horizon_rejected(self):
        with pytest.raises(ValueError):
            make_batch(np.zeros((1, 2, 2)), times=(1.5,))
