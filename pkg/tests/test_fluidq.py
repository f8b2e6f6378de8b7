import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from windstore.ctmc import CtmcModel
from windstore.errors import (
    ConfigError,
    DataError,
    DegenerateBufferError,
    SolverError,
    UnrecoverableInstabilityError,
)
from windstore.fluidq import (
    FluidQueueSpec,
    StorageParams,
    apply_drift_floor,
    build_drift,
    monte_carlo_psi,
    solve_with_fallback,
    spectral_solve,
)
from windstore.synthetic import random_irreducible_model

from conftest import make_model
from oracles import bvp_psi, psi_within_3se


def make_spec(values, generator, drift, buffer=1.0, r_inf=0.0):
    model = make_model(values, generator)
    return FluidQueueSpec(
        drift=np.asarray(drift, float),
        buffer=buffer,
        generator=model.generator,
        pi=model.stationary,
        r_inf=r_inf,
    )


class TestBuildDrift:
    def test_charging_state(self, two_state):
        storage = StorageParams(rho_c=0.95, rho_d=1.0, b=2.0)
        model = make_model([0.5, 0.8], [[-1.0, 1.0], [1.0, -1.0]])
        spec = build_drift(model, 0.5, storage)
        assert spec.drift[1] == pytest.approx(0.1425)

    def test_discharging_state(self):
        storage = StorageParams(rho_c=1.0, rho_d=0.95, b=2.0)
        model = make_model([0.2, 0.7], [[-1.0, 1.0], [1.0, -1.0]])
        spec = build_drift(model, 0.5, storage)
        assert spec.drift[0] == pytest.approx(-0.3 / (0.95 * 2.0))

    def test_balanced_state_keeps_only_leakage(self):
        storage = StorageParams(eta=0.01, b=1.0)
        model = make_model([0.5, 0.9], [[-1.0, 1.0], [1.0, -1.0]])
        spec = build_drift(model, 0.5, storage)
        assert spec.drift[0] == pytest.approx(-0.01)

    def test_normalized_level_domain(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=4.0))
        assert spec.buffer == 1.0
        assert spec.b_hours == 4.0

    def test_zero_buffer_is_degenerate(self, two_state):
        with pytest.raises(DegenerateBufferError):
            build_drift(two_state, 0.5, StorageParams(b=0.0))

    def test_q_outside_unit_interval(self, two_state):
        with pytest.raises(ConfigError):
            build_drift(two_state, 1.2, StorageParams(b=1.0))


class TestDriftFloor:
    def test_rule_application(self):
        spec = make_spec(
            [0.1, 0.5, 0.9],
            [[-1, 0.5, 0.5], [0.5, -1, 0.5], [0.5, 0.5, -1]],
            [1.0, 0.04, -0.07],
            r_inf=0.1,
        )
        out = apply_drift_floor(spec)
        np.testing.assert_allclose(out.drift, [1.0, 0.0, -0.1])

    def test_zero_floor_is_identity(self):
        spec = make_spec(
            [0.2, 0.8], [[-1, 1], [1, -1]], [0.3, -0.2], r_inf=0.0
        )
        assert apply_drift_floor(spec) is spec

    def test_no_entry_below_floor(self):
        spec = make_spec(
            [0.2, 0.8], [[-1, 1], [1, -1]], [0.5, -0.5], r_inf=0.1
        )
        np.testing.assert_array_equal(apply_drift_floor(spec).drift, [0.5, -0.5])

    @given(
        drifts=st.lists(
            st.floats(-2, 2, allow_nan=False, width=32), min_size=2, max_size=6
        ),
        r_inf=st.floats(0.01, 0.5),
    )
    def test_floor_postcondition(self, drifts, r_inf):
        d = np.asarray(drifts, float)
        if np.abs(d).max() == 0:
            return
        n = d.size
        gen = np.full((n, n), 1.0)
        np.fill_diagonal(gen, -(n - 1))
        spec = make_spec(np.linspace(0.1, 0.9, n), gen, d, r_inf=r_inf)
        out = apply_drift_floor(spec).drift
        thr = r_inf * np.abs(d).max()
        for before, after in zip(d, out):
            if abs(before) >= thr:
                assert after == before
            else:
                assert after in (0.0, np.sign(before) * thr)


class TestSpectralSolve:
    def test_all_positive_drift_saturates_full(self, two_state):
        spec = build_drift(two_state, 0.1, StorageParams(rho_c=1, rho_d=1, b=1.0))
        ld = spectral_solve(spec)
        assert ld.method == "saturated-full"
        np.testing.assert_allclose(ld.psi, two_state.stationary)
        assert np.all(ld.evaluate(0.5 * ld.buffer) == 0.0)

    def test_all_negative_drift_saturates_empty(self, two_state):
        spec = build_drift(two_state, 0.9, StorageParams(rho_c=1, rho_d=1, b=1.0))
        ld = spectral_solve(spec)
        assert ld.method == "saturated-empty"
        np.testing.assert_allclose(ld.psi, two_state.stationary)

    def test_two_state_matches_both_oracles(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(rho_c=0.9, rho_d=0.9, b=2.0))
        ld = spectral_solve(spec)
        psi_ref, _ = bvp_psi(spec.generator, spec.pi, spec.drift, spec.buffer)
        assert np.abs(ld.psi - psi_ref).max() < 1e-6

        est, se = monte_carlo_psi(spec, 10**6, seed=42)
        holding = float(np.max(-1 / np.diag(spec.generator)))
        assert psi_within_3se(ld.psi, est, se, 10**6, holding)

    def test_zero_drift_state_reconstruction(self):
        # state 1 sits exactly at the pledge: drift 0 there
        model = make_model(
            [0.2, 0.5, 0.8],
            [[-0.6, 0.4, 0.2], [0.3, -0.6, 0.3], [0.2, 0.4, -0.6]],
        )
        spec = build_drift(model, 0.5, StorageParams(rho_c=1, rho_d=1, b=1.5))
        assert spec.drift[1] == 0.0
        ld = spectral_solve(spec)
        est, se = monte_carlo_psi(spec, 10**6, seed=3)
        assert psi_within_3se(ld.psi, est, se, 10**6, float(np.max(-1 / np.diag(spec.generator))))
        # the zero-drift component also keeps its envelope
        assert 0 <= ld.psi[1] <= model.stationary[1]

    def test_all_zero_drift_is_degenerate_closed_form(self):
        model = make_model([0.3, 0.5], [[-1.0, 1.0], [1.0, -1.0]])
        spec = FluidQueueSpec(
            drift=np.zeros(2), buffer=1.0, generator=model.generator,
            pi=model.stationary,
        )
        ld = spectral_solve(spec)
        assert ld.method == "degenerate-zero-drift"
        np.testing.assert_allclose(ld.psi, model.stationary)

    def test_boundary_conditions_hold(self, two_state):
        spec = build_drift(two_state, 0.55, StorageParams(b=3.0))
        ld = spectral_solve(spec)
        F0 = ld.evaluate(0.0)
        Fb = ld.evaluate(ld.buffer)
        assert abs(F0[spec.drift > 0]).max() < 1e-8
        assert np.abs(Fb[spec.drift < 0] - spec.pi[spec.drift < 0]).max() < 1e-8

    def test_psi_formula_identity(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        ld = spectral_solve(spec)
        np.testing.assert_allclose(
            ld.psi, ld.evaluate(0.0) + spec.pi - ld.evaluate(ld.buffer), atol=1e-12
        )


class TestInvariants:
    @pytest.mark.parametrize("seed", range(6))
    def test_random_models_shape_invariants(self, seed):
        rng = np.random.default_rng(100 + seed)
        model = random_irreducible_model(rng, int(rng.integers(3, 9)))
        q = float(rng.uniform(model.state_values[0] + 0.03, model.state_values[-1] - 0.03))
        b = float(rng.choice([0.5, 2.0, 8.0]))
        spec = build_drift(model, q, StorageParams(rho_c=0.95, rho_d=0.95, b=b))
        ld = solve_with_fallback(spec)
        xs = np.linspace(0, ld.buffer, 100)
        G = ld.grid(xs)
        assert ld.residual <= 1e-8
        assert np.diff(G, axis=0).min() >= -1e-8
        assert G.min() >= -1e-8
        assert (G - model.stationary[None, :]).max() <= 1e-8
        assert ld.psi.min() >= 0
        assert (ld.psi - model.stationary).max() <= 1e-12

    def test_scale_invariance(self, two_state):
        base = build_drift(two_state, 0.5, StorageParams(b=2.0))
        psi0 = spectral_solve(base).psi
        for gamma in (0.1, 10.0):
            scaled = FluidQueueSpec(
                drift=base.drift * gamma,
                buffer=base.buffer * gamma,
                generator=base.generator,
                pi=base.pi,
            )
            psi = spectral_solve(scaled).psi
            assert np.abs(psi - psi0).max() < 1e-9

    def test_psi_nonincreasing_in_storage_size(self, ref_model):
        storages = [StorageParams(rho_c=1.0, rho_d=1.0, b=b) for b in (0.5, 1, 2, 4, 8, 16)]
        psis = []
        for stg in storages:
            spec = build_drift(ref_model, 0.4, stg)
            psis.append(solve_with_fallback(spec).psi)
        psis = np.array(psis)
        assert np.all(np.diff(psis, axis=0) <= 1e-7)
        # positive mean drift: the draining states' unavailability vanishes
        spec = build_drift(ref_model, 0.4, storages[-1])
        assert float(spec.pi @ spec.drift) > 0
        drain = spec.drift < 0
        assert psis[-1][drain].max() < 0.005
        assert psis[-1][drain].max() < psis[0][drain].max() / 50

    def test_mixed_signs_required_message(self):
        # solver precondition is handled by the saturated closed forms
        model = make_model([0.2, 0.8], [[-1, 1], [1, -1]])
        spec = build_drift(model, 0.9, StorageParams(rho_c=1, rho_d=1, b=1.0))
        assert spectral_solve(spec).method == "saturated-empty"


class TestFallback:
    def test_well_conditioned_returns_double(self, ref_model):
        spec = build_drift(ref_model, 0.45, StorageParams(b=2.0))
        ld = solve_with_fallback(spec)
        assert ld.method == "double"
        assert ld.fallback_depth == 0

    def test_tiny_drift_entry_completes_ladder(self):
        model = make_model(
            [0.2, 0.5, 0.8],
            [[-0.8, 0.6, 0.2], [0.4, -0.8, 0.4], [0.2, 0.6, -0.8]],
        )
        drift = np.array([-0.5, 1e-9 * 0.5, 0.5])
        spec = FluidQueueSpec(
            drift=drift, buffer=2.0, generator=model.generator, pi=model.stationary
        )
        ld = solve_with_fallback(spec, 1e-8)
        assert ld.residual <= 1e-8
        assert ld.method  # annotation records the stage that succeeded
        assert ld.r_inf is not None

    def test_consistent_with_direct_solve(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        direct = spectral_solve(spec, 1e-8)
        ladder = solve_with_fallback(spec, 1e-8)
        assert np.abs(direct.psi - ladder.psi).max() < 1e-8

    def test_ladder_escalates_through_mp(self, two_state, monkeypatch):
        import windstore.fluidq as fq

        calls = []
        real_mp = fq._solve_eigen_mp

        def fail_double(spec, tol):
            calls.append("double")
            raise SolverError("forced failure", residual=1.0)

        def spy_mp(spec, tol, bits):
            calls.append(f"mp{bits}")
            return real_mp(spec, tol, bits)

        monkeypatch.setattr(fq, "_solve_eigen_double", fail_double)
        monkeypatch.setattr(fq, "_solve_eigen_mp", spy_mp)
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        ld = fq.solve_with_fallback(spec)
        assert calls[:2] == ["double", "mp256"]
        assert ld.method.startswith("mp256")
        assert ld.fallback_depth == 1

    def test_ladder_escalates_drift_floor(self, two_state, monkeypatch):
        import windstore.fluidq as fq

        seen = []
        real = fq.spectral_solve

        def flaky(spec, tol, mp_bits=None):
            seen.append((spec.r_inf, mp_bits))
            if spec.r_inf < 0.2:
                raise SolverError("forced", residual=1.0)
            return real(spec, tol, mp_bits=mp_bits)

        monkeypatch.setattr(fq, "spectral_solve", flaky)
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        ld = fq.solve_with_fallback(spec)
        assert ld.r_inf == pytest.approx(0.2)
        assert "rinf0.2" in ld.method
        assert ld.fallback_depth == len(seen) - 1

    def test_exhausted_ladder_raises(self, two_state, monkeypatch):
        import windstore.fluidq as fq

        def always_fail(spec, tol, mp_bits=None):
            raise SolverError("forced", residual=1.0)

        monkeypatch.setattr(fq, "spectral_solve", always_fail)
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        with pytest.raises(UnrecoverableInstabilityError):
            fq.solve_with_fallback(spec)

    def test_diagnostics_records(self, two_state):
        records = []
        spec = build_drift(two_state, 0.5, StorageParams(b=2.0))
        solve_with_fallback(spec, diagnostics=records)
        assert len(records) == 1
        assert records[0]["method"] == "double"
        assert records[0]["residual"] <= 1e-8


class TestMonteCarlo:
    def test_saturated_spec_tends_to_pi(self, two_state):
        spec = build_drift(two_state, 0.1, StorageParams(rho_c=1, rho_d=1, b=0.5))
        est, _ = monte_carlo_psi(spec, 5e4, seed=1)
        assert np.abs(est - two_state.stationary).sum() < 0.01

    def test_same_seed_identical(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=1.0))
        a = monte_carlo_psi(spec, 1e4, seed=5)
        b = monte_carlo_psi(spec, 1e4, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_different_seed_differs(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=1.0))
        a = monte_carlo_psi(spec, 1e4, seed=5)
        b = monte_carlo_psi(spec, 1e4, seed=6)
        assert not np.array_equal(a[0], b[0])

    def test_short_horizon_rejected(self, two_state):
        spec = build_drift(two_state, 0.5, StorageParams(b=1.0))
        with pytest.raises(DataError):
            monte_carlo_psi(spec, 100.0, seed=1)

    def test_single_state_closed_form(self):
        model = CtmcModel(1, np.array([0.6]), np.zeros((1, 1)), np.ones(1))
        spec = build_drift(model, 0.3, StorageParams(rho_c=1, rho_d=1, b=1.0))
        est, se = monte_carlo_psi(spec, 1e4, seed=0)
        # drift 0.3: fills the unit level in 1/0.3 h, saturated afterwards
        assert est[0] == pytest.approx(1 - (1 / 0.3) / 1e4)
        assert se[0] == 0.0
