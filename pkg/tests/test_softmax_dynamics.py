import time

import numpy as np
import pytest
from pydantic import ValidationError

from minidarts.errors import ConventionNotFoundError, DivergenceError, DomainError
from minidarts.softmax_dynamics import (FROZEN_CONVENTION, REFERENCE_TARGETS, DynamicsConfig,
                                        abs_jacobian_row, abs_jacobian_row_slopes, convention_sweep,
                                        input_gradient, jacobian_magnitude_profile, lr_sweep,
                                        restoration_epoch, restoration_for, run_two_phase)


class TestRestoration:
    def test_reference_learning_rates(self):
        start = time.perf_counter()
        assert restoration_for(DynamicsConfig(lr=0.001)) == 34
        assert restoration_for(DynamicsConfig(lr=0.01)) == 44
        assert time.perf_counter() - start < 1.0

    def test_lr_sweep(self):
        assert lr_sweep([lr for lr, _ in REFERENCE_TARGETS]) == list(REFERENCE_TARGETS)

    def test_restoration_grows_with_lr(self):
        sweep = lr_sweep([0.001, 0.002, 0.005, 0.01])
        steps = [t2 for _, t2 in sweep]
        assert steps == sorted(steps)
        assert steps == [34, 34, 37, 44]

    def test_zero_gradient_never_moves(self):
        config = DynamicsConfig(dl_dy_phase1=(0.0, 0.0), restoration_rule="l_inf_zero", max_steps=10)
        traj = run_two_phase(config)
        np.testing.assert_array_equal(traj.x, np.tile(config.x0, (config.t1 + 11, 1)))
        assert restoration_epoch(traj, "l_inf_zero") == 0

    def test_sum_of_inputs_is_conserved(self):
        traj = run_two_phase(DynamicsConfig(lr=0.01, max_steps=100))
        np.testing.assert_allclose(traj.x.sum(axis=1), 0.002, rtol=0, atol=1e-12)

    def test_phase_one_raises_first_entry(self):
        traj = run_two_phase(DynamicsConfig())
        assert traj.x[traj.t1, 0] > 0.001 > traj.x[traj.t1, 1]
        np.testing.assert_allclose(traj.y.sum(axis=1), 1.0)

    def test_deterministic(self):
        a, b = run_two_phase(DynamicsConfig(lr=0.01)), run_two_phase(DynamicsConfig(lr=0.01))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.velocity, b.velocity)

    def test_budget_exhausted(self):
        with pytest.raises(DomainError):
            restoration_for(DynamicsConfig(max_steps=10))

    def test_unknown_rule(self):
        with pytest.raises(DomainError):
            restoration_epoch(run_two_phase(DynamicsConfig(max_steps=1)), "median")

    def test_divergence(self):
        with pytest.raises(DivergenceError) as info:
            run_two_phase(DynamicsConfig(lr=1e308))
        assert info.value.step is not None


class TestConventionSweep:
    def test_frozen_convention(self):
        report = convention_sweep()
        assert report.frozen == FROZEN_CONVENTION
        assert FROZEN_CONVENTION in report.matches
        assert report.results[FROZEN_CONVENTION] == [34, 44]
        for (sign, rule, variant), row in report.results.items():
            if rule == "l_inf_zero":
                assert row == [None, None]

    def test_report_is_stable(self):
        assert convention_sweep().to_json() == convention_sweep().to_json()

    def test_unreachable_targets(self):
        with pytest.raises(ConventionNotFoundError) as info:
            convention_sweep(targets=((0.01, 45),))
        assert info.value.nearest[FROZEN_CONVENTION] == [44]


class TestConfig:
    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            DynamicsConfig(x0=(0.0, 0.0, 0.0))
        with pytest.raises(ValidationError):
            DynamicsConfig(x0=(0.0,), dl_dy_phase1=(1.0,))

    def test_momentum_below_one(self):
        with pytest.raises(ValidationError):
            DynamicsConfig(momentum=1.0)

    def test_explicit_phase_two(self):
        config = DynamicsConfig(x0=(0.0, 0.0, 0.0), dl_dy_phase1=(1.0, 0.0, -1.0), dl_dy_phase2=(0.0, 1.0, -1.0))
        assert config.phase2_gradient == (0.0, 1.0, -1.0)
        assert run_two_phase(config.model_copy(update={"max_steps": 5})).x.shape == (31, 3)


class TestJacobianMagnitude:
    def test_input_gradient(self):
        np.testing.assert_allclose(input_gradient(np.array([0.5, 0.5]), np.array([1.0, -1.0])), [0.5, -0.5])

    def test_profile_values(self):
        profile = jacobian_magnitude_profile()
        assert profile.shape == (99, 2)
        assert profile[49, 0] == pytest.approx(0.5)
        assert profile[49, 1] == pytest.approx(0.5)
        assert profile[9, 1] == pytest.approx(0.18)

    def test_profile_peaks_at_half(self):
        norms = jacobian_magnitude_profile()[:, 1]
        assert np.all(np.diff(norms[:50]) > 0)
        assert np.all(np.diff(norms[49:]) < 0)

    def test_row(self):
        np.testing.assert_allclose(abs_jacobian_row(np.array([0.2, 0.3, 0.5]), 1), [0.06, 0.21, 0.15])

    def test_slopes_match_finite_differences(self, rng):
        eps = 1e-6
        for _ in range(100):
            p = rng.uniform(0.05, 0.95)
            y = np.array([p, 1.0 - p])
            step = np.array([eps, -eps])
            numeric = (abs_jacobian_row(y + step, 0) - abs_jacobian_row(y - step, 0)) / (2 * eps)
            np.testing.assert_allclose(abs_jacobian_row_slopes(y, 0), numeric, atol=1e-8)
