"""Tests for the thermal Ramsey model and the Monte-Carlo oracle."""

import math

import numpy as np
import pytest
from scipy.constants import k as K_B

from app.core.config import settings
from app.core.exceptions import InvalidArgumentError, OutOfModelError, UnboundEnsembleError
from app.physics.bloch_core import RelaxationParams
from app.physics.dephasing_ensemble import (
    PulseSpec,
    RamseyParams,
    ThermalEnsemble,
    atom_detuning,
    echo_analytic,
    echo_visibility,
    echo_visibility_scan,
    envelope_alpha,
    gate_budget,
    mc_echo,
    mc_modulation,
    mc_ramsey,
    mean_detuning,
    phase_kappa,
    predicted_ramsey_params,
    ramsey_analytic,
    sample_atom_energies,
    t2star_from_temperature,
    temperature_from_t2star,
)
from app.physics.trap_model import differential_light_shift
from app.services.fit_engine import ModelKind, ModelSpec, fit_engine

TWO_PI = 2.0 * math.pi
T2_STAR = 4.08e-3
DELTA_RL = TWO_PI * 357.0
IDEAL = PulseSpec(ideal=True)


@pytest.fixture
def ensemble(trap_1mk, constants):
    temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
    return ThermalEnsemble(4000, temperature, trap_1mk)


class TestAnalyticModel:
    def test_envelope(self):
        assert envelope_alpha(0.0, T2_STAR) == 1.0
        assert 0.365 <= envelope_alpha(T2_STAR, T2_STAR) <= 0.370
        # (1 + 0.95 * 4) ** -1.5
        assert envelope_alpha(2 * T2_STAR, T2_STAR) == pytest.approx(0.0951, abs=1e-4)

    def test_phase_lag(self):
        assert phase_kappa(0.0, T2_STAR) == 0.0
        assert phase_kappa(T2_STAR, T2_STAR) == pytest.approx(-2.310, abs=1e-3)

    def test_infinite_t2_star_is_undamped(self):
        params = RamseyParams(amplitude=0.25, offset=0.25, delta=TWO_PI * 100, t2_star=math.inf)
        t = np.linspace(0, 0.02, 50)
        np.testing.assert_allclose(ramsey_analytic(t, params), 0.25 * np.cos(TWO_PI * 100 * t) + 0.25)

    def test_echo_form_is_inverted_and_shifted(self):
        params = RamseyParams(amplitude=0.25, offset=0.25, delta=TWO_PI * 500, t2_star=T2_STAR)
        t1 = 5e-3
        assert echo_analytic(2 * t1, t1, params) == pytest.approx(0.0)
        assert echo_analytic(1e-3, t1, params) == pytest.approx(ramsey_analytic(1e-3, params))

    def test_ramsey_params_stay_in_unit_interval(self):
        with pytest.raises(InvalidArgumentError):
            RamseyParams(amplitude=0.6, offset=0.5, delta=0.0)


class TestTemperatureRelation:
    def test_temperature_from_t2star(self, trap_1mk, constants):
        assert temperature_from_t2star(4.08e-3, trap_1mk, constants) == pytest.approx(15.6e-6, abs=0.1e-6)
        assert temperature_from_t2star(1.59e-3, trap_1mk, constants) == pytest.approx(40.03e-6, abs=0.1e-6)

    def test_round_trip(self, trap_1mk, constants):
        temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
        assert t2star_from_temperature(temperature, trap_1mk, constants) == pytest.approx(T2_STAR, rel=1e-12)

    def test_rejects_non_positive(self, trap_1mk, constants):
        with pytest.raises(InvalidArgumentError):
            temperature_from_t2star(0.0, trap_1mk, constants)


class TestEnergySampling:
    def test_mean_energy_is_three_kt(self, trap_1mk):
        ensemble = ThermalEnsemble(20000, 20e-6, trap_1mk)
        energies = sample_atom_energies(ensemble, seed=11)
        assert energies.mean() == pytest.approx(3.0 * K_B * 20e-6, rel=0.02)
        assert np.all(energies >= 0)

    def test_deterministic_per_seed(self, trap_1mk):
        ensemble = ThermalEnsemble(3000, 20e-6, trap_1mk)
        np.testing.assert_array_equal(sample_atom_energies(ensemble, 5), sample_atom_energies(ensemble, 5))
        assert not np.array_equal(sample_atom_energies(ensemble, 5), sample_atom_energies(ensemble, 6))

    def test_first_block_independent_of_ensemble_size(self, trap_1mk):
        small = sample_atom_energies(ThermalEnsemble(1500, 20e-6, trap_1mk), 5)
        large = sample_atom_energies(ThermalEnsemble(5000, 20e-6, trap_1mk), 5)
        np.testing.assert_array_equal(small[:1024], large[:1024])

    def test_unbound_ensemble(self, trap_1mk):
        with pytest.raises(UnboundEnsembleError):
            ThermalEnsemble(10, 1.5e-3, trap_1mk)


class TestDetunings:
    def test_atom_at_rest_sees_full_light_shift(self, trap_1mk, constants):
        assert atom_detuning(0.0, trap_1mk, 0.0, constants) == pytest.approx(
            differential_light_shift(trap_1mk, constants))

    def test_mean_detuning_matches_samples(self, trap_1mk, constants):
        ensemble = ThermalEnsemble(20000, 20e-6, trap_1mk)
        energies = sample_atom_energies(ensemble, 3)
        sampled = np.mean(atom_detuning(energies, trap_1mk, 100.0, constants))
        expected = mean_detuning(ensemble, 100.0, constants)
        assert sampled == pytest.approx(expected, rel=1e-3)

    def test_energy_above_depth_is_out_of_model(self, trap_1mk, constants):
        with pytest.raises(OutOfModelError):
            atom_detuning(trap_1mk.depth_j * 1.01, trap_1mk, 0.0, constants)

    def test_predicted_bottom_detuning(self, ensemble, model, field):
        params = predicted_ramsey_params(ensemble, DELTA_RL, model, field)
        assert params.delta / TWO_PI == pytest.approx(4814.0, abs=2.0)
        assert params.amplitude == params.offset == pytest.approx(0.255)
        assert params.t2_star == pytest.approx(T2_STAR)


class TestMonteCarlo:
    def test_ramsey_matches_analytic_model(self, ensemble, model, field):
        times = np.linspace(0.0, 8e-3, 17)
        trace = mc_ramsey(ensemble, DELTA_RL, IDEAL, times, seed=1, model=model, field=field)
        expected = ramsey_analytic(times, predicted_ramsey_params(ensemble, DELTA_RL, model, field))
        assert np.max(np.abs(trace.p0 - expected)) < 0.03
        assert trace.p0[0] == pytest.approx(0.51)

    def test_deterministic_across_worker_counts(self, ensemble, monkeypatch):
        times = np.linspace(0.0, 4e-3, 9)
        serial = mc_ramsey(ensemble, DELTA_RL, IDEAL, times, seed=9).p0
        monkeypatch.setattr(settings, "N_JOBS", 3)
        threaded = mc_ramsey(ensemble, DELTA_RL, IDEAL, times, seed=9).p0
        np.testing.assert_array_equal(serial, threaded)

    @pytest.mark.parametrize("t1", [2.5e-3, 7.5e-3, 15e-3])
    def test_echo_refocuses_without_relaxation(self, ensemble, t1):
        scan = echo_visibility_scan(ensemble, [t1], DELTA_RL, seed=2, pulse=IDEAL)
        assert abs(scan.visibility[0] - 1.0) <= 3.0 * scan.stderr[0] + 1e-7

    def test_echo_beats_ramsey_at_15ms(self, trap_1mk, constants):
        temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
        ensemble = ThermalEnsemble(2000, temperature, trap_1mk)
        echo = mc_modulation(ensemble, 15e-3, DELTA_RL, seed=4, t1=7.5e-3, pulse=IDEAL)
        ramsey = mc_modulation(ensemble, 15e-3, DELTA_RL, seed=4, pulse=IDEAL)
        assert echo.amplitude >= 2.0 * ramsey.amplitude

    def test_echo_trace_bottoms_out_at_refocus(self, ensemble):
        t1 = 2e-3
        trace = mc_echo(ensemble, t1, DELTA_RL, None, [0.0, 1e-3, 2 * t1], seed=3, pulse=IDEAL)
        assert trace.p0[-1] == pytest.approx(0.0, abs=1e-6)

    def test_modulation_needs_t1_inside_free_time(self, ensemble):
        with pytest.raises(InvalidArgumentError):
            mc_modulation(ensemble, 1e-3, DELTA_RL, t1=2e-3)

    def test_times_must_increase(self, ensemble):
        with pytest.raises(InvalidArgumentError):
            mc_ramsey(ensemble, DELTA_RL, IDEAL, [1e-3, 0.5e-3])

    @pytest.mark.slow
    def test_large_ensemble_reproduces_thermal_fringe(self, trap_1mk, constants, model, field):
        temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
        ensemble = ThermalEnsemble(100_000, temperature, trap_1mk)
        times = np.linspace(0.0, 12e-3, 120)
        trace = mc_ramsey(ensemble, DELTA_RL, IDEAL, times, seed=2007, model=model, field=field)
        expected = ramsey_analytic(times, predicted_ramsey_params(ensemble, DELTA_RL, model, field))
        assert np.max(np.abs(trace.p0 - expected)) < 0.01
        fit = fit_engine.fit_curve(ModelSpec(ModelKind.RAMSEY_EQ4), times, trace.p0)
        assert fit.params["t2_star"] == pytest.approx(T2_STAR, rel=0.05)

    @pytest.mark.slow
    def test_visibility_decay_recovers_scattering_time(self, trap_1mk, constants):
        temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
        ensemble = ThermalEnsemble(1000, temperature, trap_1mk)
        relax = RelaxationParams.scattering_limited(68e-3)
        t1_values = np.arange(13) * 5e-3
        scan = echo_visibility_scan(ensemble, t1_values, DELTA_RL, relax=relax, seed=5, pulse=IDEAL)
        fit = fit_engine.fit_curve(ModelSpec(ModelKind.EXP_DECAY), scan.t1, scan.visibility)
        assert 61e-3 <= fit.params["tau"] <= 75e-3

    @pytest.mark.slow
    def test_finite_pulse_echo_follows_exponential_visibility(self, trap_1mk, constants):
        temperature = temperature_from_t2star(T2_STAR, trap_1mk, constants)
        ensemble = ThermalEnsemble(1000, temperature, trap_1mk)
        relax = RelaxationParams.scattering_limited(68e-3)
        t1_values = np.array([0.0, 10e-3, 30e-3, 60e-3])
        scan = echo_visibility_scan(ensemble, t1_values, DELTA_RL, relax=relax, seed=6)
        # finite pulses lose the same contrast at every t1
        relative = scan.visibility / scan.visibility[0]
        expected = [echo_visibility(t1, 68e-3) for t1 in t1_values]
        np.testing.assert_allclose(relative, expected, atol=0.04)


class TestVisibilityHelpers:
    def test_echo_visibility(self):
        assert echo_visibility(68e-3, 68e-3) == pytest.approx(math.exp(-1.0))
        assert echo_visibility(68e-3, 68e-3, decay_in_total_time=True) == pytest.approx(math.exp(-2.0))
        assert echo_visibility(0.0, 1e-3) == 1.0

    def test_gate_budget(self):
        assert gate_budget(250e-6, 68e-3) == pytest.approx(272.0)

    def test_gate_budget_needs_positive_times(self):
        with pytest.raises(InvalidArgumentError):
            gate_budget(0.0, 68e-3)
