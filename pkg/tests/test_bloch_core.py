"""Tests for the Bloch-equation integrator and closed-form pulse transfer."""

import math

import numpy as np
import pytest

from app.core.exceptions import InvalidArgumentError
from app.physics.bloch_core import (
    BlochState,
    DriveParams,
    PopulationTrace,
    PulseSegment,
    RelaxationParams,
    bloch_generator,
    echo_sequence,
    evolve_segment,
    lineshape_first_zero,
    lineshape_scan,
    pi_half_time,
    rabi_sequence,
    rabi_transfer,
    ramsey_sequence,
    rk4_step_matrix,
    rotation_matrix,
    run_sequence,
)

TWO_PI = 2.0 * math.pi
OMEGA = TWO_PI * 995.0
NO_RELAX = RelaxationParams.disabled()


class TestRectangularPulses:
    def test_pi_pulse_inverts_the_qubit(self):
        out = evolve_segment(BlochState.upper(), PulseSegment.pulse(math.pi, OMEGA), NO_RELAX)
        assert out.p0 == pytest.approx(1.0, abs=1e-8)

    def test_pi_pulse_duration(self):
        assert PulseSegment.pulse(math.pi, OMEGA).duration == pytest.approx(502.5e-6, rel=1e-3)
        assert pi_half_time(OMEGA) == pytest.approx(251.26e-6, rel=1e-3)

    def test_first_rabi_minimum_of_upper_state(self):
        times = np.linspace(0.0, 1e-3, 2001)
        trace = run_sequence(BlochState.upper(), rabi_sequence(OMEGA, 1e-3), NO_RELAX, times)
        assert times[int(np.argmax(trace.p0))] == pytest.approx(502.5e-6, abs=1e-6)

    def test_detuned_pi_pulse(self):
        segment = PulseSegment.pulse(math.pi, OMEGA, detuning=OMEGA)
        out = evolve_segment(BlochState.upper(), segment, NO_RELAX)
        assert out.p0 == pytest.approx(0.3165, abs=1e-4)
        assert rabi_transfer(math.pi / OMEGA, OMEGA, OMEGA) == pytest.approx(0.3165, abs=1e-4)

    def test_two_pi_pulses_are_identity(self):
        np.testing.assert_allclose(rotation_matrix(math.pi) @ rotation_matrix(math.pi), np.eye(4), atol=1e-12)
        pi = PulseSegment.pulse(math.pi, OMEGA)
        out = evolve_segment(evolve_segment(BlochState.upper(), pi, NO_RELAX), pi, NO_RELAX)
        np.testing.assert_allclose(out.as_array(), [0.0, 0.0, 1.0], atol=1e-7)

    def test_integrator_matches_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            omega = TWO_PI * rng.uniform(100.0, 2000.0)
            delta = TWO_PI * rng.uniform(-2000.0, 2000.0)
            t = rng.uniform(0.0, 2e-3)
            out = evolve_segment(BlochState.upper(), PulseSegment(t, DriveParams(omega, delta)), NO_RELAX)
            assert out.p0 == pytest.approx(rabi_transfer(t, omega, delta), abs=1e-6)


class TestRamseyAndEcho:
    @pytest.mark.parametrize("free_time", [0.0, 1e-4, 1e-3, 2.3e-3])
    def test_ideal_ramsey_fringe(self, free_time):
        delta = TWO_PI * 1000.0
        sequence = ramsey_sequence(OMEGA, free_time, detuning=delta, ideal=True)
        trace = run_sequence(BlochState.upper(), sequence, NO_RELAX, [free_time])
        assert trace.p0[0] == pytest.approx((1.0 + math.cos(delta * free_time)) / 2.0, abs=1e-8)

    def test_ideal_echo_refocuses_any_detuning(self):
        for delta in TWO_PI * np.array([-3000.0, 150.0, 4800.0]):
            sequence = echo_sequence(OMEGA, 1e-3, 2e-3, detuning=delta, ideal=True)
            trace = run_sequence(BlochState.upper(), sequence, NO_RELAX, [2e-3])
            # the echo fringe is inverted with respect to the Ramsey fringe
            assert trace.p0[0] == pytest.approx(0.0, abs=1e-8)

    def test_echo_needs_free_time_after_pi_pulse(self):
        with pytest.raises(InvalidArgumentError):
            echo_sequence(OMEGA, 2e-3, 1e-3)


class TestLineshape:
    def test_symmetric_about_resonance(self):
        detunings = np.linspace(-TWO_PI * 5e3, TWO_PI * 5e3, 201)
        trace = lineshape_scan(math.pi / OMEGA, OMEGA, detunings)
        np.testing.assert_allclose(trace.p0, trace.p0[::-1], atol=1e-12)
        assert trace.p0[100] == pytest.approx(1.0)

    def test_first_zero(self):
        zero = lineshape_first_zero(math.pi / OMEGA, OMEGA)
        assert zero == pytest.approx(math.sqrt(3.0) * OMEGA)
        assert rabi_transfer(math.pi / OMEGA, OMEGA, zero) == pytest.approx(0.0, abs=1e-12)

    def test_first_zero_needs_sub_2pi_area(self):
        with pytest.raises(InvalidArgumentError):
            lineshape_first_zero(3.0 * math.pi / OMEGA, OMEGA)


class TestIntegratorProperties:
    def test_norm_conserved_without_relaxation(self):
        drive = DriveParams(TWO_PI * 1000.0, TWO_PI * 500.0)
        out = evolve_segment(BlochState.upper(), PulseSegment(1e-2, drive), NO_RELAX, step_control=1e-6)
        assert out.norm == pytest.approx(1.0, abs=1e-9)

    def test_relaxation_contracts_the_bloch_vector(self):
        relax = RelaxationParams(t1=1e-3, t2=0.5e-3)
        drive = DriveParams(OMEGA, TWO_PI * 300.0)
        state = BlochState.upper()
        norms = [state.norm]
        for _ in range(20):
            state = evolve_segment(state, PulseSegment(1e-4, drive), relax)
            norms.append(state.norm)
        assert np.all(np.diff(norms) <= 1e-12)
        assert norms[-1] < 0.5

    def test_relaxes_to_equilibrium_inversion(self):
        relax = RelaxationParams(t1=1e-4, t2=1e-4, w_eq=-0.2)
        out = evolve_segment(BlochState.upper(), PulseSegment.gap(5e-3), relax)
        assert out.w == pytest.approx(-0.2, abs=1e-9)

    def test_segments_compose(self):
        drive = DriveParams(OMEGA, TWO_PI * 700.0, phase=0.3)
        start = BlochState(0.2, -0.1, 0.6)
        split = evolve_segment(evolve_segment(start, PulseSegment(3e-4, drive), NO_RELAX),
                               PulseSegment(4.5e-4, drive), NO_RELAX)
        whole = evolve_segment(start, PulseSegment(7.5e-4, drive), NO_RELAX)
        np.testing.assert_allclose(split.as_array(), whole.as_array(), atol=1e-8)

    def test_rk4_is_fourth_order(self):
        generator = bloch_generator(OMEGA, 0.0, 0.0, NO_RELAX)
        duration = 1e-3
        exact = rotation_matrix(OMEGA * duration)

        def error(n_steps):
            step = rk4_step_matrix(generator, duration / n_steps)
            return np.max(np.abs(np.linalg.matrix_power(step, n_steps) - exact))

        assert error(50) / error(100) >= 8.0

    def test_generator_broadcasts_over_detunings(self):
        gen = bloch_generator(OMEGA, np.array([0.0, 1.0, 2.0]), 0.0, NO_RELAX)
        assert gen.shape == (3, 4, 4)
        assert gen[2, 1, 0] == 2.0


class TestValidation:
    def test_overlong_bloch_vector(self):
        with pytest.raises(InvalidArgumentError):
            BlochState(1.0, 1.0, 1.0)

    @pytest.mark.parametrize("kwargs", [{"t1": 0.0}, {"t2": -1.0}, {"t1": math.nan}, {"w_eq": 1.5}])
    def test_relaxation_params(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            RelaxationParams(**kwargs)

    def test_negative_durations_and_rates(self):
        with pytest.raises(InvalidArgumentError):
            PulseSegment(-1e-6)
        with pytest.raises(InvalidArgumentError):
            DriveParams(rabi_frequency=-1.0)
        with pytest.raises(InvalidArgumentError):
            DriveParams(detuning=math.inf)

    def test_sample_times_outside_sequence(self):
        with pytest.raises(InvalidArgumentError):
            run_sequence(BlochState.upper(), rabi_sequence(OMEGA, 1e-3), NO_RELAX, [0.0, 2e-3])

    def test_unsorted_sample_times(self):
        with pytest.raises(InvalidArgumentError):
            run_sequence(BlochState.upper(), rabi_sequence(OMEGA, 1e-3), NO_RELAX, [5e-4, 1e-4])

    def test_repeated_sample_times_repeat_the_sample(self):
        times = [0.0, 2.5e-4, 2.5e-4, 1e-3]
        trace = run_sequence(BlochState.upper(), rabi_sequence(OMEGA, 1e-3), NO_RELAX, times)
        assert len(trace) == 4
        assert trace.p0[1] == trace.p0[2]
        assert trace.p0[1] == pytest.approx(float(rabi_transfer(2.5e-4, OMEGA, 0.0)), abs=1e-6)

    def test_empty_sequence(self):
        with pytest.raises(InvalidArgumentError):
            run_sequence(BlochState.upper(), [], NO_RELAX, [0.0])

    def test_trace_rejects_unphysical_population(self):
        with pytest.raises(InvalidArgumentError):
            PopulationTrace([0.0, 1.0], [0.5, 1.2])


class TestRelaxationComposition:
    def test_from_components(self):
        relax = RelaxationParams.from_components(t1=0.1, t2_homogeneous=10e-3, t2_star=4e-3)
        assert relax.t2 == pytest.approx(1.0 / (100.0 + 250.0))
        assert relax.t2_homogeneous == 10e-3

    def test_scattering_limited_transverse_channel(self):
        relax = RelaxationParams.scattering_limited(68e-3)
        assert relax.t2 == pytest.approx(136e-3)

    def test_all_infinite_disables(self):
        relax = RelaxationParams.from_components()
        assert not relax.enabled
        assert relax.gamma1 == 0.0 and relax.gamma2 == 0.0
