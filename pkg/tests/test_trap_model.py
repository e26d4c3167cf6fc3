"""Tests for trap-induced shifts, scattering and the effective detuning."""

import math

import numpy as np
import pytest

from app.core.exceptions import AmbiguousDetuningError, InvalidArgumentError
from app.physics.trap_model import (
    FieldParams,
    PhysicsConstants,
    ShiftModel,
    TrapParams,
    differential_light_shift,
    effective_detuning,
    light_shift_slope_hz_per_k,
    quadratic_zeeman_shift,
    scattering_rate,
    total_resonance_shift,
    trap_from_wavelength,
)

TWO_PI = 2.0 * math.pi


class TestEffectiveDetuning:
    def test_815nm(self, constants):
        assert effective_detuning(815e-9, constants) / TWO_PI == pytest.approx(-13.04e12, rel=2e-3)

    def test_800nm(self, constants):
        assert effective_detuning(800e-9, constants) / TWO_PI == pytest.approx(-4.736e12, rel=2e-3)

    def test_between_the_lines_is_ambiguous(self, constants):
        with pytest.raises(AmbiguousDetuningError):
            effective_detuning(790e-9, constants)

    @pytest.mark.parametrize("wavelength", [600e-9, 1200e-9, math.nan])
    def test_outside_model_window(self, constants, wavelength):
        with pytest.raises(InvalidArgumentError):
            effective_detuning(wavelength, constants)

    def test_trap_from_wavelength(self, constants):
        trap = trap_from_wavelength(1e-3, 815e-9, 1.7e-6, constants)
        assert trap.delta_eff == effective_detuning(815e-9, constants)
        assert trap.depth_k == 1e-3


class TestScatteringAndShifts:
    def test_scattering_time_at_250uk(self, constants):
        trap = TrapParams(depth_k=250e-6)
        assert 1.0 / scattering_rate(trap, constants) == pytest.approx(65.63e-3, rel=1e-3)

    def test_scattering_scales_with_depth(self, constants, trap_1mk):
        assert scattering_rate(trap_1mk, constants) == pytest.approx(
            4.0 * scattering_rate(trap_1mk.with_depth(250e-6), constants))

    def test_light_shift_slope(self, constants, trap_1mk):
        assert light_shift_slope_hz_per_k(trap_1mk, constants) * 1e-6 == pytest.approx(4.851, abs=1e-3)
        assert differential_light_shift(trap_1mk, constants) / TWO_PI == pytest.approx(4851.0, rel=1e-3)

    def test_quadratic_zeeman_shift(self, model, field):
        assert quadratic_zeeman_shift(field, model) / TWO_PI == pytest.approx(320.0)
        assert quadratic_zeeman_shift(FieldParams(0.0), model) == 0.0

    def test_total_shift_is_affine_in_depth(self, model, field):
        depths = np.linspace(0.0, 1.2e-3, 7)
        shifts = np.array([total_resonance_shift(TrapParams(depth_k=d), field, model) for d in depths]) / TWO_PI
        slope, intercept = np.polyfit(depths * 1e6, shifts, 1)
        assert slope == pytest.approx(4.851, abs=1e-3)
        assert intercept == pytest.approx(320.0, abs=1e-6)
        np.testing.assert_allclose(shifts, slope * depths * 1e6 + intercept, atol=1e-9)

    def test_light_shift_sign(self, field, trap_1mk):
        flipped = ShiftModel(light_shift_sign=-1)
        assert total_resonance_shift(trap_1mk, field, flipped) / TWO_PI == pytest.approx(320.0 - 4851.0, rel=1e-3)


class TestValidation:
    def test_empty_trap_is_allowed(self, constants):
        trap = TrapParams(depth_k=0.0)
        assert scattering_rate(trap, constants) == 0.0

    @pytest.mark.parametrize("kwargs", [
        {"depth_k": -1e-6},
        {"depth_k": 1e-3, "waist_m": 0.0},
        {"depth_k": 1e-3, "delta_eff": TWO_PI * 1e12},
        {"depth_k": math.inf},
    ])
    def test_trap_params(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrapParams(**kwargs)

    def test_shift_model_sign(self):
        with pytest.raises(InvalidArgumentError):
            ShiftModel(light_shift_sign=0)

    def test_line_order(self):
        with pytest.raises(InvalidArgumentError):
            PhysicsConstants(d1_hz=390e12)
