"""
Dipole-trap model
Effective detuning, photon scattering, differential light shift and the
quadratic Zeeman shift that together place the clock resonance.

Depths are carried as U0/k_B in kelvin; all shifts and rates come back in
angular units (rad/s) or 1/s.
"""

import logging
import math
from dataclasses import dataclass, replace

from scipy.constants import c as C_LIGHT
from scipy.constants import h as PLANCK
from scipy.constants import hbar as HBAR
from scipy.constants import k as K_B

from app.core.exceptions import AmbiguousDetuningError, InvalidArgumentError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Model validity window for the two-line effective detuning
MIN_WAVELENGTH_M = 700e-9
MAX_WAVELENGTH_M = 1100e-9
# Closer than this to a line the two-level collapse is meaningless
MIN_LINE_DETUNING_HZ = 1e6

DEFAULT_DELTA_EFF = -TWO_PI * 13.04e12
DEFAULT_ZEEMAN_HZ_PER_T2 = 1.28e11


def _positive(name: str, value: float, allow_zero: bool = False) -> None:
    if not math.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise InvalidArgumentError(f"{name} must be finite and {bound}, got {value}")


@dataclass(frozen=True)
class PhysicsConstants:
    """85Rb constants; angular frequencies in rad/s, line frequencies in Hz"""

    omega_hfs: float = TWO_PI * 3.0357e9
    gamma_natural: float = TWO_PI * 6.07e6
    d1_hz: float = 377.107e12
    d2_hz: float = 384.230e12

    def __post_init__(self):
        for name in ("omega_hfs", "gamma_natural", "d1_hz", "d2_hz"):
            _positive(name, getattr(self, name))
        if self.d2_hz <= self.d1_hz:
            raise InvalidArgumentError("d2_hz must lie above d1_hz")

    @classmethod
    def from_hz(cls, omega_hfs_hz: float, gamma_natural_hz: float,
                d1_hz: float, d2_hz: float) -> "PhysicsConstants":
        return cls(TWO_PI * omega_hfs_hz, TWO_PI * gamma_natural_hz, d1_hz, d2_hz)


@dataclass(frozen=True)
class TrapParams:
    """
    Single dipole trap

    depth_k is U0/k_B in kelvin (zero is allowed as the empty-trap limit);
    delta_eff is the red effective detuning in rad/s.
    """

    depth_k: float
    waist_m: float = 1.7e-6
    wavelength_m: float = 815e-9
    delta_eff: float = DEFAULT_DELTA_EFF

    def __post_init__(self):
        _positive("depth_k", self.depth_k, allow_zero=True)
        _positive("waist_m", self.waist_m)
        _positive("wavelength_m", self.wavelength_m)
        if not math.isfinite(self.delta_eff) or self.delta_eff >= 0:
            raise InvalidArgumentError(f"delta_eff must be negative (red detuned), got {self.delta_eff}")

    @property
    def depth_j(self) -> float:
        return self.depth_k * K_B

    def with_depth(self, depth_k: float) -> "TrapParams":
        return replace(self, depth_k=depth_k)


@dataclass(frozen=True)
class FieldParams:
    bias_field_t: float = 50e-6

    def __post_init__(self):
        _positive("bias_field_t", self.bias_field_t, allow_zero=True)


@dataclass(frozen=True)
class ShiftModel:
    """Constants plus the quadratic Zeeman coefficient K_Z (Hz/T^2) and light-shift sign"""

    constants: PhysicsConstants = PhysicsConstants()
    zeeman_coefficient_hz_per_t2: float = DEFAULT_ZEEMAN_HZ_PER_T2
    light_shift_sign: int = 1

    def __post_init__(self):
        _positive("zeeman_coefficient_hz_per_t2", self.zeeman_coefficient_hz_per_t2)
        if self.light_shift_sign not in (-1, 1):
            raise InvalidArgumentError("light_shift_sign must be +1 or -1")


def effective_detuning(trap_wavelength: float, constants: PhysicsConstants) -> float:
    """
    Single detuning collapsing the D1 and D2 contributions

    1/delta_eff = (2/3)/delta_D2 + (1/3)/delta_D1

    Args:
        trap_wavelength: trap laser wavelength in meters
        constants: line frequencies

    Returns:
        delta_eff in rad/s (negative for red detuning)
    """
    if not math.isfinite(trap_wavelength):
        raise InvalidArgumentError("trap wavelength must be finite")
    if not MIN_WAVELENGTH_M <= trap_wavelength <= MAX_WAVELENGTH_M:
        raise InvalidArgumentError(
            f"trap wavelength {trap_wavelength * 1e9:.1f} nm outside "
            f"[{MIN_WAVELENGTH_M * 1e9:.0f}, {MAX_WAVELENGTH_M * 1e9:.0f}] nm"
        )

    nu = C_LIGHT / trap_wavelength
    if constants.d1_hz <= nu <= constants.d2_hz:
        raise AmbiguousDetuningError(
            f"{trap_wavelength * 1e9:.3f} nm lies between the D1 and D2 lines"
        )
    det_d1 = nu - constants.d1_hz
    det_d2 = nu - constants.d2_hz
    if min(abs(det_d1), abs(det_d2)) < MIN_LINE_DETUNING_HZ:
        raise AmbiguousDetuningError(f"{trap_wavelength * 1e9:.6f} nm sits on an atomic line")

    inverse = (2.0 / 3.0) / (TWO_PI * det_d2) + (1.0 / 3.0) / (TWO_PI * det_d1)
    return 1.0 / inverse


def trap_from_wavelength(depth_k: float, wavelength_m: float, waist_m: float,
                         constants: PhysicsConstants) -> TrapParams:
    delta_eff = effective_detuning(wavelength_m, constants)
    logger.debug(f"delta_eff/2pi = {delta_eff / TWO_PI / 1e12:.4f} THz at {wavelength_m * 1e9:.1f} nm")
    return TrapParams(depth_k=depth_k, waist_m=waist_m, wavelength_m=wavelength_m, delta_eff=delta_eff)


def _depth_over_detuning(trap: TrapParams) -> float:
    """U0 / (hbar |delta_eff|), shared by scattering and light shift"""
    return trap.depth_j / (HBAR * abs(trap.delta_eff))


def scattering_rate(trap: TrapParams, constants: PhysicsConstants) -> float:
    """Gamma_sc = (Gamma / |delta_eff|) U0 / hbar in 1/s"""
    return constants.gamma_natural * _depth_over_detuning(trap)


def differential_light_shift(trap: TrapParams, constants: PhysicsConstants) -> float:
    """Trap-bottom differential shift (omega_HFS / |delta_eff|) U0 / hbar in rad/s"""
    return constants.omega_hfs * _depth_over_detuning(trap)


def light_shift_slope_hz_per_k(trap: TrapParams, constants: PhysicsConstants) -> float:
    """Differential light shift per kelvin of depth, in Hz/K"""
    return constants.omega_hfs / abs(trap.delta_eff) * K_B / PLANCK


def quadratic_zeeman_shift(field: FieldParams, model: ShiftModel) -> float:
    return TWO_PI * model.zeeman_coefficient_hz_per_t2 * field.bias_field_t ** 2


def total_resonance_shift(trap: TrapParams, field: FieldParams, model: ShiftModel) -> float:
    """delta_shift = sign * delta_ls + delta_qz, affine in U0"""
    return (model.light_shift_sign * differential_light_shift(trap, model.constants)
            + quadratic_zeeman_shift(field, model))
