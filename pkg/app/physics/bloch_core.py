"""
Bloch-equation core
Integrates the damped optical Bloch equations of a driven two-level system
and provides closed-form transfer for rectangular pulses.

Conventions: w = P1 - P0, so the prepared state |1> is w = +1 and the
detected population is P0 = (1 - w) / 2. The drive rotates the Bloch
vector about the axis (cos(phase), sin(phase), 0) of the uv-plane.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-9
POPULATION_TOLERANCE = 1e-9

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _require_finite(name: str, *values) -> None:
    for value in values:
        if not np.all(np.isfinite(np.asarray(value, dtype=float))):
            raise InvalidArgumentError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class BlochState:
    """Coherences u, v and inversion w of a qubit (ensemble)"""

    u: float = 0.0
    v: float = 0.0
    w: float = 1.0

    def __post_init__(self):
        _require_finite("BlochState", self.u, self.v, self.w)
        if self.norm > 1.0 + NORM_TOLERANCE:
            raise InvalidArgumentError(f"Bloch vector norm {self.norm:.12g} exceeds 1")

    @property
    def norm(self) -> float:
        return math.sqrt(self.u ** 2 + self.v ** 2 + self.w ** 2)

    @property
    def p0(self) -> float:
        return (1.0 - self.w) / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BlochState":
        return cls(float(values[0]), float(values[1]), float(values[2]))

    @classmethod
    def upper(cls) -> "BlochState":
        return cls(0.0, 0.0, 1.0)

    @classmethod
    def lower(cls) -> "BlochState":
        return cls(0.0, 0.0, -1.0)


@dataclass(frozen=True)
class DriveParams:
    """Rabi frequency and detuning in rad/s, drive phase in rad"""

    rabi_frequency: float = 0.0
    detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        _require_finite("DriveParams", self.rabi_frequency, self.detuning, self.phase)
        if self.rabi_frequency < 0:
            raise InvalidArgumentError("rabi_frequency must be >= 0")


@dataclass(frozen=True)
class RelaxationParams:
    """
    Longitudinal (t1) and transverse (t2) relaxation times in seconds

    t2 is the composite time of 1/T2 = 1/T2' + 1/T2*; infinity disables a
    channel. w_eq is the inversion the system relaxes to.
    """

    t1: float = math.inf
    t2: float = math.inf
    t2_homogeneous: float = math.inf
    w_eq: float = 0.0

    def __post_init__(self):
        for name in ("t1", "t2", "t2_homogeneous"):
            value = getattr(self, name)
            if math.isnan(value) or value <= 0:
                raise InvalidArgumentError(f"{name} must be > 0 (or inf), got {value}")
        _require_finite("w_eq", self.w_eq)
        if not -1.0 <= self.w_eq <= 1.0:
            raise InvalidArgumentError("w_eq must lie in [-1, 1]")

    @property
    def gamma1(self) -> float:
        return 0.0 if math.isinf(self.t1) else 1.0 / self.t1

    @property
    def gamma2(self) -> float:
        return 0.0 if math.isinf(self.t2) else 1.0 / self.t2

    @property
    def enabled(self) -> bool:
        return self.gamma1 > 0 or self.gamma2 > 0

    @classmethod
    def disabled(cls) -> "RelaxationParams":
        return cls()

    @classmethod
    def from_components(cls, t1: float = math.inf, t2_homogeneous: float = math.inf,
                        t2_star: float = math.inf, w_eq: float = 0.0) -> "RelaxationParams":
        """Combine homogeneous and inhomogeneous transverse times"""
        rate = _rate(t2_homogeneous) + _rate(t2_star)
        t2 = math.inf if rate == 0 else 1.0 / rate
        return cls(t1=t1, t2=t2, t2_homogeneous=t2_homogeneous, w_eq=w_eq)

    @classmethod
    def scattering_limited(cls, t1: float, t2_homogeneous: float = math.inf,
                           w_eq: float = 0.0, transverse_factor: float = 2.0) -> "RelaxationParams":
        """
        Photon scattering as population decay; its transverse channel is
        transverse_factor * T1 (2 for pure population decay)
        """
        rate = _rate(transverse_factor * t1) + _rate(t2_homogeneous)
        t2 = math.inf if rate == 0 else 1.0 / rate
        return cls(t1=t1, t2=t2, t2_homogeneous=t2_homogeneous, w_eq=w_eq)


def _rate(time_constant: float) -> float:
    if time_constant <= 0 or math.isnan(time_constant):
        raise InvalidArgumentError(f"time constant must be > 0, got {time_constant}")
    return 0.0 if math.isinf(time_constant) else 1.0 / time_constant


@dataclass(frozen=True)
class PulseSegment:
    """
    Piecewise-constant drive lasting `duration` seconds

    A segment with `ideal_area` set is an instantaneous rotation by that
    angle about the drive axis; its duration is zero.
    """

    duration: float
    drive: DriveParams = DriveParams()
    ideal_area: Optional[float] = None

    def __post_init__(self):
        _require_finite("duration", self.duration)
        if self.duration < 0:
            raise InvalidArgumentError(f"duration must be >= 0, got {self.duration}")
        if self.ideal_area is not None:
            _require_finite("ideal_area", self.ideal_area)
            if self.duration != 0:
                raise InvalidArgumentError("ideal pulses have zero duration")

    @property
    def is_ideal(self) -> bool:
        return self.ideal_area is not None

    @classmethod
    def pulse(cls, area: float, rabi_frequency: float, phase: float = 0.0,
              detuning: float = 0.0, ideal: bool = False) -> "PulseSegment":
        """Rectangular pulse of the given area (rad) at the given Rabi frequency"""
        drive = DriveParams(rabi_frequency=rabi_frequency, detuning=detuning, phase=phase)
        if ideal:
            return cls(0.0, drive, ideal_area=area)
        if rabi_frequency <= 0:
            raise InvalidArgumentError("a finite pulse needs rabi_frequency > 0")
        return cls(area / rabi_frequency, drive)

    @classmethod
    def gap(cls, duration: float, detuning: float = 0.0) -> "PulseSegment":
        """Free precession"""
        return cls(duration, DriveParams(0.0, detuning, 0.0))


@dataclass
class PopulationTrace:
    """P0 sampled on a sorted axis (time or detuning); repeated samples allowed"""

    times: np.ndarray
    p0: np.ndarray
    x_label: str = "time_s"
    bounded: bool = True

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.p0 = np.atleast_1d(np.asarray(self.p0, dtype=float))
        if self.times.shape != self.p0.shape or self.times.ndim != 1:
            raise InvalidArgumentError("times and p0 must be 1-D arrays of equal length")
        _require_finite("trace", self.times, self.p0)
        if self.times.size > 1 and np.any(np.diff(self.times) < 0):
            raise InvalidArgumentError(f"{self.x_label} axis must be sorted")
        if self.bounded and self.p0.size and (
            self.p0.min() < -POPULATION_TOLERANCE or self.p0.max() > 1 + POPULATION_TOLERANCE
        ):
            raise InvalidArgumentError("populations must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.times.size)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({self.x_label: self.times, "p0": self.p0})


def default_step(generalized_rabi: float, relax: RelaxationParams, max_step: float) -> float:
    """min(max_step, (2*pi/W)/STEPS_PER_CYCLE, T2/RELAXATION_STEPS, T1/RELAXATION_STEPS)"""
    step = max_step
    if generalized_rabi > 0:
        step = min(step, 2.0 * math.pi / generalized_rabi / settings.STEPS_PER_CYCLE)
    for time_constant in (relax.t2, relax.t1):
        if not math.isinf(time_constant):
            step = min(step, time_constant / settings.RELAXATION_STEPS)
    return step


def bloch_generator(rabi_frequency: ArrayLike, detuning: ArrayLike, phase: ArrayLike,
                    relax: RelaxationParams) -> np.ndarray:
    """
    Augmented 4x4 generator G of d/dt [u, v, w, 1] = G [u, v, w, 1]

    Broadcasts over array-valued detunings, giving shape (..., 4, 4).
    """
    rabi, det, phi = np.broadcast_arrays(
        np.asarray(rabi_frequency, dtype=float),
        np.asarray(detuning, dtype=float),
        np.asarray(phase, dtype=float),
    )
    ox = rabi * np.cos(phi)
    oy = rabi * np.sin(phi)
    g1, g2 = relax.gamma1, relax.gamma2

    gen = np.zeros(det.shape + (4, 4))
    gen[..., 0, 0] = -g2
    gen[..., 0, 1] = -det
    gen[..., 0, 2] = oy
    gen[..., 1, 0] = det
    gen[..., 1, 1] = -g2
    gen[..., 1, 2] = -ox
    gen[..., 2, 0] = -oy
    gen[..., 2, 1] = ox
    gen[..., 2, 2] = -g1
    gen[..., 2, 3] = g1 * relax.w_eq
    return gen


def rk4_step_matrix(generator: np.ndarray, step: float) -> np.ndarray:
    """One classical RK4 step of a constant linear system, as a matrix"""
    a = generator * step
    eye = np.broadcast_to(np.eye(4), a.shape)
    # I + A + A^2/2 + A^3/6 + A^4/24 in Horner form
    m = eye + a / 4.0
    m = eye + (a @ m) / 3.0
    m = eye + (a @ m) / 2.0
    return eye + a @ m


def rotation_matrix(angle: float, phase: float = 0.0) -> np.ndarray:
    """Augmented rotation by `angle` about (cos(phase), sin(phase), 0)"""
    nx, ny = math.cos(phase), math.sin(phase)
    k = np.array([[0.0, 0.0, ny], [0.0, 0.0, -nx], [-ny, nx, 0.0]])
    rot = np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)
    out = np.eye(4)
    out[:3, :3] = rot
    return out


def segment_propagator(segment: PulseSegment, relax: RelaxationParams,
                       max_step: Optional[float] = None,
                       detunings: Optional[ArrayLike] = None) -> np.ndarray:
    """
    Affine map produced by integrating one segment

    Args:
        segment: the drive segment
        relax: relaxation parameters
        max_step: upper bound on the RK4 step in seconds
        detunings: per-atom detunings overriding the drive detuning

    Returns:
        (4, 4) matrix, or (n, 4, 4) when detunings are given
    """
    if max_step is None:
        max_step = settings.MAX_STEP_S
    if not (math.isfinite(max_step) and max_step > 0):
        raise InvalidArgumentError(f"max_step must be finite and > 0, got {max_step}")

    drive = segment.drive
    if detunings is None:
        det = np.asarray(drive.detuning, dtype=float)
    else:
        det = np.asarray(detunings, dtype=float)
        _require_finite("detunings", det)
    batch = det.shape

    if segment.is_ideal:
        rot = rotation_matrix(segment.ideal_area, drive.phase)
        return np.broadcast_to(rot, batch + (4, 4)).copy()
    if segment.duration == 0:
        return np.broadcast_to(np.eye(4), batch + (4, 4)).copy()

    max_detuning = float(np.max(np.abs(det))) if det.size else 0.0
    generalized = math.hypot(drive.rabi_frequency, max_detuning)
    step = default_step(generalized, relax, max_step)
    n_steps = max(1, math.ceil(segment.duration / step - 1e-9))
    gen = bloch_generator(drive.rabi_frequency, det, drive.phase, relax)
    one_step = rk4_step_matrix(gen, segment.duration / n_steps)
    return np.linalg.matrix_power(one_step, n_steps)


def apply_propagator(propagator: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Apply (n,4,4) or (4,4) maps to augmented states (n,4) or (4,)"""
    if propagator.ndim == 2:
        return states @ propagator.T
    return np.einsum("nij,nj->ni", propagator, states)


def augment(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    ones = np.ones(states.shape[:-1] + (1,))
    return np.concatenate([states, ones], axis=-1)


def evolve_segment(state: BlochState, segment: PulseSegment, relax: RelaxationParams,
                   step_control: Optional[float] = None) -> BlochState:
    """State at t0 + duration under the damped Bloch equations"""
    propagator = segment_propagator(segment, relax, step_control)
    out = propagator @ augment(state.as_array())
    return BlochState.from_array(out[:3])


def run_sequence(initial: BlochState, sequence: Sequence[PulseSegment], relax: RelaxationParams,
                 sample_times: ArrayLike, max_step: Optional[float] = None) -> PopulationTrace:
    """
    Chain segments and sample P0 at the requested times

    Zero-duration (ideal) segments located at a sample time are applied
    before that sample is taken.
    """
    if not sequence:
        raise InvalidArgumentError("sequence must contain at least one segment")
    times = np.atleast_1d(np.asarray(sample_times, dtype=float))
    _require_finite("sample_times", times)
    if times.size == 0:
        raise InvalidArgumentError("sample_times must not be empty")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise InvalidArgumentError("sample_times must be sorted")

    starts = np.concatenate([[0.0], np.cumsum([seg.duration for seg in sequence])])
    total = float(starts[-1])
    tol = 1e-12 * max(total, 1e-12)
    if times[0] < -tol or times[-1] > total + tol:
        raise InvalidArgumentError(
            f"sample times must lie within [0, {total:.12g}] s"
        )

    cache: Dict[Tuple[int, float], np.ndarray] = {}

    def portion(index: int, duration: float) -> np.ndarray:
        key = (index, duration)
        if key not in cache:
            seg = sequence[index]
            piece = seg if seg.is_ideal else PulseSegment(duration, seg.drive)
            cache[key] = segment_propagator(piece, relax, max_step)
        return cache[key]

    state = augment(initial.as_array())
    p0 = np.empty_like(times)
    index, elapsed = 0, 0.0
    for k, t in enumerate(times):
        while index < len(sequence):
            seg = sequence[index]
            seg_end = starts[index] + seg.duration
            if seg_end <= t + tol:
                remaining = seg.duration - elapsed
                if seg.is_ideal or remaining > 0:
                    state = portion(index, remaining) @ state
                index, elapsed = index + 1, 0.0
            else:
                partial = t - (starts[index] + elapsed)
                if partial > 0:
                    state = portion(index, partial) @ state
                    elapsed += partial
                break
        p0[k] = (1.0 - state[2]) / 2.0

    logger.debug(f"run_sequence: {len(sequence)} segments, {times.size} samples, {len(cache)} propagators")
    return PopulationTrace(times, p0)


def rabi_transfer(t: ArrayLike, omega: ArrayLike, delta: ArrayLike):
    """(Omega^2/W^2) sin^2(W t / 2) with W = sqrt(Omega^2 + delta^2)"""
    _require_finite("rabi_transfer", t, omega, delta)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise InvalidArgumentError("pulse time must be >= 0")
    omega_arr = np.asarray(omega, dtype=float)
    delta_arr = np.asarray(delta, dtype=float)
    w_sq = omega_arr ** 2 + delta_arr ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(w_sq > 0, omega_arr ** 2 / np.where(w_sq > 0, w_sq, 1.0), 0.0)
    value = ratio * np.sin(np.sqrt(w_sq) * t_arr / 2.0) ** 2
    return float(value) if np.ndim(value) == 0 else value


def lineshape_scan(t_pulse: float, omega: float, detunings: ArrayLike) -> PopulationTrace:
    """Rectangular-pulse transfer versus detuning"""
    det = np.atleast_1d(np.asarray(detunings, dtype=float))
    if det.size == 0:
        raise InvalidArgumentError("detuning list must not be empty")
    return PopulationTrace(det, rabi_transfer(t_pulse, omega, det), x_label="x")


def lineshape_first_zero(t_pulse: float, omega: float) -> float:
    """Detuning of the first transfer zero, where W * t = 2*pi"""
    value = (2.0 * math.pi / t_pulse) ** 2 - omega ** 2
    if value <= 0:
        raise InvalidArgumentError("pulse area exceeds 2*pi; first zero lies at delta = 0 or below")
    return math.sqrt(value)


def rabi_sequence(rabi_frequency: float, duration: float, detuning: float = 0.0,
                  phase: float = 0.0) -> List[PulseSegment]:
    return [PulseSegment(duration, DriveParams(rabi_frequency, detuning, phase))]


def ramsey_sequence(rabi_frequency: float, free_time: float, detuning: float = 0.0,
                    phase: float = 0.0, ideal: bool = False) -> List[PulseSegment]:
    """pi/2 - free precession - pi/2"""
    half = PulseSegment.pulse(math.pi / 2, rabi_frequency, phase, detuning, ideal)
    return [half, PulseSegment.gap(free_time, detuning), half]


def echo_sequence(rabi_frequency: float, t1: float, free_time: float, detuning: float = 0.0,
                  phase: float = 0.0, echo_phase: float = 0.0,
                  ideal: bool = False) -> List[PulseSegment]:
    """pi/2 - t1 - pi - (free_time - t1) - pi/2"""
    if free_time < t1:
        raise InvalidArgumentError("free_time must be >= t1 for an echo sequence")
    half = PulseSegment.pulse(math.pi / 2, rabi_frequency, phase, detuning, ideal)
    flip = PulseSegment.pulse(math.pi, rabi_frequency, echo_phase, detuning, ideal)
    return [half, PulseSegment.gap(t1, detuning), flip,
            PulseSegment.gap(free_time - t1, detuning), half]


def pi_half_time(rabi_frequency: float) -> float:
    """t_pi/2 = pi / (2 Omega)"""
    if not (math.isfinite(rabi_frequency) and rabi_frequency > 0):
        raise InvalidArgumentError("rabi_frequency must be finite and > 0")
    return math.pi / (2.0 * rabi_frequency)
