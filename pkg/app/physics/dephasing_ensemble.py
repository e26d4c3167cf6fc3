"""
Thermal-ensemble dephasing
Analytic Ramsey signal with the thermal envelope and phase lag, the
temperature relation, and a Monte-Carlo oracle that integrates every atom's
Bloch equations for Ramsey and spin-echo sequences.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.constants import hbar as HBAR
from scipy.constants import k as K_B

from app.core.config import settings
from app.core.exceptions import (
    InvalidArgumentError,
    OutOfModelError,
    UnboundEnsembleError,
)
from app.physics.bloch_core import (
    PopulationTrace,
    PulseSegment,
    RelaxationParams,
    apply_propagator,
    segment_propagator,
)
from app.physics.trap_model import (
    FieldParams,
    PhysicsConstants,
    ShiftModel,
    TrapParams,
    differential_light_shift,
    quadratic_zeeman_shift,
)
from app.utils.random_streams import StreamPurpose, rng_stream, validate_seed

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Constants of the analytic thermal Ramsey model
ENVELOPE_FACTOR = 0.95
PHASE_FACTOR = 0.97
TEMPERATURE_FACTOR = 1.94

QUADRATURE_PHASES = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)


@dataclass(frozen=True)
class ThermalEnsemble:
    n_atoms: int
    temperature_k: float
    trap: TrapParams
    prepared_fraction: float = 0.51

    def __post_init__(self):
        if isinstance(self.n_atoms, bool) or int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise InvalidArgumentError(f"n_atoms must be an integer >= 1, got {self.n_atoms}")
        if not math.isfinite(self.temperature_k) or self.temperature_k < 0:
            raise InvalidArgumentError(f"temperature must be finite and >= 0, got {self.temperature_k}")
        if not 0.0 <= self.prepared_fraction <= 1.0:
            raise InvalidArgumentError("prepared_fraction must lie in [0, 1]")
        if self.temperature_k >= self.trap.depth_k:
            raise UnboundEnsembleError(
                f"k_B*T ({self.temperature_k * 1e6:.2f} uK) reaches the trap depth "
                f"({self.trap.depth_k * 1e6:.2f} uK)"
            )


@dataclass(frozen=True)
class RamseyParams:
    """A * alpha * cos(delta t + kappa + phase) + C"""

    amplitude: float
    offset: float
    delta: float
    phase: float = 0.0
    t2_star: float = math.inf

    def __post_init__(self):
        for name in ("amplitude", "offset", "delta", "phase"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgumentError(f"{name} must be finite")
        if math.isnan(self.t2_star) or self.t2_star <= 0:
            raise InvalidArgumentError("t2_star must be > 0")
        tol = 1e-9
        if self.offset - abs(self.amplitude) < -tol or self.offset + abs(self.amplitude) > 1 + tol:
            raise InvalidArgumentError("offset +/- amplitude must stay within [0, 1]")


@dataclass(frozen=True)
class EnergySample:
    total_energy: float

    def __post_init__(self):
        if not math.isfinite(self.total_energy) or self.total_energy < 0:
            raise InvalidArgumentError("total_energy must be finite and >= 0")


@dataclass(frozen=True)
class PulseSpec:
    """Finite (or ideal) rectangular pulses used by the Monte-Carlo sequences"""

    rabi_frequency: float = TWO_PI * 995.0
    ideal: bool = False
    phase: float = 0.0
    echo_phase: float = 0.0

    def segment(self, area: float, phase: float) -> PulseSegment:
        return PulseSegment.pulse(area, self.rabi_frequency, phase, 0.0, self.ideal)


@dataclass(frozen=True)
class ModulationEstimate:
    amplitude: float
    stderr: float
    n_atoms: int


@dataclass
class VisibilityScan:
    t1: np.ndarray
    visibility: np.ndarray
    stderr: np.ndarray
    # closed-form exp decay next to the Monte-Carlo ratio, when a decay time is known
    expected: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t1_s": self.t1, "visibility": self.visibility})
        if self.expected is not None:
            frame["expected"] = self.expected
        return frame


def _check_t2_star(t2_star: float) -> None:
    if math.isnan(t2_star) or t2_star <= 0:
        raise InvalidArgumentError(f"t2_star must be > 0, got {t2_star}")


def envelope_alpha(t, t2_star: float):
    """[1 + 0.95 (t/T2*)^2]^(-3/2)"""
    _check_t2_star(t2_star)
    x = np.asarray(t, dtype=float) / t2_star
    value = (1.0 + ENVELOPE_FACTOR * x ** 2) ** -1.5
    return float(value) if np.ndim(value) == 0 else value


def phase_kappa(t, t2_star: float):
    """-3 arctan(0.97 t / T2*)"""
    _check_t2_star(t2_star)
    value = -3.0 * np.arctan(PHASE_FACTOR * np.asarray(t, dtype=float) / t2_star)
    return float(value) if np.ndim(value) == 0 else value


def ramsey_analytic(t, params: RamseyParams):
    """Thermal Ramsey fringe; never clamped here"""
    t = np.asarray(t, dtype=float)
    value = params.amplitude * envelope_alpha(t, params.t2_star) * np.cos(
        params.delta * t + phase_kappa(t, params.t2_star) + params.phase
    ) + params.offset
    return float(value) if np.ndim(value) == 0 else value


def echo_analytic(t, t1: float, params: RamseyParams, t2: float = math.inf):
    """
    Spin-echo signal: the thermal fringe evaluated at t - 2*t1, inverted,
    with transverse decay exp(-t/T2). Before the pi pulse (t < t1) the
    Ramsey form applies.
    """
    if t1 < 0:
        raise InvalidArgumentError("t1 must be >= 0")
    t = np.asarray(t, dtype=float)
    decay = np.exp(-t / t2) if math.isfinite(t2) else np.ones_like(t)
    tau = np.where(t >= t1, t - 2.0 * t1, t)
    sign = np.where(t >= t1, -1.0, 1.0)
    fringe = envelope_alpha(tau, params.t2_star) * np.cos(
        params.delta * tau + phase_kappa(tau, params.t2_star) + params.phase
    )
    value = params.offset + sign * params.amplitude * decay * fringe
    return float(value) if np.ndim(value) == 0 else value


def _inhomogeneity_scale(trap: TrapParams, constants: PhysicsConstants) -> float:
    return TEMPERATURE_FACTOR * HBAR * abs(trap.delta_eff) / (K_B * constants.omega_hfs)


def temperature_from_t2star(t2_star: float, trap: TrapParams, constants: PhysicsConstants) -> float:
    """T = 1.94 hbar |delta_eff| / (k_B omega_HFS T2*)"""
    _check_t2_star(t2_star)
    return _inhomogeneity_scale(trap, constants) / t2_star


def t2star_from_temperature(temperature_k: float, trap: TrapParams,
                            constants: PhysicsConstants) -> float:
    if not math.isfinite(temperature_k) or temperature_k <= 0:
        raise InvalidArgumentError("temperature must be finite and > 0")
    return _inhomogeneity_scale(trap, constants) / temperature_k


def _block_layout(n_atoms: int) -> List[Tuple[int, int]]:
    size = settings.MC_BLOCK_SIZE
    return [(block, min(size, n_atoms - block * size)) for block in range((n_atoms + size - 1) // size)]


def _block_energies(ensemble: ThermalEnsemble, seed: int, block: int, count: int) -> np.ndarray:
    # Gamma(3, k_B T) as a sum of three exponentials
    rng = rng_stream(seed, block, StreamPurpose.ENERGIES)
    return rng.standard_exponential((count, 3)).sum(axis=1) * (K_B * ensemble.temperature_k)


def sample_atom_energies(ensemble: ThermalEnsemble, seed: int) -> np.ndarray:
    """
    Total energies (J) drawn from p(E) ~ E^2 exp(-E / k_B T)

    The draw for atom i depends only on (seed, i), never on parallelism.
    """
    seed = validate_seed(seed)
    if ensemble.temperature_k >= ensemble.trap.depth_k:
        raise UnboundEnsembleError("k_B*T must stay below the trap depth")
    chunks = [_block_energies(ensemble, seed, block, count) for block, count in _block_layout(ensemble.n_atoms)]
    return np.concatenate(chunks)


def atom_detuning(sample: Union[EnergySample, float, np.ndarray], trap: TrapParams, base: float,
                  constants: PhysicsConstants, sign: int = 1):
    """
    delta_i = base + sign * (omega_HFS/|delta_eff|) (U0 - E/2) / hbar

    E/2 is the time-averaged potential energy of a harmonic oscillator.
    """
    energy = sample.total_energy if isinstance(sample, EnergySample) else sample
    energy = np.asarray(energy, dtype=float)
    if np.any(energy < 0) or not np.all(np.isfinite(energy)):
        raise InvalidArgumentError("atom energies must be finite and >= 0")
    if np.any(energy >= trap.depth_j):
        raise OutOfModelError("atom energy reaches the trap depth; harmonic model invalid")
    eta = constants.omega_hfs / abs(trap.delta_eff)
    value = base + sign * eta * (trap.depth_j - energy / 2.0) / HBAR
    return float(value) if np.ndim(value) == 0 else value


def mean_detuning(ensemble: ThermalEnsemble, base: float, constants: PhysicsConstants,
                  sign: int = 1) -> float:
    """Ensemble-averaged detuning: the trap-bottom shift reduced by the mean potential energy"""
    trap = ensemble.trap
    eta = constants.omega_hfs / abs(trap.delta_eff)
    return base + sign * eta * (trap.depth_j - 1.5 * K_B * ensemble.temperature_k) / HBAR


def bottom_detuning(trap: TrapParams, delta_rl: float, model: ShiftModel, field: FieldParams) -> float:
    """Detuning of an atom at rest at the trap bottom"""
    return (quadratic_zeeman_shift(field, model) - delta_rl
            + model.light_shift_sign * differential_light_shift(trap, model.constants))


def predicted_ramsey_params(ensemble: ThermalEnsemble, delta_rl: float,
                            model: Optional[ShiftModel] = None,
                            field: Optional[FieldParams] = None) -> RamseyParams:
    """Ramsey parameters expected for ideal pulses and no relaxation"""
    model = model or ShiftModel()
    field = field or FieldParams()
    half = ensemble.prepared_fraction / 2.0
    t2_star = (math.inf if ensemble.temperature_k == 0
               else t2star_from_temperature(ensemble.temperature_k, ensemble.trap, model.constants))
    return RamseyParams(
        amplitude=half,
        offset=half,
        delta=bottom_detuning(ensemble.trap, delta_rl, model, field),
        phase=0.0,
        t2_star=t2_star,
    )


def _validate_times(times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size == 0:
        raise InvalidArgumentError("times must not be empty")
    if not np.all(np.isfinite(times)) or times[0] < 0:
        raise InvalidArgumentError("times must be finite and >= 0")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise InvalidArgumentError("times must be sorted")
    return times


def _mc_block(block: int, count: int, ensemble: ThermalEnsemble, seed: int, base: float,
              model: ShiftModel, relax: RelaxationParams, pulse: PulseSpec, times: np.ndarray,
              t1: Optional[float], readout_phases: Sequence[float],
              max_step: Optional[float]) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Sum of per-atom P0 for one atom block

    Returns (sums[phase, time], quadrature second moments[time, 3], atoms kept).
    Free-evolution time excludes pulse durations; with t1 set, the pi pulse
    is applied once t1 of free evolution has elapsed.
    """
    energies = _block_energies(ensemble, seed, block, count)
    bound = energies < ensemble.trap.depth_j
    n_dropped = int(count - bound.sum())
    if n_dropped:
        logger.warning(f"block {block}: dropped {n_dropped} unbound atoms (E >= U0)")
    energies = energies[bound]
    m = energies.size
    n_phases = len(readout_phases)
    sums = np.zeros((n_phases, times.size))
    moments = np.zeros((times.size, 3))
    if m == 0:
        return sums, moments, 0

    det = atom_detuning(energies, ensemble.trap, base, model.constants, model.light_shift_sign)
    first = segment_propagator(pulse.segment(math.pi / 2, pulse.phase), relax, max_step, det)
    readouts = [segment_propagator(pulse.segment(math.pi / 2, pulse.phase + phi), relax, max_step, det)
                for phi in readout_phases]
    flip = (segment_propagator(pulse.segment(math.pi, pulse.echo_phase), relax, max_step, det)
            if t1 is not None else None)

    gaps = {}

    def gap(duration: float) -> np.ndarray:
        # sub-femtosecond jitter from evenly spaced grids shares one propagator
        key = round(duration, 15)
        if key not in gaps:
            gaps[key] = segment_propagator(PulseSegment.gap(key), relax, max_step, det)
        return gaps[key]

    start = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (m, 1))
    state = apply_propagator(first, start)
    clock = 0.0
    flipped = t1 is None
    for k, t in enumerate(times):
        if not flipped and t >= t1:
            if t1 > clock:
                state = apply_propagator(gap(t1 - clock), state)
                clock = t1
            state = apply_propagator(flip, state)
            flipped = True
        if t > clock:
            state = apply_propagator(gap(t - clock), state)
            clock = t
        p0 = np.empty((n_phases, m))
        for j, readout in enumerate(readouts):
            p0[j] = (1.0 - apply_propagator(readout, state)[:, 2]) / 2.0
        sums[:, k] = p0.sum(axis=1)
        if n_phases == 4:
            q1 = p0[0] - p0[2]
            q2 = p0[1] - p0[3]
            moments[k] = ((q1 * q1).sum(), (q2 * q2).sum(), (q1 * q2).sum())
    return sums, moments, m


def _run_blocks(ensemble: ThermalEnsemble, seed: int, base: float, model: ShiftModel,
                relax: RelaxationParams, pulse: PulseSpec, times: np.ndarray, t1: Optional[float],
                readout_phases: Sequence[float], max_step: Optional[float]):
    seed = validate_seed(seed)
    layout = _block_layout(ensemble.n_atoms)
    logger.debug(f"Monte-Carlo: {ensemble.n_atoms} atoms in {len(layout)} blocks, {times.size} times")
    results = Parallel(n_jobs=settings.N_JOBS, prefer="threads")(
        delayed(_mc_block)(block, count, ensemble, seed, base, model, relax, pulse, times, t1,
                           readout_phases, max_step)
        for block, count in layout
    )
    # Reduce in block order so the result is independent of the worker count
    sums = np.zeros_like(results[0][0])
    moments = np.zeros_like(results[0][1])
    kept = 0
    for block_sums, block_moments, block_kept in results:
        sums = sums + block_sums
        moments = moments + block_moments
        kept += block_kept
    if kept == 0:
        raise UnboundEnsembleError("no bound atoms left in the Monte-Carlo ensemble")
    return sums, moments, kept


def _base_detuning(delta_rl: float, model: ShiftModel, field: FieldParams) -> float:
    return quadratic_zeeman_shift(field, model) - delta_rl


def mc_ramsey(ensemble: ThermalEnsemble, delta_rl: float, pulse: PulseSpec, times,
              relax: Optional[RelaxationParams] = None, seed: Optional[int] = None,
              model: Optional[ShiftModel] = None, field: Optional[FieldParams] = None,
              max_step: Optional[float] = None) -> PopulationTrace:
    """
    Monte-Carlo Ramsey trace versus free-evolution time

    Each atom runs pi/2 - gap(t) - pi/2 with its own detuning; the detected
    P0 is prepared_fraction times the mean over bound atoms.
    """
    times = _validate_times(times)
    relax = relax or RelaxationParams.disabled()
    model = model or ShiftModel()
    field = field or FieldParams()
    seed = settings.DEFAULT_SEED if seed is None else seed
    sums, _, kept = _run_blocks(ensemble, seed, _base_detuning(delta_rl, model, field), model,
                                relax, pulse, times, None, (0.0,), max_step)
    return PopulationTrace(times, ensemble.prepared_fraction * sums[0] / kept)


def mc_echo(ensemble: ThermalEnsemble, t1: float, delta_rl: float, relax: Optional[RelaxationParams],
            times, seed: Optional[int] = None, pulse: Optional[PulseSpec] = None,
            model: Optional[ShiftModel] = None, field: Optional[FieldParams] = None,
            max_step: Optional[float] = None) -> PopulationTrace:
    """
    Monte-Carlo spin-echo trace: pi/2 at 0, pi after t1 of free evolution,
    final pi/2 after a total free evolution t.
    """
    if not math.isfinite(t1) or t1 < 0:
        raise InvalidArgumentError("t1 must be finite and >= 0")
    times = _validate_times(times)
    relax = relax or RelaxationParams.disabled()
    pulse = pulse or PulseSpec()
    model = model or ShiftModel()
    field = field or FieldParams()
    seed = settings.DEFAULT_SEED if seed is None else seed
    sums, _, kept = _run_blocks(ensemble, seed, _base_detuning(delta_rl, model, field), model,
                                relax, pulse, times, t1, (0.0,), max_step)
    return PopulationTrace(times, ensemble.prepared_fraction * sums[0] / kept)


def mc_modulation(ensemble: ThermalEnsemble, free_time: float, delta_rl: float,
                  relax: Optional[RelaxationParams] = None, seed: Optional[int] = None,
                  t1: Optional[float] = None, pulse: Optional[PulseSpec] = None,
                  model: Optional[ShiftModel] = None, field: Optional[FieldParams] = None,
                  max_step: Optional[float] = None) -> ModulationEstimate:
    """
    Fringe modulation amplitude at one free-evolution time

    The final pi/2 phase is stepped through four quadratures; the amplitude
    is half the length of the mean quadrature vector, times the prepared
    fraction. With t1 set, an echo pi pulse is inserted.
    """
    if t1 is not None and (not math.isfinite(t1) or t1 < 0 or free_time < t1):
        raise InvalidArgumentError("echo needs 0 <= t1 <= free_time")
    times = _validate_times([free_time])
    relax = relax or RelaxationParams.disabled()
    pulse = pulse or PulseSpec()
    model = model or ShiftModel()
    field = field or FieldParams()
    seed = settings.DEFAULT_SEED if seed is None else seed
    sums, moments, kept = _run_blocks(ensemble, seed, _base_detuning(delta_rl, model, field), model,
                                      relax, pulse, times, t1, QUADRATURE_PHASES, max_step)
    m1 = (sums[0, 0] - sums[2, 0]) / kept
    m2 = (sums[1, 0] - sums[3, 0]) / kept
    length = math.hypot(m1, m2)
    f = ensemble.prepared_fraction
    stderr = 0.0
    if length > 0 and kept > 1:
        var1 = moments[0, 0] / kept - m1 ** 2
        var2 = moments[0, 1] / kept - m2 ** 2
        cov = moments[0, 2] / kept - m1 * m2
        var_len = (m1 ** 2 * var1 + m2 ** 2 * var2 + 2 * m1 * m2 * cov) / (length ** 2 * kept)
        stderr = f * 0.5 * math.sqrt(max(var_len, 0.0))
    return ModulationEstimate(amplitude=f * 0.5 * length, stderr=stderr, n_atoms=kept)


def echo_visibility(t1: float, t_echo: float, decay_in_total_time: bool = False) -> float:
    """exp(-t1/T_echo), or exp(-2 t1/T_echo) when the decay runs in total time"""
    if not math.isfinite(t1) or t1 < 0:
        raise InvalidArgumentError("t1 must be finite and >= 0")
    if not t_echo > 0:
        raise InvalidArgumentError("t_echo must be > 0")
    scale = 2.0 if decay_in_total_time else 1.0
    return math.exp(-scale * t1 / t_echo)


def echo_visibility_scan(ensemble: ThermalEnsemble, t1_values: Sequence[float], delta_rl: float,
                         relax: Optional[RelaxationParams] = None, seed: Optional[int] = None,
                         pulse: Optional[PulseSpec] = None, model: Optional[ShiftModel] = None,
                         field: Optional[FieldParams] = None,
                         max_step: Optional[float] = None, t_echo: Optional[float] = None,
                         decay_in_total_time: bool = False) -> VisibilityScan:
    """
    Echo modulation at 2*t1 over the Ramsey modulation at t = 0, per t1

    With a finite t_echo the scan also carries the closed-form
    echo_visibility curve for comparison.
    """
    t1_values = _validate_times(t1_values)
    kwargs = dict(relax=relax, seed=seed, pulse=pulse, model=model, field=field, max_step=max_step)
    reference = mc_modulation(ensemble, 0.0, delta_rl, **kwargs)
    if reference.amplitude == 0:
        raise InvalidArgumentError("zero Ramsey modulation; prepared_fraction must be > 0")
    visibility = np.empty_like(t1_values)
    stderr = np.empty_like(t1_values)
    for i, t1 in enumerate(t1_values):
        echo = mc_modulation(ensemble, 2.0 * t1, delta_rl, t1=t1, **kwargs)
        visibility[i] = echo.amplitude / reference.amplitude
        stderr[i] = visibility[i] * math.hypot(
            echo.stderr / echo.amplitude if echo.amplitude else 0.0,
            reference.stderr / reference.amplitude,
        )
        logger.info(f"echo visibility at t1 = {t1 * 1e3:.3f} ms: {visibility[i]:.4f}")
    expected = None
    if t_echo is not None and math.isfinite(t_echo):
        expected = np.array([echo_visibility(t1, t_echo, decay_in_total_time) for t1 in t1_values])
    return VisibilityScan(t1_values, visibility, stderr, expected)


def gate_budget(t_pi_half: float, coherence_time: float) -> float:
    """Number of pi/2 operations that fit in the coherence time"""
    if not (t_pi_half > 0 and coherence_time > 0):
        raise InvalidArgumentError("times must be > 0")
    return coherence_time / t_pi_half
