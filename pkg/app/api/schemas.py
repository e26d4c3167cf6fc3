import hashlib
import json
import math
import re
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Extra, Field, ValidationError, root_validator, validator

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.physics.bloch_core import RelaxationParams
from app.physics.dephasing_ensemble import PulseSpec, ThermalEnsemble, temperature_from_t2star
from app.physics.register_array import ArraySpec, LoadingParams
from app.physics.trap_model import (
    FieldParams,
    PhysicsConstants,
    ShiftModel,
    TrapParams,
    effective_detuning,
    scattering_rate,
)
from app.services.detection_sim import DetectionParams

TWO_PI = 2.0 * math.pi


class StrictModel(BaseModel):
    class Config:
        extra = Extra.forbid
        validate_assignment = True


# Physics schemas
class ConstantsConfig(StrictModel):
    omega_hfs_hz: float = Field(3.0357e9, gt=0, description="Hyperfine splitting")
    gamma_natural_hz: float = Field(6.07e6, gt=0, description="D2 natural linewidth")
    d1_hz: float = Field(377.107e12, gt=0)
    d2_hz: float = Field(384.230e12, gt=0)
    zeeman_coefficient_hz_per_t2: float = Field(1.28e11, gt=0, description="Quadratic clock-transition coefficient")

    def physics(self) -> PhysicsConstants:
        return PhysicsConstants.from_hz(self.omega_hfs_hz, self.gamma_natural_hz, self.d1_hz, self.d2_hz)


class TrapConfig(StrictModel):
    depth_k: float = Field(1.0e-3, ge=0, description="U0/k_B")
    waist_m: float = Field(1.7e-6, gt=0)
    wavelength_m: float = Field(815e-9, gt=0)
    delta_eff_rad_s: Optional[float] = Field(None, lt=0, description="Overrides the wavelength-derived value")


class FieldConfig(StrictModel):
    bias_field_t: float = Field(50e-6, ge=0)


class ShiftConfig(StrictModel):
    light_shift_sign: int = 1

    @validator("light_shift_sign")
    def sign_is_unit(cls, v):
        if v not in (-1, 1):
            raise ValueError("must be +1 or -1")
        return v


class EnsembleConfig(StrictModel):
    n_atoms: int = Field(20000, ge=1)
    temperature_k: Optional[float] = Field(None, ge=0)
    t2_star_s: Optional[float] = Field(None, gt=0, description="Sets the temperature through the T2* relation")
    prepared_fraction: float = Field(0.51, ge=0, le=1)

    @root_validator(skip_on_failure=True)
    def one_temperature_source(cls, values):
        if values.get("temperature_k") is not None and values.get("t2_star_s") is not None:
            raise ValueError("give either temperature_k or t2_star_s, not both")
        return values


class RelaxationConfig(StrictModel):
    t1_s: Optional[float] = Field(None, gt=0)
    t2_s: Optional[float] = Field(None, gt=0)
    t2_homogeneous_s: Optional[float] = Field(None, gt=0)
    scattering_limited: bool = False
    w_eq: float = Field(0.0, ge=-1, le=1)
    echo_decay_in_total_time: bool = False


class SequenceConfig(StrictModel):
    omega_rabi_rad_s: float = Field(TWO_PI * 995.0, gt=0)
    delta_rl_rad_s: float = 0.0
    rabi_detuning_rad_s: float = 0.0
    t_max_s: float = Field(12e-3, gt=0)
    points: int = Field(120, ge=2)
    t1_s: float = Field(7.5e-3, ge=0)
    ideal_pulses: bool = False
    pulse_phase_rad: float = 0.0
    echo_phase_rad: float = 0.0
    t_pulse_s: Optional[float] = Field(None, gt=0)
    detuning_span_rad_s: float = Field(TWO_PI * 10e3, gt=0)
    visibility_t1_s: List[float] = Field(default_factory=lambda: [i * 5e-3 for i in range(13)])
    max_step_s: Optional[float] = Field(None, gt=0)

    @validator("visibility_t1_s")
    def increasing_t1(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 0:
            raise ValueError("must be a non-empty, strictly increasing list of times >= 0")
        return v


class ArrayConfig(StrictModel):
    rows: int = Field(4, ge=1)
    cols: int = Field(4, ge=1)
    pitch_m: float = Field(54e-6, gt=0)
    site_waist_m: float = Field(1.7e-6, gt=0)
    illumination_waist_m: float = Field(194.6e-6, gt=0)
    center_depth_k: float = Field(1.2e-3, gt=0)
    diffraction_efficiency: float = Field(0.40, gt=0, le=1)
    mc_atoms_per_site: int = Field(2000, ge=1)

    @root_validator(skip_on_failure=True)
    def sites_do_not_touch(cls, values):
        if values["pitch_m"] <= 2 * values["site_waist_m"]:
            raise ValueError("pitch_m must exceed twice site_waist_m")
        return values


class LoadingConfig(StrictModel):
    exponent: float = Field(3.5, ge=0)
    center_atoms: float = Field(500.0, ge=0)
    temperature_k: float = Field(40e-6, ge=0)
    depth_scaled_temperature: bool = False
    poisson_jitter: bool = True


class DetectionConfig(StrictModel):
    exposure_s: float = Field(300e-6, gt=0)
    photons_per_atom: float = Field(50.0, ge=0)
    psf_sigma_m: float = Field(3e-6, gt=0)
    pixel_pitch_m: float = Field(2e-6, gt=0)
    em_gain: float = Field(10.0, ge=1)
    read_noise: float = Field(10.0, ge=0)
    pushout_leakage: float = Field(0.0, ge=0, le=1)
    baseline: float = Field(100.0, ge=0)
    width: int = Field(128, ge=1)
    height: int = Field(128, ge=1)
    noise: bool = True
    integration_radius_m: Optional[float] = Field(None, gt=0, description="Defaults to 4 psf_sigma_m")


class FitConfig(StrictModel):
    bootstrap: int = Field(0, ge=0, description="Residual bootstrap resamples; 0 turns it off")
    max_iter: int = Field(500, ge=1)

    @validator("bootstrap")
    def enough_resamples(cls, v):
        if v == 1:
            raise ValueError("needs 0 (off) or at least 2 resamples")
        return v


class ExperimentConfig(StrictModel):
    """Complete, validated experiment description"""

    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    trap: TrapConfig = Field(default_factory=TrapConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    shift: ShiftConfig = Field(default_factory=ShiftConfig)
    ensemble: Optional[EnsembleConfig] = Field(default_factory=EnsembleConfig)
    relaxation: RelaxationConfig = Field(default_factory=RelaxationConfig)
    sequence: SequenceConfig = Field(default_factory=SequenceConfig)
    array: Optional[ArrayConfig] = None
    loading: LoadingConfig = Field(default_factory=LoadingConfig)
    detection: Optional[DetectionConfig] = None
    fit: FitConfig = Field(default_factory=FitConfig)
    seed: int = Field(settings.DEFAULT_SEED, ge=0, lt=2 ** 64)
    output_dir: str = settings.OUTPUT_DIR

    def digest(self) -> str:
        canonical = json.dumps(self.dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # Conversions to physics objects

    def physics_constants(self) -> PhysicsConstants:
        return self.constants.physics()

    def shift_model(self) -> ShiftModel:
        return ShiftModel(self.physics_constants(), self.constants.zeeman_coefficient_hz_per_t2,
                          self.shift.light_shift_sign)

    def field_params(self) -> FieldParams:
        return FieldParams(self.field.bias_field_t)

    def trap_params(self, depth_k: Optional[float] = None) -> TrapParams:
        delta_eff = self.trap.delta_eff_rad_s
        if delta_eff is None:
            delta_eff = effective_detuning(self.trap.wavelength_m, self.physics_constants())
        return TrapParams(
            depth_k=self.trap.depth_k if depth_k is None else depth_k,
            waist_m=self.trap.waist_m,
            wavelength_m=self.trap.wavelength_m,
            delta_eff=delta_eff,
        )

    def thermal_ensemble(self, trap: Optional[TrapParams] = None) -> ThermalEnsemble:
        if self.ensemble is None:
            raise ConfigError("this command needs an 'ensemble' section")
        trap = trap or self.trap_params()
        if self.ensemble.t2_star_s is not None:
            temperature = temperature_from_t2star(self.ensemble.t2_star_s, trap, self.physics_constants())
        elif self.ensemble.temperature_k is not None:
            temperature = self.ensemble.temperature_k
        else:
            temperature = self.loading.temperature_k
        return ThermalEnsemble(self.ensemble.n_atoms, temperature, trap, self.ensemble.prepared_fraction)

    def relaxation_params(self, trap: Optional[TrapParams] = None) -> RelaxationParams:
        cfg = self.relaxation
        t2h = cfg.t2_homogeneous_s or math.inf
        if cfg.scattering_limited:
            t1 = cfg.t1_s
            if t1 is None:
                trap = trap or self.trap_params()
                rate = scattering_rate(trap, self.physics_constants())
                t1 = math.inf if rate == 0 else 1.0 / rate
            if math.isinf(t1):
                return RelaxationParams(t2=t2h, t2_homogeneous=t2h, w_eq=cfg.w_eq)
            # decay in total time: coherence is lost at the scattering rate over the whole 2*t1 echo
            factor = 1.0 if cfg.echo_decay_in_total_time else 2.0
            return RelaxationParams.scattering_limited(t1, t2h, cfg.w_eq, transverse_factor=factor)
        t2 = cfg.t2_s if cfg.t2_s is not None else t2h
        return RelaxationParams(t1=cfg.t1_s or math.inf, t2=t2, t2_homogeneous=t2h, w_eq=cfg.w_eq)

    def pulse_spec(self) -> PulseSpec:
        seq = self.sequence
        return PulseSpec(seq.omega_rabi_rad_s, seq.ideal_pulses, seq.pulse_phase_rad, seq.echo_phase_rad)

    def array_spec(self) -> ArraySpec:
        if self.array is None:
            raise ConfigError("this command needs an 'array' section")
        a = self.array
        return ArraySpec(a.rows, a.cols, a.pitch_m, a.site_waist_m, a.illumination_waist_m,
                         a.center_depth_k, a.diffraction_efficiency)

    def loading_params(self) -> LoadingParams:
        cfg = self.loading
        return LoadingParams(cfg.exponent, cfg.center_atoms, cfg.temperature_k,
                             cfg.depth_scaled_temperature, cfg.poisson_jitter)

    def detection_params(self) -> DetectionParams:
        if self.detection is None:
            raise ConfigError("this command needs a 'detection' section")
        values = self.detection.dict(exclude={"integration_radius_m"})
        return DetectionParams(**values)

    def integration_radius(self) -> float:
        if self.detection is None:
            raise ConfigError("this command needs a 'detection' section")
        return self.detection.integration_radius_m or 4.0 * self.detection.psf_sigma_m


def _key_line(text: str, loc: Tuple[Any, ...]) -> Optional[int]:
    """Line of the innermost key of a validation-error location"""
    pos = 0
    found = None
    for key in loc:
        if not isinstance(key, str) or key == "__root__":
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if match is None:
            break
        found = pos = match.start()
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def parse_config(text: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Parse and validate a JSON experiment configuration

    Syntax errors report line and column; schema errors report the dotted
    key path and, when it can be found, the line of the key.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", line=e.lineno)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object", line=1)
    return validate_config(raw, text, overrides)


def validate_config(raw: Dict[str, Any], text: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    merged = json.loads(json.dumps(raw))
    for dotted, value in (overrides or {}).items():
        node = merged
        *parents, leaf = dotted.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[leaf] = value
    try:
        return ExperimentConfig.parse_obj(merged)
    except ValidationError as e:
        first = e.errors()[0]
        path = ".".join(str(part) for part in first["loc"] if part != "__root__")
        line = _key_line(text, first["loc"]) if text else None
        where = f" (line {line})" if line else ""
        raise ConfigError(f"{path or 'config'}{where}: {first['msg']}", line=line)
