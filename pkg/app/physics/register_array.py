"""
Microlens trap register
Site geometry, Gaussian-illumination depth profile and per-site loading of
a 2-D dipole-trap array.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.exceptions import InvalidArgumentError
from app.physics.trap_model import (
    FieldParams,
    ShiftModel,
    TrapParams,
    total_resonance_shift,
)
from app.utils.random_streams import StreamPurpose, rng_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArraySpec:
    """Register geometry; lengths in meters at the atom plane, depth as U0/k_B in kelvin"""

    rows: int = 4
    cols: int = 4
    pitch_m: float = 54e-6
    site_waist_m: float = 1.7e-6
    illumination_waist_m: float = 194.6e-6
    center_depth_k: float = 1.2e-3
    diffraction_efficiency: float = 0.40

    def __post_init__(self):
        for name in ("rows", "cols"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise InvalidArgumentError(f"{name} must be an integer >= 1, got {value}")
        if not (math.isfinite(self.pitch_m) and self.pitch_m > 2 * self.site_waist_m > 0):
            raise InvalidArgumentError("pitch must exceed twice the site waist")
        if math.isnan(self.illumination_waist_m) or self.illumination_waist_m <= 0:
            raise InvalidArgumentError("illumination waist must be > 0 (or inf)")
        if not (math.isfinite(self.center_depth_k) and self.center_depth_k > 0):
            raise InvalidArgumentError("center depth must be finite and > 0")
        if not 0 < self.diffraction_efficiency <= 1:
            raise InvalidArgumentError("diffraction efficiency must lie in (0, 1]")

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class LoadingParams:
    """Population falls as (depth/center_depth)**exponent from center_atoms"""

    exponent: float = 3.5
    center_atoms: float = 500.0
    temperature_k: float = 40e-6
    depth_scaled_temperature: bool = False
    poisson_jitter: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.exponent) and self.exponent >= 0):
            raise InvalidArgumentError("loading exponent must be finite and >= 0")
        if not (math.isfinite(self.center_atoms) and self.center_atoms >= 0):
            raise InvalidArgumentError("center_atoms must be finite and >= 0")
        if not (math.isfinite(self.temperature_k) and self.temperature_k >= 0):
            raise InvalidArgumentError("temperature must be finite and >= 0")


@dataclass(frozen=True)
class SiteState:
    index: Tuple[int, int]
    position: Tuple[float, float]
    depth_k: float
    atom_number: int
    temperature_k: float
    resonance_shift: float
    trap: TrapParams
    power_fraction: float = math.nan

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": list(self.index),
            "position_m": list(self.position),
            "depth_k": self.depth_k,
            "atoms": self.atom_number,
            "shift_hz": self.resonance_shift / (2.0 * math.pi),
            "power_fraction": self.power_fraction,
        }


def site_indices(spec: ArraySpec) -> List[Tuple[int, int]]:
    return [(row, col) for row in range(spec.rows) for col in range(spec.cols)]


def site_grid(spec: ArraySpec) -> np.ndarray:
    """(rows*cols, 2) positions (x, y), row-major, centered on the optical axis"""
    cols = (np.arange(spec.cols) - (spec.cols - 1) / 2.0) * spec.pitch_m
    rows = (np.arange(spec.rows) - (spec.rows - 1) / 2.0) * spec.pitch_m
    x, y = np.meshgrid(cols, rows)
    return np.column_stack([x.ravel(), y.ravel()])


def site_depths(spec: ArraySpec) -> np.ndarray:
    """center_depth * exp(-2 r^2 / w_ill^2) at every site"""
    positions = site_grid(spec)
    if math.isinf(spec.illumination_waist_m):
        return np.full(len(positions), spec.center_depth_k)
    r_sq = np.sum(positions ** 2, axis=1)
    return spec.center_depth_k * np.exp(-2.0 * r_sq / spec.illumination_waist_m ** 2)


def site_power_fractions(spec: ArraySpec) -> np.ndarray:
    """
    Share of the incident trap light focused into each site

    Depth scales with focused power, so the diffracted fraction is split in
    proportion to the site depths. Only ratios are meaningful; absolute
    depths come from center_depth_k.
    """
    depths = site_depths(spec)
    return spec.diffraction_efficiency * depths / depths.sum()


def expected_atoms(spec: ArraySpec, loading: LoadingParams) -> np.ndarray:
    return loading.center_atoms * (site_depths(spec) / spec.center_depth_k) ** loading.exponent


def load_array(spec: ArraySpec, loading: LoadingParams, seed: int,
               trap_template: Optional[TrapParams] = None,
               field: Optional[FieldParams] = None,
               model: Optional[ShiftModel] = None) -> List[SiteState]:
    """
    Populate every site

    Atom numbers are Poisson draws around the expected population (or the
    rounded expectation with jitter off); each site draws from its own
    seeded stream.
    """
    trap_template = trap_template or TrapParams(depth_k=spec.center_depth_k, waist_m=spec.site_waist_m)
    field = field or FieldParams()
    model = model or ShiftModel()

    positions = site_grid(spec)
    depths = site_depths(spec)
    means = expected_atoms(spec, loading)
    fractions = site_power_fractions(spec)
    sites = []
    for k, (index, position, depth, mean, fraction) in enumerate(
            zip(site_indices(spec), positions, depths, means, fractions)):
        if loading.poisson_jitter:
            atoms = int(rng_stream(seed, 0, StreamPurpose.LOADING, offset=k).poisson(mean))
        else:
            atoms = int(round(mean))
        temperature = loading.temperature_k
        if loading.depth_scaled_temperature:
            temperature *= depth / spec.center_depth_k
        trap = TrapParams(depth_k=float(depth), waist_m=spec.site_waist_m,
                          wavelength_m=trap_template.wavelength_m, delta_eff=trap_template.delta_eff)
        sites.append(SiteState(
            index=index,
            position=(float(position[0]), float(position[1])),
            depth_k=float(depth),
            atom_number=atoms,
            temperature_k=temperature,
            resonance_shift=total_resonance_shift(trap, field, model),
            trap=trap,
            power_fraction=float(fraction),
        ))
    logger.info(
        f"Loaded {spec.rows}x{spec.cols} register: {sum(s.atom_number for s in sites)} atoms, "
        f"depths {depths.min() * 1e6:.1f}-{depths.max() * 1e6:.1f} uK"
    )
    return sites


def array_state(sites: List[SiteState]) -> List[Dict[str, Any]]:
    return [site.to_dict() for site in sites]
