"""
Built-in experiment configurations
Raw JSON-shaped dictionaries; every preset is validated through the same
ExperimentConfig schema as a user file.
"""

import copy
import math
from typing import Any, Dict, List

TWO_PI = 2.0 * math.pi

# Bottom detuning 320 Hz + 4851 Hz - 357 Hz = 4814 Hz at 1 mK and 50 uT
SINGLE_TRAP_DELTA_RL = TWO_PI * 357.0
# Ramsey pulses must be short against the ~5 kHz fringe period to keep full contrast
RAMSEY_RABI_FREQUENCY = TWO_PI * 50e3

SINGLE_TRAP_RAMSEY: Dict[str, Any] = {
    "trap": {"depth_k": 1.0e-3, "waist_m": 1.7e-6, "wavelength_m": 815e-9},
    "field": {"bias_field_t": 50e-6},
    "ensemble": {"n_atoms": 20000, "t2_star_s": 4.08e-3, "prepared_fraction": 0.51},
    "sequence": {
        "omega_rabi_rad_s": RAMSEY_RABI_FREQUENCY,
        "delta_rl_rad_s": SINGLE_TRAP_DELTA_RL,
        "t_max_s": 12e-3,
        "points": 120,
    },
}

SINGLE_TRAP_ECHO: Dict[str, Any] = {
    "trap": {"depth_k": 1.0e-3, "waist_m": 1.7e-6, "wavelength_m": 815e-9},
    "field": {"bias_field_t": 50e-6},
    "ensemble": {"n_atoms": 20000, "t2_star_s": 4.08e-3, "prepared_fraction": 0.51},
    "relaxation": {"t1_s": 68e-3, "scattering_limited": True},
    "sequence": {
        "omega_rabi_rad_s": RAMSEY_RABI_FREQUENCY,
        "delta_rl_rad_s": SINGLE_TRAP_DELTA_RL,
        "t_max_s": 20e-3,
        "points": 400,
        "t1_s": 7.5e-3,
    },
}

ARRAY_4X4: Dict[str, Any] = {
    "trap": {"depth_k": 1.2e-3, "waist_m": 1.7e-6, "wavelength_m": 815e-9},
    "field": {"bias_field_t": 50e-6},
    "ensemble": None,
    "array": {
        "rows": 4,
        "cols": 4,
        "pitch_m": 54e-6,
        "illumination_waist_m": 194.6e-6,
        "center_depth_k": 1.2e-3,
        "mc_atoms_per_site": 2000,
    },
    "loading": {"exponent": 3.5, "center_atoms": 500, "temperature_k": 40e-6},
    "detection": {"pixel_pitch_m": 2e-6, "width": 128, "height": 128, "psf_sigma_m": 3e-6},
    "sequence": {
        "omega_rabi_rad_s": RAMSEY_RABI_FREQUENCY,
        "delta_rl_rad_s": 0.0,
        "t_max_s": 4e-3,
        "points": 160,
    },
}

RABI_CENTRAL_TRAP: Dict[str, Any] = {
    "trap": {"depth_k": 1.0e-3, "waist_m": 1.7e-6, "wavelength_m": 815e-9},
    "ensemble": None,
    "relaxation": {"t2_s": 3e-3, "w_eq": 0.0},
    "sequence": {
        "omega_rabi_rad_s": TWO_PI * 995.0,
        "t_max_s": 4e-3,
        "points": 801,
    },
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "single_trap_ramsey": SINGLE_TRAP_RAMSEY,
    "single_trap_echo": SINGLE_TRAP_ECHO,
    "array_4x4": ARRAY_4X4,
    "rabi_central_trap": RABI_CENTRAL_TRAP,
}


def get_preset_names() -> List[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> Dict[str, Any]:
    """Deep copy of a preset so callers may apply overrides in place"""
    if name not in PRESETS:
        raise KeyError(f"unknown preset '{name}'; available: {', '.join(get_preset_names())}")
    return copy.deepcopy(PRESETS[name])
