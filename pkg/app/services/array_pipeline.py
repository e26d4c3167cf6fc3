"""
Array Ramsey pipeline
Simultaneous Ramsey measurement over a trap register: per-site Monte-Carlo
populations, projection noise, push-out, frame synthesis, site-resolved
readout and per-site fits.
"""

import logging
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import linregress, spearmanr
from tqdm import tqdm

from app.api.schemas import ExperimentConfig
from app.core.config import settings
from app.core.exceptions import InvalidArgumentError, TrapSimError
from app.physics.dephasing_ensemble import ThermalEnsemble, mc_ramsey
from app.physics.register_array import SiteState, array_state, load_array, site_grid
from app.services.detection_sim import DetectionSimulator, Frame
from app.services.fit_engine import FitOptions, FitResult, ModelKind, ModelSpec, fit_engine
from app.utils.random_streams import StreamPurpose, derive_seed, rng_stream

logger = logging.getLogger(__name__)

DEFAULT_PREPARED_FRACTION = 0.51


def progress_enabled() -> bool:
    return logger.isEnabledFor(logging.INFO) and sys.stderr.isatty()


@dataclass
class SiteFit:
    site: SiteState
    fit: Optional[FitResult]
    reference_counts: float
    skipped: str = ""
    bootstrap_sigmas: Optional[Dict[str, float]] = None

    @property
    def amplitude_counts(self) -> float:
        if self.fit is None:
            return math.nan
        return self.fit.params["amplitude"] * self.reference_counts

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            "site": self.site.to_dict(),
            "reference_counts": self.reference_counts,
            "amplitude_counts": None if self.fit is None else self.amplitude_counts,
        }
        if self.fit is None:
            payload["skipped"] = self.skipped
        else:
            payload["fit"] = self.fit.to_dict()
            payload["delta_hz"] = self.fit.params["delta"] / (2.0 * math.pi)
            if self.bootstrap_sigmas is not None:
                payload["bootstrap_sigmas"] = self.bootstrap_sigmas
        return payload


@dataclass
class ArrayRun:
    sites: List[SiteState]
    times: np.ndarray
    expected: np.ndarray  # (sites, times) Monte-Carlo P0
    populations: np.ndarray  # (sites, times) measured
    counts: np.ndarray
    reference_counts: np.ndarray
    frames: List[Frame] = field(default_factory=list)
    fits: List[SiteFit] = field(default_factory=list)

    def site_trace(self, k: int) -> pd.DataFrame:
        return pd.DataFrame({"time_s": self.times, "p0": self.populations[k]})

    def fits_payload(self) -> List[Dict[str, Any]]:
        return [site_fit.to_dict() for site_fit in self.fits]

    def summary(self) -> Dict[str, Any]:
        """Shift-vs-depth regression and amplitude/atom-number rank correlation"""
        fitted = [f for f in self.fits if f.fit is not None]
        summary: Dict[str, Any] = {
            "sites": len(self.sites),
            "fitted_sites": len(fitted),
            "converged_sites": sum(1 for f in fitted if f.fit.converged),
            "shift_vs_depth": None,
            "amplitude_vs_atoms": None,
        }
        if len(fitted) >= 3:
            depth_uk = np.array([f.site.depth_k * 1e6 for f in fitted])
            delta_hz = np.array([f.fit.params["delta"] / (2.0 * math.pi) for f in fitted])
            if np.ptp(depth_uk) > 0:
                line = linregress(depth_uk, delta_hz)
                summary["shift_vs_depth"] = {
                    "slope_hz_per_uk": float(line.slope),
                    "intercept_hz": float(line.intercept),
                    "slope_stderr": float(line.stderr),
                    "r_value": float(line.rvalue),
                }
            atoms = np.array([f.site.atom_number for f in fitted])
            amplitudes = np.array([f.amplitude_counts for f in fitted])
            rho, p_value = spearmanr(amplitudes, atoms)
            if np.isfinite(rho):
                summary["amplitude_vs_atoms"] = {"spearman_rho": float(rho), "p_value": float(p_value)}
        return summary

    def array_state(self) -> List[Dict[str, Any]]:
        return array_state(self.sites)


class ArrayRamseyPipeline:
    """
    Runs one simultaneous Ramsey experiment over the configured register
    """

    def __init__(self, config: ExperimentConfig, detector: Optional[DetectionSimulator] = None):
        if config.array is None or config.detection is None:
            raise InvalidArgumentError("array-ramsey needs 'array' and 'detection' sections")
        self.config = config
        self.spec = config.array_spec()
        self.params = config.detection_params()
        self.radius = config.integration_radius()
        self.detector = detector or DetectionSimulator(self.params)
        self.model = config.shift_model()
        self.field = config.field_params()
        self.seed = config.seed
        ensemble_cfg = config.ensemble
        self.prepared_fraction = (ensemble_cfg.prepared_fraction if ensemble_cfg is not None
                                  else DEFAULT_PREPARED_FRACTION)

    def load(self) -> List[SiteState]:
        return load_array(self.spec, self.config.loading_params(), self.seed,
                          trap_template=self.config.trap_params(), field=self.field, model=self.model)

    def site_populations(self, sites: List[SiteState], times: np.ndarray) -> np.ndarray:
        """Monte-Carlo P0 per site; sites without atoms stay at zero"""
        seq = self.config.sequence
        pulse = self.config.pulse_spec()
        expected = np.zeros((len(sites), times.size))
        for k, site in enumerate(sites):
            if site.atom_number == 0:
                continue
            ensemble = ThermalEnsemble(self.config.array.mc_atoms_per_site, site.temperature_k,
                                       site.trap, self.prepared_fraction)
            trace = mc_ramsey(ensemble, seq.delta_rl_rad_s, pulse, times,
                              relax=self.config.relaxation_params(site.trap),
                              seed=derive_seed(self.seed, k), model=self.model, field=self.field,
                              max_step=seq.max_step_s)
            expected[k] = trace.p0
            logger.debug(f"site {site.index}: {site.atom_number} atoms, Monte-Carlo trace done")
        return expected

    def survivors(self, sites: List[SiteState], expected: np.ndarray, step: int) -> List[int]:
        """Projection onto |0> (F=2) followed by push-out of F=3 atoms"""
        n_sites = len(sites)
        out = []
        for k, site in enumerate(sites):
            p0 = float(np.clip(expected[k, step], 0.0, 1.0))
            rng = rng_stream(self.seed, step, StreamPurpose.PROJECTION, offset=k)
            n_f2 = int(rng.binomial(site.atom_number, p0))
            out.append(self.detector.pushout_select(n_f2, site.atom_number - n_f2, self.params,
                                                    self.seed, stream=step * n_sites + k))
        return out

    def acquire(self, sites: List[SiteState], times: np.ndarray, expected: np.ndarray,
                keep_frames: bool = True) -> ArrayRun:
        grid = site_grid(self.spec)
        indices = [site.index for site in sites]
        populations = np.empty_like(expected)
        counts = np.empty_like(expected)
        reference_counts = np.empty_like(expected)
        frames = []
        for step in tqdm(range(times.size), desc="frames", disable=not progress_enabled()):
            kept = self.survivors(sites, expected, step)
            signal = self.detector.render_frame(
                [(site.position, n) for site, n in zip(sites, kept)],
                self.params, self.seed, stream=step, purpose=StreamPurpose.FRAME,
            )
            reference = self.detector.render_frame(
                [(site.position, site.atom_number) for site in sites],
                self.params, self.seed, stream=step, purpose=StreamPurpose.REFERENCE,
            )
            ref = self.detector.integrate_sites(reference, grid, self.radius, self.params, indices=indices)
            ref_counts = np.where(ref.counts > 0, ref.counts, np.nan)
            readout = self.detector.integrate_sites(signal, grid, self.radius, self.params,
                                                    reference_counts=ref_counts, indices=indices)
            populations[:, step] = readout.populations
            counts[:, step] = readout.counts
            reference_counts[:, step] = ref.counts
            if keep_frames:
                frames.append(signal)
        return ArrayRun(sites, times, expected, populations, counts, reference_counts, frames)

    def _fit_site(self, run: ArrayRun, k: int) -> SiteFit:
        site = run.sites[k]
        reference = float(np.nanmean(run.reference_counts[k]))
        y = run.populations[k]
        if site.atom_number == 0 or not np.all(np.isfinite(y)):
            return SiteFit(site, None, reference, skipped="no atoms at this site")
        model = ModelSpec(ModelKind.RAMSEY_EQ4)
        fit_config = self.config.fit
        options = FitOptions(max_iter=fit_config.max_iter)
        try:
            fit = fit_engine.fit_curve(model, run.times, y, options=options)
            sigmas = None
            if fit_config.bootstrap:
                seed = derive_seed(self.seed, k, int(StreamPurpose.BOOTSTRAP))
                sigmas = fit_engine.bootstrap_uncertainties(model, run.times, y, fit, fit_config.bootstrap,
                                                            seed, options)
        except TrapSimError as e:
            logger.warning(f"site {site.index}: fit skipped ({e})")
            return SiteFit(site, None, reference, skipped=str(e))
        return SiteFit(site, fit, reference, bootstrap_sigmas=sigmas)

    def fit_sites(self, run: ArrayRun) -> List[SiteFit]:
        """Independent per-site Ramsey fits, evaluated concurrently"""
        run.fits = Parallel(n_jobs=settings.N_JOBS, prefer="threads")(
            delayed(self._fit_site)(run, k) for k in range(len(run.sites))
        )
        return run.fits

    def run(self, times: Optional[np.ndarray] = None, keep_frames: bool = True) -> ArrayRun:
        seq = self.config.sequence
        if times is None:
            times = np.linspace(0.0, seq.t_max_s, seq.points)
        times = np.asarray(times, dtype=float)
        sites = self.load()
        logger.info(f"array-ramsey: {len(sites)} sites, {times.size} time points")
        expected = self.site_populations(sites, times)
        run = self.acquire(sites, times, expected, keep_frames)
        self.fit_sites(run)
        summary = run.summary()
        if summary["shift_vs_depth"]:
            logger.info(f"shift slope {summary['shift_vs_depth']['slope_hz_per_uk']:.3f} Hz/uK "
                        f"over {summary['fitted_sites']} sites")
        return run
