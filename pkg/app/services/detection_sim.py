"""
Detection simulator
State-selective push-out, EMCCD fluorescence frame synthesis and
site-resolved aperture integration of register images.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from app.core.exceptions import InvalidArgumentError
from app.utils.random_streams import StreamPurpose, rng_stream

logger = logging.getLogger(__name__)

# Longer exposures leave the regime where spontaneous decay can be ignored
MAX_SAFE_EXPOSURE_S = 300e-6


@dataclass(frozen=True)
class DetectionParams:
    exposure_s: float = 300e-6
    photons_per_atom: float = 50.0
    psf_sigma_m: float = 3e-6
    pixel_pitch_m: float = 2e-6
    em_gain: float = 10.0
    read_noise: float = 10.0
    pushout_leakage: float = 0.0
    baseline: float = 100.0
    width: int = 128
    height: int = 128
    noise: bool = True

    def __post_init__(self):
        for name in ("exposure_s", "psf_sigma_m", "pixel_pitch_m"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be finite and > 0")
        for name in ("photons_per_atom", "read_noise", "baseline"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be finite and >= 0")
        if not (math.isfinite(self.em_gain) and self.em_gain >= 1):
            raise InvalidArgumentError("em_gain must be >= 1")
        if not 0.0 <= self.pushout_leakage <= 1.0:
            raise InvalidArgumentError("pushout_leakage must lie in [0, 1]")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("frame dimensions must be > 0")

    @property
    def counts_per_atom(self) -> float:
        return self.photons_per_atom * self.em_gain

    @property
    def pixel_edges_x(self) -> np.ndarray:
        return (np.arange(self.width + 1) - self.width / 2.0) * self.pixel_pitch_m

    @property
    def pixel_edges_y(self) -> np.ndarray:
        return (np.arange(self.height + 1) - self.height / 2.0) * self.pixel_pitch_m

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()


@dataclass
class Frame:
    """Pixel counts (height, width); float expectations when rendered noise-free"""

    counts: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2 or 0 in self.counts.shape:
            raise InvalidArgumentError("frame must be a non-empty 2-D array")
        if np.any(self.counts < 0):
            raise InvalidArgumentError("frame counts must be >= 0")

    @property
    def height(self) -> int:
        return int(self.counts.shape[0])

    @property
    def width(self) -> int:
        return int(self.counts.shape[1])

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.counts).tobytes()).hexdigest()


@dataclass
class ReadoutResult:
    indices: List[Tuple[int, int]]
    counts: np.ndarray
    populations: np.ndarray
    background: np.ndarray
    sigma: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "row": [index[0] for index in self.indices],
            "col": [index[1] for index in self.indices],
            "counts": self.counts,
            "population": self.populations,
        })


class DetectionSimulator:
    """
    Fluorescence readout of a trap register
    """

    def __init__(self, params: Optional[DetectionParams] = None):
        self.params = params or DetectionParams()

    def pushout_select(self, n_f2: int, n_f3: int, params: Optional[DetectionParams] = None,
                       seed: int = 0, stream: int = 0) -> int:
        """Atoms left after the push-out pulse: all F=2 plus leaked F=3"""
        params = params or self.params
        if n_f2 < 0 or n_f3 < 0:
            raise InvalidArgumentError("atom counts must be >= 0")
        if params.pushout_leakage == 0 or n_f3 == 0:
            return int(n_f2)
        rng = rng_stream(seed, 0, StreamPurpose.PUSHOUT, offset=stream)
        return int(n_f2) + int(rng.binomial(int(n_f3), params.pushout_leakage))

    def expected_image(self, sites: Sequence[Tuple[Sequence[float], float]],
                       params: Optional[DetectionParams] = None) -> np.ndarray:
        """Noise-free photoelectrons per pixel; each spot is a pixel-integrated Gaussian"""
        params = params or self.params
        edges_x, edges_y = params.pixel_edges_x, params.pixel_edges_y
        image = np.zeros((params.height, params.width))
        for position, atoms in sites:
            x0, y0 = float(position[0]), float(position[1])
            if not (edges_x[0] <= x0 <= edges_x[-1] and edges_y[0] <= y0 <= edges_y[-1]):
                raise InvalidArgumentError(
                    f"site at ({x0 * 1e6:.1f}, {y0 * 1e6:.1f}) um lies outside the field of view"
                )
            if atoms < 0:
                raise InvalidArgumentError("atom numbers must be >= 0")
            if atoms == 0:
                continue
            px = np.diff(ndtr((edges_x - x0) / params.psf_sigma_m))
            py = np.diff(ndtr((edges_y - y0) / params.psf_sigma_m))
            image += atoms * params.photons_per_atom * np.outer(py, px)
        return image

    def render_frame(self, sites: Sequence[Tuple[Sequence[float], float]],
                     params: Optional[DetectionParams] = None, seed: int = 0,
                     stream: int = 0,
                     purpose: StreamPurpose = StreamPurpose.FRAME) -> Frame:
        """
        Synthesize a fluorescence frame

        Args:
            sites: (position (x, y) in meters, surviving atoms) per site
            params: detection parameters
            seed: run seed
            stream: frame index within the run
            purpose: FRAME for signal exposures, REFERENCE for normalization

        Returns:
            Frame with EMCCD noise (shot noise, EM excess, read noise and
            baseline) or the float expectation when noise is disabled
        """
        params = params or self.params
        if params.exposure_s > MAX_SAFE_EXPOSURE_S:
            logger.warning(
                f"exposure {params.exposure_s * 1e6:.0f} us exceeds {MAX_SAFE_EXPOSURE_S * 1e6:.0f} us; "
                f"spontaneous decay during imaging is not modeled"
            )
        electrons = self.expected_image(sites, params)
        metadata = {"seed": seed, "stream": stream, "purpose": purpose.name.lower(),
                    "params_digest": params.digest(), "noise": params.noise}
        if not params.noise:
            return Frame(electrons * params.em_gain, metadata)

        rng = rng_stream(seed, 0, purpose, offset=stream)
        photo = rng.poisson(electrons)
        # EM register: gamma with the photoelectron count as shape doubles the shot variance
        amplified = rng.gamma(photo.astype(float), params.em_gain)
        amplified += rng.normal(0.0, params.read_noise, amplified.shape) if params.read_noise else 0.0
        counts = np.clip(np.rint(amplified + params.baseline), 0, None).astype(np.int64)
        return Frame(counts, metadata)

    def _pixel_centers(self, frame: Frame, params: DetectionParams) -> Tuple[np.ndarray, np.ndarray]:
        xs = (np.arange(frame.width) - frame.width / 2.0 + 0.5) * params.pixel_pitch_m
        ys = (np.arange(frame.height) - frame.height / 2.0 + 0.5) * params.pixel_pitch_m
        return np.meshgrid(xs, ys)

    def integrate_sites(self, frame: Frame, grid: np.ndarray, radius: float,
                        params: Optional[DetectionParams] = None,
                        reference_counts: Optional[np.ndarray] = None,
                        indices: Optional[List[Tuple[int, int]]] = None) -> ReadoutResult:
        """
        Background-subtracted aperture sums around known site positions

        The background is the median of an annulus from radius to
        min(1.5 * radius, nearest-neighbour distance - radius). Populations
        are counts / reference_counts, clamped to [0, 1 + 3 sigma].
        """
        params = params or self.params
        grid = np.atleast_2d(np.asarray(grid, dtype=float))
        if not (math.isfinite(radius) and radius > 0):
            raise InvalidArgumentError("integration radius must be > 0")
        if len(grid) > 1:
            diffs = grid[:, None, :] - grid[None, :, :]
            dist = np.sqrt(np.sum(diffs ** 2, axis=-1))
            min_dist = float(np.min(dist[np.triu_indices(len(grid), k=1)]))
            if 2 * radius >= min_dist:
                raise InvalidArgumentError(
                    f"integration disks overlap: radius {radius * 1e6:.2f} um, spacing {min_dist * 1e6:.2f} um"
                )
        else:
            min_dist = math.inf
        outer = min(1.5 * radius, min_dist - radius)

        xx, yy = self._pixel_centers(frame, params)
        data = frame.counts.astype(float)
        counts = np.empty(len(grid))
        background = np.empty(len(grid))
        n_pix = np.empty(len(grid))
        for k, (x0, y0) in enumerate(grid):
            r_sq = (xx - x0) ** 2 + (yy - y0) ** 2
            aperture = r_sq <= radius ** 2
            annulus = (r_sq > radius ** 2) & (r_sq <= outer ** 2)
            background[k] = float(np.median(data[annulus])) if annulus.any() else 0.0
            n_pix[k] = aperture.sum()
            counts[k] = float(data[aperture].sum() - n_pix[k] * background[k])

        if reference_counts is None:
            reference = np.full(len(grid), np.nan)
        else:
            reference = np.asarray(reference_counts, dtype=float)
            if reference.shape != counts.shape:
                raise InvalidArgumentError("reference counts must match the site grid")
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma = np.sqrt(2.0 * params.em_gain * np.clip(counts, 0, None)
                            + n_pix * params.read_noise ** 2) / reference
            populations = np.clip(counts / reference, 0.0, 1.0 + 3.0 * sigma)
        if indices is None:
            indices = [(0, k) for k in range(len(grid))]
        return ReadoutResult(list(indices), counts, populations, background, sigma)

    def atoms_from_counts(self, counts, params: Optional[DetectionParams] = None):
        params = params or self.params
        return np.asarray(counts, dtype=float) / params.counts_per_atom

    def readout_populations(self, frame: Frame, reference: Frame, grid: np.ndarray, radius: float,
                            params: Optional[DetectionParams] = None,
                            indices: Optional[List[Tuple[int, int]]] = None) -> ReadoutResult:
        """Populations normalized to a reference exposure taken before state preparation"""
        ref = self.integrate_sites(reference, grid, radius, params, indices=indices)
        ref_counts = np.where(ref.counts > 0, ref.counts, np.nan)
        return self.integrate_sites(frame, grid, radius, params, reference_counts=ref_counts, indices=indices)


# Global instance
detection_simulator = DetectionSimulator()


def pushout_select(n_f2: int, n_f3: int, params: DetectionParams, seed: int = 0, stream: int = 0) -> int:
    return detection_simulator.pushout_select(n_f2, n_f3, params, seed, stream)


def render_frame(sites, params: DetectionParams, seed: int = 0, stream: int = 0,
                 purpose: StreamPurpose = StreamPurpose.FRAME) -> Frame:
    return detection_simulator.render_frame(sites, params, seed, stream, purpose)


def integrate_sites(frame: Frame, grid, radius: float, params: DetectionParams,
                    reference_counts=None, indices=None) -> ReadoutResult:
    return detection_simulator.integrate_sites(frame, grid, radius, params, reference_counts, indices)
