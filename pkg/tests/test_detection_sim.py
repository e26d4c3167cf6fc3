"""Tests for push-out, frame synthesis and site-resolved readout."""

import logging
import math

import numpy as np
import pytest
from scipy.stats import linregress

from app.core.exceptions import InvalidArgumentError
from app.physics.register_array import ArraySpec, LoadingParams, load_array, site_grid
from app.services.detection_sim import DetectionParams, DetectionSimulator, Frame
from app.utils.random_streams import StreamPurpose

RADIUS = 12e-6
PAIR = np.array([[-27e-6, 0.0], [27e-6, 0.0]])


@pytest.fixture
def detector():
    return DetectionSimulator()


@pytest.fixture
def quiet():
    return DetectionParams(noise=False)


def shot_sigma(counts: float, params: DetectionParams, n_pixels: float = math.pi * (RADIUS / 2e-6) ** 2) -> float:
    return math.sqrt(2.0 * params.em_gain * counts + n_pixels * params.read_noise ** 2)


class TestPushout:
    def test_perfect_pushout_keeps_only_f2(self, detector):
        assert detector.pushout_select(120, 380) == 120

    def test_full_leakage_keeps_everything(self, detector):
        params = DetectionParams(pushout_leakage=1.0)
        assert detector.pushout_select(120, 380, params, seed=1) == 500

    def test_partial_leakage(self, detector):
        params = DetectionParams(pushout_leakage=0.1)
        kept = [detector.pushout_select(0, 1000, params, seed=3, stream=k) for k in range(200)]
        assert np.mean(kept) == pytest.approx(100.0, rel=0.05)

    def test_negative_atoms(self, detector):
        with pytest.raises(InvalidArgumentError):
            detector.pushout_select(-1, 5)


class TestFrames:
    def test_dark_frame_statistics(self, detector):
        frame = detector.render_frame([], seed=8)
        assert frame.counts.shape == (128, 128)
        assert frame.counts.mean() == pytest.approx(100.0, abs=0.5)
        assert frame.counts.std() == pytest.approx(10.0, abs=0.5)

    def test_photons_conserved_inside_field_of_view(self, detector, quiet):
        image = detector.expected_image([((0.0, 0.0), 500), ((20e-6, -14e-6), 37)], quiet)
        assert image.sum() == pytest.approx(537 * quiet.photons_per_atom, rel=1e-6)

    def test_noise_free_frame_is_gain_times_expectation(self, detector, quiet):
        frame = detector.render_frame([((0.0, 0.0), 10)], quiet)
        np.testing.assert_allclose(frame.counts, detector.expected_image([((0.0, 0.0), 10)], quiet) * quiet.em_gain)

    def test_frames_are_deterministic(self, detector):
        sites = [((0.0, 0.0), 200)]
        first = detector.render_frame(sites, seed=5, stream=2)
        second = detector.render_frame(sites, seed=5, stream=2)
        assert first.digest() == second.digest()
        assert detector.render_frame(sites, seed=5, stream=3).digest() != first.digest()
        reference = detector.render_frame(sites, seed=5, stream=2, purpose=StreamPurpose.REFERENCE)
        assert reference.digest() != first.digest()

    def test_site_outside_field_of_view(self, detector):
        with pytest.raises(InvalidArgumentError):
            detector.render_frame([((300e-6, 0.0), 10)])

    def test_long_exposure_warns(self, detector, caplog):
        params = DetectionParams(exposure_s=400e-6, noise=False)
        with caplog.at_level(logging.WARNING):
            detector.render_frame([((0.0, 0.0), 10)], params)
        assert "spontaneous decay" in caplog.text

    def test_frame_rejects_negative_counts(self):
        with pytest.raises(InvalidArgumentError):
            Frame(np.array([[1.0, -1.0]]))


class TestReadout:
    def test_single_spot_within_shot_noise(self, detector, quiet):
        sites = [((0.0, 0.0), 500)]
        grid = np.array([[0.0, 0.0]])
        expected = detector.integrate_sites(detector.render_frame(sites, quiet), grid, RADIUS, quiet).counts[0]
        noisy = detector.integrate_sites(detector.render_frame(sites, seed=21), grid, RADIUS).counts[0]
        assert expected == pytest.approx(500 * DetectionParams().counts_per_atom, rel=0.005)
        assert abs(noisy - expected) < 5.0 * shot_sigma(expected, DetectionParams())

    def test_noise_free_round_trip(self, detector, quiet):
        atoms = [37, 412]
        frame = detector.render_frame([(tuple(p), n) for p, n in zip(PAIR, atoms)], quiet)
        readout = detector.integrate_sites(frame, PAIR, RADIUS, quiet)
        np.testing.assert_allclose(detector.atoms_from_counts(readout.counts, quiet), atoms, rtol=0.005)

    def test_noise_free_linearity(self, detector, quiet):
        atoms = np.array([1, 2, 5, 10, 20, 30]) * 15
        counts = []
        for n in atoms:
            frame = detector.render_frame([((0.0, 0.0), int(n))], quiet)
            counts.append(detector.integrate_sites(frame, [[0.0, 0.0]], RADIUS, quiet).counts[0])
        assert linregress(atoms, counts).rvalue ** 2 > 0.999

    @pytest.mark.parametrize("ratio", [1, 10, 30])
    def test_atom_number_ratio(self, detector, ratio):
        params = DetectionParams()
        atoms = [30 * ratio, 30]
        frame = detector.render_frame([(tuple(p), n) for p, n in zip(PAIR, atoms)], params, seed=13, stream=ratio)
        counts = detector.integrate_sites(frame, PAIR, RADIUS, params).counts
        measured = counts[0] / counts[1]
        sigma = measured * math.hypot(shot_sigma(counts[0], params) / counts[0],
                                      shot_sigma(counts[1], params) / counts[1])
        assert abs(measured - ratio) <= 3.0 * sigma

    def test_overlapping_apertures(self, detector):
        frame = detector.render_frame([], DetectionParams(noise=False))
        with pytest.raises(InvalidArgumentError):
            detector.integrate_sites(frame, [[0.0, 0.0], [10e-6, 0.0]], RADIUS)

    def test_central_sites_are_brightest(self, detector):
        spec = ArraySpec()
        sites = load_array(spec, LoadingParams(), seed=4)
        frame = detector.render_frame([(site.position, site.atom_number) for site in sites], seed=4)
        readout = detector.integrate_sites(frame, site_grid(spec), RADIUS,
                                           indices=[site.index for site in sites])
        assert int(np.argmax(readout.counts)) in {5, 6, 9, 10}
        assert list(readout.to_frame().columns) == ["row", "col", "counts", "population"]

    def test_populations_against_reference(self, detector, quiet):
        reference = detector.render_frame([(tuple(p), 400) for p in PAIR], quiet)
        signal = detector.render_frame([(tuple(PAIR[0]), 100), (tuple(PAIR[1]), 300)], quiet)
        readout = detector.readout_populations(signal, reference, PAIR, RADIUS, quiet)
        np.testing.assert_allclose(readout.populations, [0.25, 0.75], rtol=1e-6)
