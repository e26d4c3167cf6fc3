"""Tests for the simultaneous array Ramsey pipeline."""

import copy

import numpy as np
import pytest

from app.api.schemas import parse_config, validate_config
from app.core.exceptions import InvalidArgumentError
from app.data.experiment_presets import get_preset
from app.services.array_pipeline import ArrayRamseyPipeline, ArrayRun

SMALL_ARRAY = {
    "array.rows": 2,
    "array.cols": 2,
    "array.mc_atoms_per_site": 200,
    "sequence.points": 12,
}


@pytest.fixture(scope="module")
def small_run():
    config = validate_config(get_preset("array_4x4"), overrides=SMALL_ARRAY)
    return ArrayRamseyPipeline(config).run()


def test_needs_array_and_detection_sections():
    with pytest.raises(InvalidArgumentError):
        ArrayRamseyPipeline(parse_config("{}"))


def test_run_shapes(small_run):
    assert len(small_run.sites) == 4
    assert small_run.populations.shape == small_run.expected.shape == (4, 12)
    assert len(small_run.frames) == 12
    assert len(small_run.fits) == 4
    assert list(small_run.site_trace(0).columns) == ["time_s", "p0"]


def test_expected_populations_are_probabilities(small_run):
    assert np.all(small_run.expected >= -1e-9)
    assert np.all(small_run.expected <= 1.0 + 1e-9)


def test_every_site_carries_reference_counts(small_run):
    occupied = [k for k, site in enumerate(small_run.sites) if site.atom_number > 0]
    assert np.all(small_run.reference_counts[occupied] > 0)


def test_run_is_deterministic(small_run):
    config = validate_config(get_preset("array_4x4"), overrides=SMALL_ARRAY)
    again = ArrayRamseyPipeline(config).run(keep_frames=False)
    np.testing.assert_array_equal(again.populations, small_run.populations)
    assert again.frames == []


def test_summary_needs_three_fits():
    run = ArrayRun(sites=[], times=np.zeros(0), expected=np.zeros((0, 0)), populations=np.zeros((0, 0)),
                   counts=np.zeros((0, 0)), reference_counts=np.zeros((0, 0)))
    summary = run.summary()
    assert summary["fitted_sites"] == 0
    assert summary["shift_vs_depth"] is None
    assert summary["amplitude_vs_atoms"] is None


def test_site_fits_follow_fit_config(small_run):
    overrides = dict(SMALL_ARRAY, **{"fit.max_iter": 1, "fit.bootstrap": 10})
    pipeline = ArrayRamseyPipeline(validate_config(get_preset("array_4x4"), overrides=overrides))
    fits = pipeline.fit_sites(copy.copy(small_run))
    fitted = [f for f in fits if f.fit is not None]
    assert fitted
    for site_fit in fitted:
        assert site_fit.fit.iterations == 1
        assert not site_fit.fit.converged
        assert set(site_fit.to_dict()["bootstrap_sigmas"]) == set(site_fit.fit.params)
    assert small_run.fits is not fits
