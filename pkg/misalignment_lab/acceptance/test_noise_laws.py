import itertools
import math

import numpy as np
import pytest

from .. import analysis, conftest, constants
from ..analysis import MisalignmentSpec, NoiseSpec, TrialConfig, WeightsMode
from .conftest import TRIALS

pytestmark = conftest.slow

MODES = [pytest.param(mode, id=mode.value) for mode in WeightsMode]


@pytest.mark.parametrize("mode", MODES)
def test_error_bound_over_a_million_trials(mode):
    violations = 0.0
    settings = list(itertools.product((16, 64, 128), (4, 16), (0.5, 1.0, 2.0)))
    trials = math.ceil(1_000_000 / len(settings))
    for d, n, sigma in settings:
        cfg = TrialConfig(d=d, n=n, n_trials=trials, seed=0, weights_mode=mode)
        violations += analysis.lemma1_check(cfg, NoiseSpec(sigma))
    assert violations == 0.0


@pytest.mark.parametrize("d", [16, 32, 64, 128])
@pytest.mark.parametrize("mode", MODES)
def test_mean_squared_error(mode, d):
    cfg = TrialConfig(d=d, n=16, n_trials=TRIALS, seed=0, weights_mode=mode)
    estimate = analysis.lemma2_error(cfg, NoiseSpec(1.0))
    assert estimate.rel_error < constants.LEMMA2_TOLERANCE
    if mode is WeightsMode.PEAKED:
        assert estimate.theoretical == pytest.approx(d)
    if mode is WeightsMode.UNIFORM:
        assert estimate.theoretical == pytest.approx(d / 16)


def test_standard_error_shrinks_with_trials():
    """Doubling the trial count divides the standard error by about sqrt(2)."""
    ratios = []
    for seed in range(10):
        small = analysis.lemma2_error(TrialConfig(d=32, n=16, n_trials=20_000, seed=seed), NoiseSpec(1.0))
        large = analysis.lemma2_error(TrialConfig(d=32, n=16, n_trials=40_000, seed=seed), NoiseSpec(1.0))
        ratios.append(small.std_error / large.std_error)
    assert np.mean(ratios) == pytest.approx(math.sqrt(2), rel=0.2)


def test_snr_crosses_one_at_unit_sigma():
    sigmas = [round(0.1 * step, 10) for step in range(1, 21)]
    sweep = analysis.snr_sweep((32, 64, 128), sigmas, TrialConfig(d=32, n=16, n_trials=TRIALS))
    assert sweep.max_crossing_error() < constants.CROSSING_TOLERANCE
    assert sweep.max_spread() < constants.CROSSING_TOLERANCE
    for d in (32, 64, 128):
        assert not math.isnan(sweep.crossings[d])


def test_gamma_headline_value():
    cfg = TrialConfig(d=64, n=16, n_trials=TRIALS, weights_mode=WeightsMode.PEAKED)
    estimate = analysis.gamma_estimate(cfg, MisalignmentSpec.from_norms(64, 64.0, 0.0))
    assert estimate.theoretical == 128.0
    assert estimate.rel_error < constants.GAMMA_TOLERANCE


@pytest.mark.parametrize("shift", [0.0, 32.0, 128.0])
def test_gamma_is_affine_in_d(shift):
    d_values = [16, 32, 64, 128]
    gammas = [
        analysis.gamma_estimate(
            TrialConfig(d=d, n=16, n_trials=TRIALS, weights_mode=WeightsMode.PEAKED),
            MisalignmentSpec.from_norms(d, 0.0, shift),
        ).empirical
        for d in d_values
    ]
    slope, intercept = analysis.affine_fit(d_values, gammas)
    assert slope == pytest.approx(2.0, abs=0.1)
    assert abs(intercept - shift) < constants.GAMMA_TOLERANCE * max(shift, 2.0 * d_values[0])


@pytest.mark.parametrize("mode", MODES)
def test_gamma_general_form(mode):
    cfg = TrialConfig(d=64, n=16, n_trials=TRIALS, weights_mode=mode)
    estimate = analysis.gamma_estimate(cfg, MisalignmentSpec.from_norms(64, 0.0, 32.0))
    assert estimate.general_rel_error < constants.GAMMA_TOLERANCE


def test_misaligned_snr_falls_with_d():
    snrs = [
        analysis.misaligned_snr(
            TrialConfig(d=d, n=16, n_trials=TRIALS, weights_mode=WeightsMode.PEAKED),
            MisalignmentSpec.from_norms(d, 64.0, 16.0),
        ).empirical
        for d in (16, 32, 64, 128)
    ]
    assert all(a > b for a, b in zip(snrs, snrs[1:])), snrs


@pytest.mark.parametrize("heads", [2, 4])
@pytest.mark.parametrize(
    "mode", [pytest.param(WeightsMode.UNIFORM, id="uniform"), pytest.param(WeightsMode.PEAKED, id="peaked")]
)
def test_multi_head_forms(heads, mode):
    cfg = TrialConfig(d=64, n=16, n_trials=TRIALS, heads=heads, weights_mode=mode)
    result = analysis.mha_variants(cfg, NoiseSpec(1.0), MisalignmentSpec.from_norms(64, 0.0, 32.0))
    assert result.error.rel_error < constants.GAMMA_TOLERANCE
    assert result.gamma.general_rel_error < constants.GAMMA_TOLERANCE
    if mode is WeightsMode.PEAKED:
        assert result.gamma.rel_error < constants.GAMMA_TOLERANCE
    else:
        assert result.error.theoretical == pytest.approx(4.0)
