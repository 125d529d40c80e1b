import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import null_space

from ndfkit.directivity import preset
from ndfkit.dsp import istft, stft
from ndfkit.errors import DesignError, InvalidArgumentError, OracleUnavailableError
from ndfkit.filters import (
    _constrained_ls,
    _wng_db_of,
    apply_beamformer,
    apply_mask,
    beamformer_mask,
    beampattern,
    default_angle_grid,
    design_ls_beamformer,
    grating_lobe_onset,
    oracle_mask_from_stems,
    oracle_parametric_mask,
    steering_vectors,
    stft_frequencies,
    wng,
)
from ndfkit.geometry import Doa, build_array
from ndfkit.metrics import sdr
from ndfkit.scenes import render_scene, sample_scene, synth_source

ARRAY = build_array(0.03)


@pytest.fixture(scope="module")
def dma1_design():
    return design_ls_beamformer(ARRAY, preset("dma1"), wng_min_db=-15.0)


@pytest.fixture(scope="module")
def dma3_design():
    return design_ls_beamformer(ARRAY, preset("dma3"), wng_min_db=-15.0)


def render(doas, pattern="dma1", snr=30.0, seed=0, environment="anechoic", distance=None):
    rng = np.random.default_rng(seed)
    spec = sample_scene("test", environment, preset(pattern), rng, doas_deg=doas, snr_db=snr, distance=distance)
    audio = [synth_source(2.0, np.random.default_rng([seed, k])) for k in range(len(doas))]
    return render_scene(spec, audio)


def test_wng_floor_met_everywhere(dma1_design):
    assert len(dma1_design.freqs) == 257
    assert np.all(dma1_design.wng_db >= -15.0 - 1e-9)
    # the bisection stops within its tolerance of the floor where it is active
    floor_loading = dma1_design.loading.min()
    active = np.isfinite(dma1_design.loading) & (dma1_design.loading > 2 * floor_loading)
    assert active.any()
    assert np.all(dma1_design.wng_db[active] <= -15.0 + 0.011)


def test_distortionless(dma1_design):
    resp = beampattern(dma1_design, ARRAY, angle_grid=np.array([0.0]))[:, 0]
    np.testing.assert_allclose(resp, 1.0, atol=1e-9)


def test_matches_null_space_solution(dma1_design):
    # re-solve selected bins at the chosen loading by eliminating the constraint
    grid = default_angle_grid()
    target = preset("dma1").evaluate(grid)
    for k in (5, 40, 128, 250):
        f, mu = dma1_design.freqs[k], dma1_design.loading[k]
        D = steering_vectors(ARRAY, grid, [f])[0]
        c = np.conj(steering_vectors(ARRAY, [0.0], [f])[0, 0])
        u0 = c / np.vdot(c, c)
        N = null_space(c.conj()[None, :])
        A = np.vstack([D @ N, math.sqrt(mu) * N])
        b = np.concatenate([target - D @ u0, -math.sqrt(mu) * u0])
        z = np.linalg.lstsq(A, b, rcond=None)[0]
        np.testing.assert_allclose(np.conj(dma1_design.weights[k]), u0 + N @ z, atol=1e-7)


def test_wng_monotone_in_loading():
    grid = default_angle_grid()
    target = preset("dma1").evaluate(grid)
    for f in (500.0, 2000.0, 6000.0):
        D = steering_vectors(ARRAY, grid, [f])[0]
        c = np.conj(steering_vectors(ARRAY, [0.0], [f])[0, 0])
        R, b = D.conj().T @ D, D.conj().T @ target
        values = [_wng_db_of(_constrained_ls(R, b, c, mu)) for mu in np.logspace(-8, 4, 60)]
        assert np.all(np.diff(values) >= -1e-9)


@settings(max_examples=20, deadline=None)
@given(st.floats(200, 7800), st.integers(0, 2**31 - 1))
def test_ls_local_optimality(f, seed):
    grid = default_angle_grid()
    target = preset("dma1").evaluate(grid)
    D = steering_vectors(ARRAY, grid, [f])[0]
    c = np.conj(steering_vectors(ARRAY, [0.0], [f])[0, 0])
    R, b = D.conj().T @ D, D.conj().T @ target
    u = _constrained_ls(R, b, c, 1e-12 * np.trace(R).real)
    best = np.sum(np.abs(D @ u - target) ** 2)
    rng = np.random.default_rng(seed)
    N = null_space(c.conj()[None, :])
    for _ in range(5):
        du = N @ (rng.standard_normal(3) + 1j * rng.standard_normal(3)) * 1e-3
        assert np.sum(np.abs(D @ (u + du) - target) ** 2) >= best - 1e-9


def test_delay_and_sum_limit():
    w = design_ls_beamformer(ARRAY, preset("dma1"), freqs=[1000.0, 4000.0], wng_min_db=10 * math.log10(4))
    d = steering_vectors(ARRAY, [0.0], [1000.0, 4000.0])[:, 0, :]
    np.testing.assert_allclose(w.weights, d / 4, atol=1e-12)
    np.testing.assert_allclose(w.wng_db, 10 * math.log10(4), atol=1e-9)


def test_infeasible_constraint():
    with pytest.raises(DesignError):
        design_ls_beamformer(ARRAY, preset("dma1"), wng_min_db=6.1)


def test_higher_order_worse_fit(dma1_design, dma3_design):
    assert np.mean(dma3_design.residual) > np.mean(dma1_design.residual)


def test_wng_examples():
    s = Doa(0.0)
    for f in (300.0, 3000.0):
        d = steering_vectors(ARRAY, [0.0], [f])[0, 0]
        assert wng(d / 4, ARRAY, f, s) == pytest.approx(6.0206, abs=1e-4)
        assert wng(np.eye(4)[0], ARRAY, f, s) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        wng(np.zeros(4), ARRAY, 1000.0, s)


def test_reference_only_is_omni():
    resp = beampattern(np.eye(4)[0], ARRAY, freqs=[250.0, 7000.0])
    np.testing.assert_allclose(np.abs(resp), 1.0, atol=1e-12)


def test_aliasing_at_12khz():
    w = design_ls_beamformer(ARRAY, preset("dma1"), freqs=[12000.0])
    assert grating_lobe_onset(w, ARRAY) == 12000.0
    lowband = design_ls_beamformer(ARRAY, preset("dma1"), freqs=[1000.0, 3000.0])
    assert math.isnan(grating_lobe_onset(lowband, ARRAY))


def test_apply_mask_examples(rng):
    spec = stft(rng.standard_normal(4000))
    Y = spec.bins
    assert np.array_equal(apply_mask(np.ones(Y.shape), spec).bins, Y)
    assert not np.any(apply_mask(np.zeros(Y.shape), Y))
    z = apply_mask(np.conj(Y) / np.abs(Y), Y)
    np.testing.assert_allclose(z.imag, 0.0, atol=1e-9)
    np.testing.assert_allclose(z.real, np.abs(Y), rtol=1e-12)
    with pytest.raises(InvalidArgumentError):
        apply_mask(np.ones((257, 3)), Y)


def test_apply_beamformer_reference_selection(rng):
    specs = stft(rng.standard_normal((4, 3000))).bins
    W = np.tile(np.eye(4)[0], (257, 1))
    np.testing.assert_array_equal(apply_beamformer(W, specs), specs[0])
    with pytest.raises(InvalidArgumentError):
        apply_beamformer(W, specs[:3])


def test_apply_beamformer_phase_invariance(dma1_design, rng):
    specs = stft(rng.standard_normal((4, 3000))).bins
    a = apply_beamformer(dma1_design.weights, specs)
    b = apply_beamformer(dma1_design.weights * np.exp(0.7j), specs)
    np.testing.assert_allclose(np.abs(a), np.abs(b), rtol=1e-12)


def _bf_sdr(design, r):
    return sdr(r.y_dir, istft(apply_beamformer(design, stft(r.mic_signals))))


def test_beamformer_noise_free_distortionless(dma1_design):
    # at 1.5 m the 1/r spread across the aperture (about 1 %) leaks through the
    # large low-band weights; a distant source removes that mismatch
    assert _bf_sdr(dma1_design, render([0.0], snr=math.inf, seed=3)) > 20.0
    assert _bf_sdr(dma1_design, render([0.0], snr=math.inf, seed=3, distance=100.0)) > 35.0


def predicted_output_sdr(design, render_):
    """Direct-path energy over the white-noise power the weights pass, sum_f ||w_f||^2 / frame."""
    w2 = np.sum(np.abs(design.weights) ** 2, axis=1)
    two_sided = (w2[0] + w2[-1] + 2 * np.sum(w2[1:-1])) / 512
    noise_var = np.mean(render_.noise**2)
    return 10 * np.log10(np.sum(render_.y_dir**2) / (noise_var * two_sided * render_.y_dir.size))


def test_beamformer_noise_gain_matches_wng(dma1_design):
    clean = _bf_sdr(dma1_design, render([0.0], snr=math.inf, seed=3))
    r = render([0.0], snr=30.0, seed=3)
    noise_only = predicted_output_sdr(dma1_design, r)
    combined = -10 * np.log10(10 ** (-clean / 10) + 10 ** (-noise_only / 10))
    assert _bf_sdr(dma1_design, r) == pytest.approx(combined, abs=0.3)


@pytest.mark.xfail(strict=True, reason="the -15 dB WNG floor amplifies low-band sensor noise ~31x and the "
                   "1.5 m near-field mismatch adds ~25 dB distortion; output lands near 19 dB")
def test_beamformer_on_look_direction_source_30db(dma1_design):
    r = render([0.0], snr=30.0, seed=3)
    out = istft(apply_beamformer(dma1_design, stft(r.mic_signals)))
    assert sdr(r.y_dir, out) > 20.0


def test_beamformer_mask_clip():
    ref = np.array([1.0, 1e-3, 0.0, 2.0])
    out = np.array([0.5, 1.0, 1.0, -2.0j])
    m = beamformer_mask(out, ref)
    np.testing.assert_allclose(m, [0.5, 10.0, 0.0, -1.0j])


def test_oracle_mask_single_source_on_axis():
    r = render([1.25], seed=1)
    pat = preset("dma1", 1.25)
    G = oracle_parametric_mask(r, pat)
    assert np.allclose(G, 1.0)
    spec = stft(r.reference)
    assert np.allclose(apply_mask(G, spec.bins), spec.bins)


def test_oracle_mask_rear_source_floor():
    r = render([180.0], seed=2)
    G = oracle_parametric_mask(r, preset("dma1"))
    assert np.allclose(G, 0.01)


def test_oracle_mask_disjoint_supports():
    X = np.zeros((2, 257, 10), dtype=complex)
    X[0, :100] = 1.0
    X[1, 100:] = 1.0
    X[1, 50, 5] = 5.0  # source 1 dominates one bin inside source 0's band
    pat = preset("dma1")
    az = np.deg2rad([30.0, 120.0])
    G = oracle_mask_from_stems(X, az, pat)
    g0, g1 = pat.evaluate(az[0]), pat.evaluate(az[1])
    brute = np.empty((257, 10))
    for f in range(257):
        for t in range(10):
            brute[f, t] = g0 if abs(X[0, f, t]) >= abs(X[1, f, t]) else g1
    np.testing.assert_array_equal(G, brute)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["dma1", "dma3", "dma6", "lobes", "steps"]), st.integers(0, 2**31 - 1))
def test_oracle_mask_range(name, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3, 20, 6)) + 1j * rng.standard_normal((3, 20, 6))
    G = oracle_mask_from_stems(X, rng.uniform(0, 2 * np.pi, 3), preset(name))
    assert np.all(G >= 0.01 - 1e-12) and np.all(G <= 1 + 1e-12)


def test_oracle_without_stems():
    with pytest.raises(OracleUnavailableError):
        oracle_mask_from_stems([], [], preset("dma1"))

    class Bare:
        pass

    with pytest.raises(OracleUnavailableError):
        oracle_parametric_mask(Bare(), preset("dma1"))


def test_stft_frequency_grid():
    f = stft_frequencies()
    assert len(f) == 257 and f[-1] == 8000.0
