"""Baseline directional filters: WNG-constrained LS beamformer, oracle parametric mask,
mask and beamformer application."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .directivity import DirectivityPattern
from .dsp import FRAME_LEN, SAMPLE_RATE, Spectrogram, stft
from .errors import DesignError, InvalidArgumentError, OracleUnavailableError
from .geometry import SPEED_OF_SOUND, Doa, far_field_delays

MASK_CLIP_DB = 20.0
WNG_TOL_DB = 0.01


def stft_frequencies(frame_len=FRAME_LEN, sample_rate=SAMPLE_RATE):
    return np.arange(frame_len // 2 + 1) * sample_rate / frame_len


def default_angle_grid():
    return np.deg2rad(np.arange(360.0))


def steering_vectors(array, azimuths, freqs, elevation=0.0, c=SPEED_OF_SOUND):
    """Far-field steering vectors ``d[f, a, q] = exp(-j 2 pi f tau_q(theta_a))``."""
    azimuths = np.atleast_1d(np.asarray(azimuths, dtype=float))
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    tau = np.stack([far_field_delays(array, Doa(a, elevation), c) for a in azimuths])
    return np.exp(-2j * np.pi * freqs[:, None, None] * tau[None, :, :])


@dataclass
class BeamformerWeights:
    """Per-frequency weights ``w[f]``; the filter output is ``w[f]^H y[f, t]``."""

    weights: np.ndarray
    freqs: np.ndarray
    angle_grid: np.ndarray
    steering: Doa
    pattern: dict
    wng_db: np.ndarray
    residual: np.ndarray
    loading: np.ndarray

    @property
    def num_mics(self):
        return self.weights.shape[1]


def _constrained_ls(R, b, cvec, mu):
    """argmin ||D u - g||^2 + mu ||u||^2 subject to c^H u = 1 (with R = D^H D, b = D^H g)."""
    A = R + mu * np.eye(R.shape[0])
    Rb = np.linalg.solve(A, b)
    Rc = np.linalg.solve(A, cvec)
    lam = (1 - np.vdot(cvec, Rb)) / np.vdot(cvec, Rc)
    return Rb + lam * Rc


def _wng_db_of(u):
    # the distortionless constraint makes |w^H d_s| = 1
    return -10 * math.log10(float(np.real(np.vdot(u, u))))


def design_ls_beamformer(array, pattern: DirectivityPattern, freqs=None, angle_grid=None,
                         wng_min_db=-15.0, c=SPEED_OF_SOUND):
    """Least-squares fit of ``w^H d(theta)`` to the target pattern under a WNG floor.

    Each frequency solves the Tikhonov-loaded LS problem with the
    distortionless equality ``w^H d(theta_s) = 1``. The loading factor is the
    smallest one (found by bisection in log scale, to ``WNG_TOL_DB``) that
    meets ``wng_min_db``; WNG grows monotonically with the loading.
    """
    Q = array.num_mics
    wng_max = 10 * math.log10(Q)
    if wng_min_db > wng_max + 1e-9:
        raise DesignError(f"WNG constraint {wng_min_db} dB exceeds the {Q}-mic bound of {wng_max:.2f} dB")
    freqs = stft_frequencies() if freqs is None else np.asarray(freqs, dtype=float)
    angle_grid = default_angle_grid() if angle_grid is None else np.asarray(angle_grid, dtype=float)
    steer = pattern.steering
    target = pattern.evaluate(angle_grid, np.full_like(angle_grid, steer.elevation))
    D_all = steering_vectors(array, angle_grid, freqs, steer.elevation, c)
    ds_all = steering_vectors(array, [steer.azimuth], freqs, steer.elevation, c)[:, 0, :]

    F = len(freqs)
    U = np.zeros((F, Q), dtype=complex)
    loading = np.zeros(F)
    for k in range(F):
        ds = ds_all[k]
        # d_s^T u = 1  <=>  c^H u = 1 with c = conj(d_s); u = conj(w)
        cvec = np.conj(ds)
        if wng_min_db >= wng_max - 1e-12:
            U[k] = cvec / Q
            loading[k] = math.inf
            continue
        D = D_all[k]
        R = D.conj().T @ D
        b = D.conj().T @ target
        scale = float(np.real(np.trace(R))) / Q
        lo = 1e-10 * scale
        u = _constrained_ls(R, b, cvec, lo)
        if _wng_db_of(u) >= wng_min_db:
            U[k], loading[k] = u, lo
            continue
        hi = lo
        while True:
            hi *= 10.0
            u_hi = _constrained_ls(R, b, cvec, hi)
            if _wng_db_of(u_hi) >= wng_min_db:
                break
            if hi > 1e12 * scale:
                u_hi = cvec / Q
                break
        # invariant: WNG(lo) < target <= WNG(hi)
        for _ in range(200):
            if _wng_db_of(u_hi) - wng_min_db <= WNG_TOL_DB or hi / lo < 1 + 1e-12:
                break
            mid = math.sqrt(lo * hi)
            u_mid = _constrained_ls(R, b, cvec, mid)
            if _wng_db_of(u_mid) >= wng_min_db:
                hi, u_hi = mid, u_mid
            else:
                lo = mid
        U[k], loading[k] = u_hi, hi

    W = np.conj(U)
    resp = np.einsum("fq,faq->fa", U, D_all)
    residual = np.sum(np.abs(resp - target) ** 2, axis=1) / np.sum(target**2)
    wng_db = np.array([wng(W[k], array, freqs[k], steer, c) for k in range(F)])
    return BeamformerWeights(W, freqs, angle_grid, steer, pattern.to_dict(), wng_db, residual, loading)


def beampattern(weights, array, freqs=None, angle_grid=None, c=SPEED_OF_SOUND):
    """Complex response ``w[f]^H d(theta, f)`` of shape ``(F, A)``."""
    if isinstance(weights, BeamformerWeights):
        freqs = weights.freqs if freqs is None else freqs
        W = weights.weights
    else:
        W = np.atleast_2d(np.asarray(weights, dtype=complex))
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if W.shape[0] == 1 and len(freqs) > 1:
        W = np.repeat(W, len(freqs), axis=0)
    angle_grid = default_angle_grid() if angle_grid is None else np.asarray(angle_grid, dtype=float)
    D = steering_vectors(array, angle_grid, freqs, 0.0, c)
    return np.einsum("fq,faq->fa", np.conj(W), D)


def wng(weights, array, freq, steering, c=SPEED_OF_SOUND):
    """White noise gain in dB, ``|w^H d|^2 / (w^H w)``."""
    w = np.asarray(weights, dtype=complex)
    norm = float(np.real(np.vdot(w, w)))
    if norm == 0:
        raise InvalidArgumentError("white noise gain is undefined for all-zero weights")
    d = steering_vectors(array, [steering.azimuth], [freq], steering.elevation, c)[0, 0]
    gain = abs(np.vdot(w, d)) ** 2 / norm
    return -math.inf if gain == 0 else 10 * math.log10(gain)


def grating_lobe_onset(weights, array, within_db=6.0, c=SPEED_OF_SOUND):
    """Lowest design frequency whose beampattern has a grating lobe.

    A grating lobe is a local maximum of ``|response|`` over azimuth, outside
    the mainlobe (the region around the steering direction bounded by the
    first minima), within ``within_db`` of the response at the steering
    direction. Returns ``nan`` if no design frequency aliases.
    """
    grid = default_angle_grid()
    resp = np.abs(beampattern(weights, array, weights.freqs, grid, c))
    s = int(round(math.degrees(weights.steering.azimuth))) % 360
    for k, f in enumerate(weights.freqs):
        r = np.roll(resp[k], -s)  # steering at index 0
        main = r[0]
        if main <= 0:
            continue
        # walk outward from the look direction to the first local minimum on each side
        right = 1
        while right < 180 and r[right + 1] <= r[right]:
            right += 1
        left = 359
        while left > 180 and r[left - 1] <= r[left]:
            left -= 1
        side = r[right:left + 1]
        if side.size < 3:
            continue
        peaks = (side[1:-1] >= side[:-2]) & (side[1:-1] >= side[2:])
        if peaks.any() and 20 * math.log10(side[1:-1][peaks].max() / main) >= -within_db:
            return float(f)
    return math.nan


def apply_mask(mask, reference_spec):
    """``Z[f, t] = M[f, t] Y_1[f, t]``."""
    bins = reference_spec.bins if isinstance(reference_spec, Spectrogram) else np.asarray(reference_spec)
    m = np.asarray(mask.bins if isinstance(mask, Spectrogram) else mask)
    if m.shape != bins.shape:
        raise InvalidArgumentError(f"mask shape {m.shape} does not match spectrogram {bins.shape}")
    out = m * bins
    return reference_spec.with_bins(out) if isinstance(reference_spec, Spectrogram) else out


def apply_beamformer(weights, mic_specs):
    """``out[f, t] = w[f]^H y[f, t]`` for ``mic_specs`` of shape ``(Q, F, T)``."""
    W = weights.weights if isinstance(weights, BeamformerWeights) else np.asarray(weights)
    ys = mic_specs.bins if isinstance(mic_specs, Spectrogram) else np.asarray(mic_specs)
    if ys.ndim != 3 or ys.shape[0] != W.shape[1]:
        raise InvalidArgumentError(f"beamformer has {W.shape[1]} channels, input has shape {ys.shape}")
    if ys.shape[1] != W.shape[0]:
        raise InvalidArgumentError(f"beamformer has {W.shape[0]} bins, input has {ys.shape[1]}")
    out = np.einsum("fq,qft->ft", np.conj(W), ys)
    return mic_specs.with_bins(out) if isinstance(mic_specs, Spectrogram) else out


def beamformer_mask(output_bins, reference_bins, clip_db=MASK_CLIP_DB):
    """Equivalent mask ``out / ref`` with magnitude clipped at ``clip_db``; zero where ref is zero."""
    ref = np.asarray(reference_bins)
    out = np.asarray(output_bins)
    safe = np.abs(ref) > 1e-12
    m = np.where(safe, out / np.where(safe, ref, 1.0), 0.0)
    limit = 10 ** (clip_db / 20)
    mag = np.abs(m)
    return np.where(mag > limit, m * (limit / np.maximum(mag, 1e-300)), m)


def oracle_mask_from_stems(direct_specs, azimuths, pattern, elevations=None):
    """Real mask from the pattern gain of the dominant direct-path source per bin.

    ``direct_specs`` is ``(N, F, T)``; ``azimuths`` holds each source's DOA in
    radians. Ties (including all-silent bins) go to the lowest source index.
    """
    if direct_specs is None or len(direct_specs) == 0:
        raise OracleUnavailableError("oracle mask needs per-source direct-path stems")
    X = np.asarray(direct_specs)
    if X.ndim == 2:
        X = X[None]
    if len(azimuths) != X.shape[0]:
        raise InvalidArgumentError(f"{X.shape[0]} stems but {len(azimuths)} DOAs")
    el = np.zeros(len(azimuths)) if elevations is None else np.asarray(elevations, dtype=float)
    gains = np.abs(pattern.evaluate(np.asarray(azimuths, dtype=float), el))
    dom = np.argmax(np.abs(X), axis=0)
    return gains[dom]


def oracle_parametric_mask(render, pattern):
    """Oracle parametric mask for a rendered scene (needs its direct stems)."""
    stems = getattr(render, "direct_stems", None)
    if stems is None:
        raise OracleUnavailableError("scene render carries no direct-path stems")
    specs = stft(np.asarray(stems)).bins
    return oracle_mask_from_stems(specs, [d.azimuth for d in render.doas], pattern,
                                  [d.elevation for d in render.doas])
