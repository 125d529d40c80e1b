"""STFT analysis/synthesis, loudness, sensor noise and STFT-domain bandpass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSignalError, InvalidArgumentError

SAMPLE_RATE = 16000
FRAME_LEN = 512
HOP = 256


def sqrt_hann(n=FRAME_LEN):
    # periodic Hann; its square overlap-adds to exactly one at 50 % overlap
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


@dataclass
class Spectrogram:
    """Complex STFT grid of shape ``(..., F, T)`` plus the framing needed to invert it."""

    bins: np.ndarray
    sample_rate: int = SAMPLE_RATE
    frame_len: int = FRAME_LEN
    hop: int = HOP
    length: int | None = None
    center: bool = True

    @property
    def num_bins(self):
        return self.bins.shape[-2]

    @property
    def num_frames(self):
        return self.bins.shape[-1]

    @property
    def frequencies(self):
        return np.arange(self.num_bins) * self.sample_rate / self.frame_len

    def with_bins(self, bins):
        return Spectrogram(bins, self.sample_rate, self.frame_len, self.hop, self.length, self.center)


def num_frames(n_samples, frame_len=FRAME_LEN, hop=HOP, center=True):
    if center:
        return 1 + math.ceil(n_samples / hop)
    return 1 + (n_samples - frame_len) // hop


def stft(signal, sample_rate=SAMPLE_RATE, frame_len=FRAME_LEN, hop=HOP, center=True):
    """Short-time Fourier transform along the last axis.

    With ``center=True`` the signal is padded by half a frame on both sides
    (and at the end up to a whole hop), so every input sample receives full
    overlap-add weight on resynthesis.
    """
    if sample_rate != SAMPLE_RATE:
        raise InvalidArgumentError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")
    x = np.asarray(signal, dtype=float)
    n = x.shape[-1]
    if center:
        T = num_frames(n, frame_len, hop, True)
        total = (T - 1) * hop + frame_len
        pad = [(0, 0)] * (x.ndim - 1) + [(frame_len // 2, total - n - frame_len // 2)]
        x = np.pad(x, pad)
    elif n < frame_len:
        raise InvalidArgumentError("signal shorter than one frame")
    T = 1 + (x.shape[-1] - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=-1)[..., ::hop, :][..., :T, :]
    bins = np.fft.rfft(frames * sqrt_hann(frame_len), axis=-1)
    return Spectrogram(np.swapaxes(bins, -1, -2), sample_rate, frame_len, hop, n, center)


def istft(spec, length=None):
    """Weighted overlap-add inverse of :func:`stft`."""
    F, T = spec.bins.shape[-2:]
    if F != spec.frame_len // 2 + 1 or spec.hop <= 0 or spec.hop > spec.frame_len:
        raise InvalidArgumentError(
            f"spectrogram with {F} bins is inconsistent with frame_len={spec.frame_len}, hop={spec.hop}")
    win = sqrt_hann(spec.frame_len)
    frames = np.fft.irfft(np.swapaxes(spec.bins, -1, -2), n=spec.frame_len, axis=-1) * win
    total = (T - 1) * spec.hop + spec.frame_len
    out = np.zeros(spec.bins.shape[:-2] + (total,))
    env = np.zeros(total)
    for t in range(T):
        sl = slice(t * spec.hop, t * spec.hop + spec.frame_len)
        out[..., sl] += frames[..., t, :]
        env[sl] += win**2
    out = out / np.where(env > 1e-10, env, 1.0)
    if spec.center:
        out = out[..., spec.frame_len // 2:]
    n = length if length is not None else spec.length
    if n is not None:
        if out.shape[-1] < n:
            out = np.pad(out, [(0, 0)] * (out.ndim - 1) + [(0, n - out.shape[-1])])
        out = out[..., :n]
    return out


def loudness_dbfs(signal):
    """Full-signal RMS level in dBFS (full scale = amplitude 1)."""
    rms = np.sqrt(np.mean(np.square(np.asarray(signal, dtype=float))))
    if rms == 0:
        return -math.inf
    return 20 * math.log10(rms)


def normalize_loudness(signal, target_dbfs):
    level = loudness_dbfs(signal)
    if not math.isfinite(level):
        raise DegenerateSignalError("cannot normalise the loudness of an all-zero signal")
    return np.asarray(signal, dtype=float) * 10 ** ((target_dbfs - level) / 20)


def select_loud_segment(signal, duration, sample_rate=SAMPLE_RATE, hop_s=0.25):
    """First ``duration``-second window whose loudness exceeds that of the whole clip.

    Falls back to the loudest window; clips shorter than ``duration`` are
    returned unchanged.
    """
    x = np.asarray(signal, dtype=float)
    n = int(round(duration * sample_rate))
    if len(x) <= n:
        return x
    overall = loudness_dbfs(x)
    step = max(1, int(round(hop_s * sample_rate)))
    starts = range(0, len(x) - n + 1, step)
    levels = [loudness_dbfs(x[s:s + n]) for s in starts]
    for s, lvl in zip(starts, levels):
        if lvl > overall:
            return x[s:s + n]
    best = int(np.argmax(levels))
    return x[starts[best]:starts[best] + n]


def fit_length(signal, n):
    """Trim or zero-pad to exactly ``n`` samples."""
    x = np.asarray(signal, dtype=float)[:n]
    return np.pad(x, (0, n - len(x)))


def add_sensor_noise(mic_signals, snr_db, rng_seed, return_noise=False):
    """Add independent white Gaussian noise to every channel.

    The per-channel noise power is the mean clean-mixture power over all
    channels divided by ``10 ** (snr_db / 10)``; each channel's realisation
    is rescaled to that power exactly. ``snr_db = inf`` leaves the input
    untouched.
    """
    y = np.atleast_2d(np.asarray(mic_signals, dtype=float))
    if y.shape[0] < 1:
        raise InvalidArgumentError("need at least one channel")
    if math.isinf(snr_db) and snr_db > 0:
        noise = np.zeros_like(y)
    else:
        rng = np.random.default_rng(rng_seed)
        noise = rng.standard_normal(y.shape)
        target = np.mean(y**2) / 10 ** (snr_db / 10)
        noise *= np.sqrt(target / np.mean(noise**2, axis=-1, keepdims=True))
    out = y + noise
    if np.ndim(mic_signals) == 1:
        out, noise = out[0], noise[0]
    return (out, noise) if return_noise else out


def band_bins(bands, frame_len=FRAME_LEN, sample_rate=SAMPLE_RATE):
    """Boolean selector over STFT bins for a union of ``(low_hz, high_hz)`` bands (inclusive)."""
    freqs = np.arange(frame_len // 2 + 1) * sample_rate / frame_len
    keep = np.zeros(freqs.shape, dtype=bool)
    for lo, hi in bands:
        if not hi > lo:
            raise InvalidArgumentError(f"empty band ({lo}, {hi}) Hz")
        keep |= (freqs >= lo - 1e-9) & (freqs <= hi + 1e-9)
    if not keep.any():
        raise InvalidArgumentError(f"bands {list(bands)} select no STFT bin")
    return keep


def center_band(center_hz, bandwidth_hz):
    if not 0 < center_hz < SAMPLE_RATE / 2:
        raise InvalidArgumentError(f"band centre {center_hz} Hz outside (0, {SAMPLE_RATE // 2}) Hz")
    if not bandwidth_hz > 0:
        raise InvalidArgumentError("bandwidth must be positive")
    return (center_hz - bandwidth_hz / 2, center_hz + bandwidth_hz / 2)


def bandpass_bands(signal, bands):
    """Brick-wall STFT-domain filter keeping the union of ``bands``."""
    spec = stft(signal)
    keep = band_bins(bands, spec.frame_len, spec.sample_rate)
    return istft(spec.with_bins(spec.bins * keep[:, None]))


def bandpass(signal, center_hz, bandwidth_hz=500.0, extra_bands=()):
    """Keep bins within ``center_hz +- bandwidth_hz / 2`` plus any ``extra_bands``."""
    return bandpass_bands(signal, [center_band(center_hz, bandwidth_hz), *extra_bands])
