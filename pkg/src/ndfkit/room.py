"""Shoebox image-source RIRs for omnidirectional and virtual directional receivers.

Images are indexed per axis by ``i in [-k, k]``; index ``i`` reflects
``|i|`` times off the two walls orthogonal to that axis. An image-source set
of order ``k`` therefore holds ``(2k + 1) ** 3`` images. Every image
contributes ``r ** n / (4 pi d)`` at delay ``d / c`` through an 81-tap
Hann-windowed sinc fractional-delay kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from numba import njit
from scipy.signal import butter, sosfilt

from .errors import InfeasibleRoomError, InvalidArgumentError
from .geometry import SPEED_OF_SOUND

FS = 16000
KERNEL_HALF = 40
MAX_IMAGES = 20_000_000
DIRECT_WINDOW = 2.5e-3
SABINE_CONSTANT = 0.161


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room. ``rt60 == 0`` marks an anechoic (wall-free) environment.

    ``reflection_model`` selects how the uniform wall reflection coefficient
    is derived from ``rt60``: ``"calibrated"`` (default) matches the decay of
    the simulated image set to ``rt60``; ``"sabine"`` uses the plain Sabine
    inversion. An explicit ``reflection`` overrides both.
    """

    dimensions: tuple
    rt60: float
    reflection: float | None = None
    reflection_model: str = "calibrated"

    def __post_init__(self):
        dims = tuple(float(x) for x in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise InvalidArgumentError(f"room dimensions must be three positive lengths, got {self.dimensions!r}")
        object.__setattr__(self, "dimensions", dims)
        if self.rt60 < 0:
            raise InvalidArgumentError("rt60 must be non-negative")

    @property
    def anechoic(self):
        return self.rt60 == 0

    @property
    def volume(self):
        L, W, H = self.dimensions
        return L * W * H

    @property
    def surface(self):
        L, W, H = self.dimensions
        return 2 * (L * W + L * H + W * H)

    @property
    def absorption(self):
        """Uniform Sabine absorption coefficient."""
        return SABINE_CONSTANT * self.volume / (self.surface * self.rt60)

    def reflection_coefficient(self, fs=FS, c=SPEED_OF_SOUND):
        if self.reflection is not None:
            return float(self.reflection)
        if self.anechoic:
            return 0.0
        if self.reflection_model == "sabine":
            return rt60_to_reflection(self)
        return calibrated_reflection(self.dimensions, self.rt60, fs, c)

    def contains(self, pos, margin=0.0):
        p = np.asarray(pos, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dimensions) - margin))

    def to_dict(self):
        return {"dimensions": list(self.dimensions), "rt60": self.rt60, "reflection": self.reflection,
                "reflection_model": self.reflection_model}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dimensions"]), float(d["rt60"]), d.get("reflection"), d.get("reflection_model", "calibrated"))


def rt60_to_reflection(room):
    """Sabine inversion: ``|r| = sqrt(1 - alpha)`` with ``alpha = 0.161 V / (S T60)``."""
    if not room.rt60 > 0:
        raise InvalidArgumentError("rt60 must be positive to derive a reflection coefficient")
    alpha = room.absorption
    if alpha >= 1.0:
        raise InfeasibleRoomError(
            f"RT60 {room.rt60} s too short for room {room.dimensions}: Sabine absorption {alpha:.3f} >= 1")
    return math.sqrt(1.0 - alpha)


def auto_max_order(room, c=SPEED_OF_SOUND):
    if room is None or room.anechoic:
        return 0
    return int(math.ceil(c * room.rt60 / min(room.dimensions))) + 1


def rir_length(room, distance, fs=FS, c=SPEED_OF_SOUND):
    rt60 = 0.0 if room is None else room.rt60
    return int(math.ceil(max(1.2 * rt60, distance / c + 0.01) * fs))


def image_sources(room, source_pos, max_order):
    """Image positions ``(M, 3)`` and their total reflection counts ``(M,)``.

    ``room=None`` (or an anechoic room) yields only the source itself.
    """
    src = np.asarray(source_pos, dtype=float)
    if room is None or room.anechoic or max_order == 0:
        return src[None, :].copy(), np.zeros(1, dtype=int)
    idx = np.arange(-max_order, max_order + 1)
    coords = []
    for axis in range(3):
        L = room.dimensions[axis]
        coords.append(np.where(idx % 2 == 0, idx * L + src[axis], (idx + 1) * L - src[axis]))
    X, Y, Z = np.meshgrid(*coords, indexing="ij")
    NX, NY, NZ = np.meshgrid(*(np.abs(idx),) * 3, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    return pos, (NX + NY + NZ).ravel()


def _check_inside(room, *points):
    if room is None or room.anechoic:
        return
    for p in points:
        if not room.contains(p):
            raise InvalidArgumentError(f"position {np.asarray(p).tolist()} is not strictly inside room {room.dimensions}")


@njit(cache=True)
def _accumulate(base, frac, amplitude_sets, out):
    half = KERNEL_HALF
    a = np.pi / (half + 1)
    n_out = out.shape[1]
    taps = np.arange(-half, half + 1)
    cos_m = np.cos(a * taps)
    sin_m = np.sin(a * taps)
    for i in range(base.shape[0]):
        f = frac[i]
        s = np.sin(np.pi * f)
        cf = np.cos(a * f)
        sf = np.sin(a * f)
        b = base[i] + half
        for m in range(-half, half + 1):
            p = b + m
            if p < 0 or p >= n_out:
                continue
            x = m - f
            if abs(x) < 1e-12:
                sinc = 1.0
            elif m % 2 == 0:
                # sin(pi (m - f)) = -(-1)^m sin(pi f)
                sinc = -s / (np.pi * x)
            else:
                sinc = s / (np.pi * x)
            k = sinc * 0.5 * (1.0 + cos_m[m + half] * cf + sin_m[m + half] * sf)
            for j in range(amplitude_sets.shape[0]):
                out[j, p] += k * amplitude_sets[j, i]


def _fractional_delay_sum(delays, amplitude_sets, length):
    """Sum windowed-sinc pulses at fractional sample ``delays``.

    ``amplitude_sets`` has shape ``(S, M)``; returns ``(S, length)``. All
    sets share one kernel evaluation, so a set of ones and a set of pattern
    gains go through identical arithmetic.
    """
    amplitude_sets = np.ascontiguousarray(np.atleast_2d(amplitude_sets), dtype=np.float64)
    delays = np.asarray(delays, dtype=np.float64)
    base = np.rint(delays).astype(np.int64)
    frac = delays - base
    out = np.zeros((amplitude_sets.shape[0], length + 2 * KERNEL_HALF + 1))
    _accumulate(base, frac, amplitude_sets, out)
    return out[:, KERNEL_HALF:KERNEL_HALF + length]


def _arrival_angles(vectors, distances):
    theta = np.arctan2(vectors[:, 1], vectors[:, 0]) % (2 * np.pi)
    phi = np.arcsin(np.clip(vectors[:, 2] / np.maximum(distances, 1e-300), -1.0, 1.0))
    return theta, phi


def render_receivers(room, source_pos, receivers, patterns=(), max_order=None, length=None,
                     fs=FS, c=SPEED_OF_SOUND):
    """Impulse responses for several receivers sharing one image set.

    ``receivers`` is a sequence of positions. ``patterns`` is a sequence of
    ``(receiver_index, pattern)`` pairs; each adds a directivity-weighted
    response at that receiver. Returns ``(omni (R, L), vdm (P, L))``.
    """
    src = np.asarray(source_pos, dtype=float)
    receivers = np.atleast_2d(np.asarray(receivers, dtype=float))
    _check_inside(room, src, *receivers)
    if max_order is None:
        max_order = auto_max_order(room, c)
    if max_order < 0:
        raise InvalidArgumentError("max_order must be non-negative")
    if length is None:
        length = rir_length(room, float(np.max(np.linalg.norm(receivers - src, axis=1))), fs, c)
    images, n_refl = image_sources(room, src, max_order)
    # drop images that cannot reach any receiver within the RIR length
    centre = receivers.mean(axis=0)
    reach = (length + KERNEL_HALF) / fs * c + float(np.max(np.linalg.norm(receivers - centre, axis=1)))
    off = images - centre[None, :]
    keep = np.einsum("ij,ij->i", off, off) < reach**2
    images, n_refl = images[keep], n_refl[keep]
    r = room.reflection_coefficient(fs, c) if (room is not None and not room.anechoic) else 0.0
    gain = r ** n_refl if max_order > 0 else np.ones(len(n_refl))
    omni = np.zeros((len(receivers), length))
    vdm = np.zeros((len(patterns), length))
    for ri, rec in enumerate(receivers):
        v = images - rec[None, :]
        d = np.sqrt(np.einsum("ij,ij->i", v, v))
        near = d / c * fs < length + KERNEL_HALF
        v, d = v[near], d[near]
        amp = gain[near] / (4 * np.pi * d)
        sets = [amp * 1.0]
        owners = [pi for pi, (idx, _) in enumerate(patterns) if idx == ri]
        if owners:
            theta, phi = _arrival_angles(v, d)
        for pi in owners:
            sets.append(amp * patterns[pi][1].evaluate(theta, phi))
        out = _fractional_delay_sum(d / c * fs, np.stack(sets), length)
        omni[ri] = out[0]
        for j, pi in enumerate(owners):
            vdm[pi] = out[j + 1]
    return omni, vdm


def simulate_rir(room, source_pos, mic_pos, max_order=None, length=None, fs=FS, c=SPEED_OF_SOUND):
    """Omnidirectional RIR. ``room=None`` renders the free-field direct path."""
    omni, _ = render_receivers(room, source_pos, [mic_pos], (), max_order, length, fs, c)
    return omni[0]


def simulate_vdm_rir(room, source_pos, vdm_pos, pattern, max_order=None, length=None, fs=FS, c=SPEED_OF_SOUND):
    """RIR of a virtual directional microphone: each image weighted by the pattern gain
    in its arrival direction."""
    _, vdm = render_receivers(room, source_pos, [vdm_pos], [(0, pattern)], max_order, length, fs, c)
    return vdm[0]


def direct_window(direct_delay, fs=FS, window=DIRECT_WINDOW):
    center = int(np.rint(direct_delay * fs))
    w = int(np.rint(window * fs))
    return center - w, center + w


def split_direct_reverb(rir, direct_delay, fs=FS, window=DIRECT_WINDOW):
    """Partition an RIR into the samples around the direct arrival and the rest."""
    rir = np.asarray(rir)
    lo, hi = direct_window(direct_delay, fs, window)
    direct = np.zeros_like(rir)
    lo_c, hi_c = max(lo, 0), min(hi + 1, rir.shape[-1])
    direct[..., lo_c:hi_c] = rir[..., lo_c:hi_c]
    return direct, rir - direct


def image_count(max_order):
    return (2 * max_order + 1) ** 3


def _fit_decay(edc_db, fs, start_db=-5.0, stop_db=-25.0):
    below_start = np.nonzero(edc_db <= start_db)[0]
    below_stop = np.nonzero(edc_db <= stop_db)[0]
    if below_start.size == 0 or below_stop.size == 0:
        return math.inf
    i0, i1 = below_start[0], below_stop[0]
    if i1 <= i0 + 2:
        return 0.0
    t = np.arange(i0, i1) / fs
    slope = np.polyfit(t, edc_db[i0:i1], 1)[0]
    return -60.0 / slope if slope < 0 else math.inf


def schroeder_edc(rir):
    energy = np.cumsum(np.asarray(rir, dtype=float)[::-1] ** 2)[::-1]
    return 10 * np.log10(energy / energy[0] + 1e-300)


def estimate_t60(rir, fs=FS, highpass_hz=100.0, start_db=-5.0, stop_db=-25.0):
    """Reverberation time from a linear fit to the Schroeder energy decay curve.

    The RIR is DC-blocked first: image amplitudes are all positive, and their
    coherent low-frequency build-up would otherwise flatten the tail.
    """
    h = np.asarray(rir, dtype=float)
    if highpass_hz:
        h = sosfilt(butter(4, highpass_hz, "highpass", fs=fs, output="sos"), h)
    return _fit_decay(schroeder_edc(h), fs, start_db, stop_db)


@lru_cache(maxsize=256)
def calibrated_reflection(dimensions, rt60, fs=FS, c=SPEED_OF_SOUND):
    """Reflection coefficient whose image set decays with the requested RT60.

    Uses the incoherent energy envelope of a canonical source/receiver pair
    near the room centre and solves for ``r`` with Brent's method.
    """
    room = RoomSpec(tuple(dimensions), rt60, reflection=1.0)
    if room.absorption >= 1.0:
        raise InfeasibleRoomError(
            f"RT60 {rt60} s too short for room {tuple(dimensions)}: Sabine absorption {room.absorption:.3f} >= 1")
    if image_count(auto_max_order(room, c)) > MAX_IMAGES:
        raise InfeasibleRoomError(f"RT60 {rt60} s needs more than {MAX_IMAGES} image sources")
    dims = np.asarray(room.dimensions)
    receiver = dims / 2
    source = np.minimum(receiver + np.array([1.0, 0.7, 0.3]), dims - 0.05)
    length = rir_length(room, float(np.linalg.norm(source - receiver)), fs, c)
    images, n_refl = image_sources(room, source, auto_max_order(room, c))
    d = np.linalg.norm(images - receiver, axis=1)
    t = np.rint(d / c * fs).astype(np.int64)
    keep = t < length
    d, t, n_refl = d[keep], t[keep], n_refl[keep]

    def mismatch(log_r):
        e = np.bincount(t, weights=np.exp(2 * log_r * n_refl) / d**2, minlength=length)
        edc = np.cumsum(e[::-1])[::-1]
        return _fit_decay(10 * np.log10(edc / edc[0] + 1e-300), fs) - rt60

    # at small r the direct-path step dominates the fit and the decay time is
    # not monotone in r, so bracket the last sign change of a coarse scan
    grid = np.log(1 - np.geomspace(0.999, 1e-6, 40))
    vals = np.array([mismatch(g) for g in grid])
    crossings = np.nonzero((vals[:-1] < 0) & (vals[1:] >= 0))[0]
    if crossings.size == 0:
        raise InfeasibleRoomError(f"RT60 {rt60} s is not reachable in room {tuple(dimensions)}")
    i = crossings[-1]
    log_r = brentq(mismatch, grid[i], grid[i + 1], xtol=1e-5)
    if abs(mismatch(log_r)) > 0.05 * rt60:
        raise InfeasibleRoomError(f"RT60 {rt60} s is not reachable in room {tuple(dimensions)}")
    return math.exp(log_r)
