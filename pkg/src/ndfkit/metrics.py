"""Mask-based evaluation: power ratios and patterns, directivity factors, SDR, losses,
and the segmental stereo level difference."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE
from .errors import DegenerateSignalError, InvalidArgumentError

EPS = 1e-7
TSDR_TAU = 10 ** (-40 / 10)
NEAREST_HALF_WIDTH_DEG = 1.25


def _db(x):
    with np.errstate(divide="ignore"):
        return 10 * np.log10(x)


def power_ratios(mask, direct_spec):
    """Narrowband ratios ``xi[f]`` (NaN where the stem is silent) and the wideband ratio."""
    X = np.asarray(direct_spec)
    M = np.asarray(mask)
    if M.shape != X.shape:
        M = np.broadcast_to(M, X.shape)
    ref = np.sum(np.abs(X) ** 2, axis=-1)
    out = np.sum(np.abs(M * X) ** 2, axis=-1)
    total = float(np.sum(ref))
    if total == 0:
        raise DegenerateSignalError("direct-path stem carries no energy")
    with np.errstate(invalid="ignore", divide="ignore"):
        xi = np.where(ref > 0, out / np.where(ref > 0, ref, 1.0), np.nan)
    return xi, float(np.sum(out)) / total


def bin_direction(doa_deg, grid_deg, mode="exact"):
    """Index of the grid direction a DOA belongs to, or ``None``."""
    grid = np.asarray(grid_deg, dtype=float)
    diff = np.abs((grid - doa_deg + 180.0) % 360.0 - 180.0)
    i = int(np.argmin(diff))
    limit = 1e-6 if mode == "exact" else NEAREST_HALF_WIDTH_DEG
    return i if diff[i] <= limit else None


@dataclass
class PatternEstimate:
    grid_deg: np.ndarray
    narrowband_db: np.ndarray  # (P, F)
    wideband_db: np.ndarray  # (P,)
    std_db: np.ndarray  # (P,) spread of wideband ratios in dB
    narrowband_std_db: np.ndarray  # (P, F)
    counts: np.ndarray  # (P,) |H_theta|

    @property
    def missing(self):
        return [float(g) for g, n in zip(self.grid_deg, self.counts) if n == 0]


def estimate_power_pattern(samples, grid_deg, binning="exact"):
    """Average direct-stem power ratios per grid direction.

    ``samples`` yields ``(mask, sources)`` with ``sources`` a list of
    ``(doa_deg, direct_spec)``; each (sample, source) pair contributes to
    the direction its DOA bins to. Directions with no contribution come out
    as NaN and are listed in ``missing``.
    """
    grid = np.asarray(grid_deg, dtype=float)
    P = len(grid)
    narrow = [[] for _ in range(P)]
    wide = [[] for _ in range(P)]
    for mask, sources in samples:
        for doa_deg, spec in sources:
            p = bin_direction(doa_deg, grid, binning)
            if p is None:
                continue
            xi, xi_bar = power_ratios(mask, spec)
            narrow[p].append(xi)
            wide[p].append(xi_bar)
    F = next((len(n[0]) for n in narrow if n), 0)
    nb = np.full((P, F), np.nan)
    nb_std = np.full((P, F), np.nan)
    wb = np.full(P, np.nan)
    std = np.full(P, np.nan)
    counts = np.array([len(w) for w in wide])
    with warnings.catch_warnings():
        # nanmean over an all-NaN column warns; those entries legitimately stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        for p in range(P):
            if not wide[p]:
                continue
            stack = np.stack(narrow[p])
            nb[p] = _db(np.nanmean(stack, axis=0))
            nb_std[p] = np.nanstd(_db(stack), axis=0)
            w = np.array(wide[p])
            wb[p] = _db(np.mean(w))
            std[p] = np.std(_db(w))
    return PatternEstimate(grid, nb, wb, std, nb_std, counts)


def _ratio_db(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    if not np.any(num > 0):
        raise DegenerateSignalError("reverberant stems carry no energy")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, 10 * np.log10(num / np.where(den > 0, den, 1.0)), np.inf)


def estimate_df(masks, reverb_specs):
    """Data-dependent directivity factor ``DF[f]`` in dB; ``+inf`` where the output is silent."""
    num = 0.0
    den = 0.0
    n = 0
    for m, y in zip(masks, reverb_specs, strict=True):
        y = np.asarray(y)
        num = num + np.sum(np.abs(y) ** 2, axis=-1)
        den = den + np.sum(np.abs(np.asarray(m) * y) ** 2, axis=-1)
        n += 1
    if n == 0:
        raise InvalidArgumentError("need at least one sample")
    return _ratio_db(num, den)


def estimate_df_target(target_specs, reverb_specs):
    """Directivity factor of the VDM targets themselves, ``sum|Y_rvb|^2 / sum|Z|^2`` per bin."""
    num = 0.0
    den = 0.0
    n = 0
    for z, y in zip(target_specs, reverb_specs, strict=True):
        num = num + np.sum(np.abs(np.asarray(y)) ** 2, axis=-1)
        den = den + np.sum(np.abs(np.asarray(z)) ** 2, axis=-1)
        n += 1
    if n == 0:
        raise InvalidArgumentError("need at least one sample")
    return _ratio_db(num, den)


def sdr(z, z_hat, eps=EPS):
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    if z.size == 0:
        raise InvalidArgumentError("empty signal")
    if z.shape != z_hat.shape:
        raise InvalidArgumentError(f"length mismatch {z.shape} vs {z_hat.shape}")
    return float(10 * np.log10(np.sum(z**2) / (np.sum((z - z_hat) ** 2) + eps)))


def aggregate_sdr(pairs, eps=EPS):
    values = [sdr(z, zh, eps) for z, zh in pairs]
    if not values:
        raise InvalidArgumentError("no samples to aggregate")
    return float(np.mean(values))


def loss_tsdr(z, z_hat, eps=EPS, tau=TSDR_TAU):
    """Batch-aggregated, thresholded SDR loss (lower is better, floor ``10 log10 tau``)."""
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    err = np.sum((z - z_hat) ** 2)
    return float(10 * np.log10(err / (np.sum(z**2) + eps) + tau))


def loss_l1(z, z_hat, eps=EPS):
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    return float(np.sum(np.abs(z - z_hat)) / (np.sum(np.abs(z)) + eps))


def stereo_level_difference(left, right, seg_len_s=1.0, overlap=0.75, sample_rate=SAMPLE_RATE):
    """Per-segment ``20 log10(rms_left / rms_right)``; NaN for segments where either side is silent."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape:
        raise InvalidArgumentError("left and right must have equal length")
    if not 0 <= overlap < 1:
        raise InvalidArgumentError("overlap must lie in [0, 1)")
    n = int(round(seg_len_s * sample_rate))
    hop = max(1, int(round(n * (1 - overlap))))
    out = []
    for s in range(0, max(len(left) - n, 0) + 1, hop):
        l_rms = np.sqrt(np.mean(left[s:s + n] ** 2))
        r_rms = np.sqrt(np.mean(right[s:s + n] ** 2))
        out.append(20 * math.log10(l_rms / r_rms) if l_rms > 0 and r_rms > 0 else math.nan)
    return np.array(out)


@dataclass
class EvalReport:
    freqs: np.ndarray
    pattern: PatternEstimate | None = None
    df_db: np.ndarray | None = None
    df_target_db: np.ndarray | None = None
    sdr_per_sample: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def sdr_db(self):
        return float(np.mean([s for _, s in self.sdr_per_sample])) if self.sdr_per_sample else math.nan

    def to_dict(self):
        def arr(x):
            return None if x is None else [None if not np.isfinite(v) else float(v) for v in np.ravel(x)]

        d = {"meta": self.meta, "freqs_hz": arr(self.freqs), "sdr_db": _finite(self.sdr_db),
             "sdr_per_sample": [{"scene_id": k, "sdr_db": _finite(v)} for k, v in self.sdr_per_sample],
             "df_db": arr(self.df_db), "df_target_db": arr(self.df_target_db)}
        if self.pattern is not None:
            p = self.pattern
            d["pattern"] = {"grid_deg": arr(p.grid_deg), "wideband_db": arr(p.wideband_db),
                            "std_db": arr(p.std_db), "counts": p.counts.tolist(), "missing_deg": p.missing}
        return d

    def save(self, out_dir):
        """Write ``report.json`` plus plot-ready CSVs into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if self.pattern is not None:
            p = self.pattern
            with open(out / "pattern.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["theta_deg", "power_db", "std_db", "count"])
                for row in zip(p.grid_deg, p.wideband_db, p.std_db, p.counts):
                    w.writerow([f"{row[0]:g}", _fmt(row[1]), _fmt(row[2]), int(row[3])])
            with open(out / "pattern_heatmap.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["theta_deg"] + [f"{f:g}" for f in self.freqs])
                for g, row in zip(p.grid_deg, p.narrowband_db):
                    w.writerow([f"{g:g}"] + [_fmt(v) for v in row])
        if self.df_db is not None or self.df_target_db is not None:
            with open(out / "df.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["freq_hz", "df_db", "df_target_db"])
                for i, f in enumerate(self.freqs):
                    w.writerow([f"{f:g}", _fmt(None if self.df_db is None else self.df_db[i]),
                                _fmt(None if self.df_target_db is None else self.df_target_db[i])])
        if self.sdr_per_sample:
            with open(out / "sdr.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["scene_id", "sdr_db"])
                for k, v in self.sdr_per_sample:
                    w.writerow([k, _fmt(v)])
        return out


def _finite(v):
    return float(v) if v is not None and np.isfinite(v) else None


def _fmt(v):
    if v is None:
        return ""
    return "nan" if np.isnan(v) else f"{float(v):.6g}"
