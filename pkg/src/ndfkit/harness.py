"""Scripted analysis procedures: manifest evaluation, bandpass probing, aperture/SNR
sweeps, and the moving-interferer and stereo demos."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .directivity import DirectivityPattern, preset
from .dsp import SAMPLE_RATE, bandpass_bands, center_band, istft, stft
from .errors import CardinalityError, InvalidArgumentError
from .filters import (
    apply_beamformer,
    apply_mask,
    beamformer_mask,
    design_ls_beamformer,
    grating_lobe_onset,
    oracle_mask_from_stems,
)
from .formats import load_manifest, mask_filename, read_tensor, write_wav
from .geometry import SPEED_OF_SOUND, ArrayGeometry, build_array
from .metrics import EvalReport, estimate_df, estimate_df_target, estimate_power_pattern, sdr, stereo_level_difference
from .room import RoomSpec, render_receivers
from .scenes import build_dataset, candidate_grid, load_render, synth_source, write_synthetic_corpus

FILTER_SOURCES = ("oracle", "ls", "external")


@dataclass
class ExperimentConfig:
    experiment_id: str = "experiment"
    manifest: str | None = None
    filter_source: str = "oracle"
    mask_dir: str | None = None
    pattern: str = "dma1"
    wng_min_db: float = -15.0
    bands: list = field(default_factory=lambda: [{"center_hz": 1000.0, "bandwidth_hz": 500.0}])
    diameters: list = field(default_factory=lambda: [0.03, 0.06, 0.09])
    snrs: list = field(default_factory=lambda: [30.0, 20.0, 10.0])
    steering: list = field(default_factory=lambda: [0.0])
    dataset: dict = field(default_factory=dict)
    corpus_dir: str | None = None
    environment: str = "reverberant"
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown experiment keys {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.filter_source not in FILTER_SOURCES:
            raise InvalidArgumentError(f"filter source must be one of {FILTER_SOURCES}")
        return cfg

    def to_dict(self):
        return asdict(self)


def band_spec(band):
    """``(label, [(lo, hi), ...])`` for a probe band description."""
    if band == "full" or band.get("full"):
        return "full", [(0.0, SAMPLE_RATE / 2)]
    edges = []
    if "center_hz" in band:
        edges.append(center_band(float(band["center_hz"]), float(band.get("bandwidth_hz", 500.0))))
    edges.extend(tuple(e) for e in band.get("extra", []))
    if not edges:
        raise InvalidArgumentError(f"band {band!r} selects nothing")
    for lo, hi in edges:
        if not (0 <= lo < hi <= SAMPLE_RATE / 2):
            raise InvalidArgumentError(f"band edges ({lo}, {hi}) Hz outside [0, {SAMPLE_RATE // 2}] Hz")
    label = band.get("label") or "+".join(f"{lo:g}-{hi:g}" for lo, hi in edges)
    return label, edges


class _LsCache:
    def __init__(self, wng_min_db):
        self.wng_min_db = wng_min_db
        self._designs = {}

    def get(self, array, pattern):
        key = (array.diameter, json.dumps(pattern.to_dict(), sort_keys=True))
        if key not in self._designs:
            self._designs[key] = design_ls_beamformer(array, pattern, wng_min_db=self.wng_min_db)
        return self._designs[key]


def _external_masks(mask_dir, records, steering):
    expected = {mask_filename(r["scene_id"], s): (r["scene_id"], s) for r in records for s in steering}
    d = Path(mask_dir)
    if not d.is_dir():
        raise CardinalityError(f"mask directory {d} does not exist")
    present = {p.name for p in d.glob("*.ndfm")}
    missing = sorted(set(expected) - present)
    extra = sorted(present - set(expected))
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing masks for " + ", ".join(f"{expected[m][0]} (steer {expected[m][1]:g})" for m in missing))
        if extra:
            parts.append("masks without a scene: " + ", ".join(extra))
        raise CardinalityError("; ".join(parts))
    return d


def evaluate_manifest(manifest_path, filter_source="oracle", pattern=None, mask_dir=None, steering=None,
                      wng_min_db=-15.0, bands=None, max_scenes=None, ls_cache=None):
    """Evaluate one filter over every (scene, steering) pair of a manifest.

    ``bands`` restricts the information the filter sees (bandpass probe): the
    mask is derived from bandpassed inputs but always applied to the
    unprocessed reference signal.
    """
    if filter_source not in FILTER_SOURCES:
        raise InvalidArgumentError(f"filter source must be one of {FILTER_SOURCES}")
    doc = load_manifest(manifest_path)
    records = doc["scenes"][:max_scenes] if max_scenes else doc["scenes"]
    steering = [float(s) for s in (steering or doc["steering_deg"])]
    if pattern is None:
        pattern = DirectivityPattern.from_dict(doc["pattern"])
    elif isinstance(pattern, str):
        pattern = preset(pattern)
    if filter_source == "external":
        mask_root = _external_masks(mask_dir, records, steering)
    array = ArrayGeometry.from_dict(doc["array"])
    ls_cache = ls_cache or _LsCache(wng_min_db)
    grid = candidate_grid(doc.get("role", "test"))

    def probe(x):
        return x if bands is None else bandpass_bands(x, bands)

    samples, sdrs, masks, rvb_specs, target_specs = [], [], [], [], []
    for rec in records:
        render = load_render(manifest_path, rec)
        ref_spec = stft(render.reference)
        direct_specs = stft(render.direct_stems).bins
        reverb_spec = stft(render.y_rvb).bins
        for s in steering:
            steered = pattern.steered(math.radians(s))
            if filter_source == "oracle":
                probed = stft(probe(render.direct_stems)).bins
                mask = oracle_mask_from_stems(probed, [d.azimuth for d in render.doas], steered)
            elif filter_source == "ls":
                w = ls_cache.get(array, steered)
                ys = stft(probe(render.mic_signals)).bins
                out = apply_beamformer(w, ys)
                mask = beamformer_mask(out, ys[array.reference_index])
            else:
                mask = read_tensor(mask_root / mask_filename(rec["scene_id"], s), role="mask")
                if mask.shape != ref_spec.bins.shape:
                    raise CardinalityError(
                        f"{rec['scene_id']}: mask shape {mask.shape} does not match spectrogram {ref_spec.bins.shape}")
            z_hat = istft(apply_mask(mask, ref_spec))
            z = render.target(s)
            sdrs.append((f"{rec['scene_id']}@{s:g}", sdr(z, z_hat)))
            rel = [((src.azimuth_deg - s) % 360.0, direct_specs[k]) for k, src in enumerate(render.spec.sources)]
            samples.append((mask, rel))
            masks.append(mask)
            rvb_specs.append(reverb_spec)
            target_specs.append(stft(z).bins)
    binning = "exact" if all(abs(s % 2.5) < 1e-9 for s in steering) else "nearest"
    pattern_est = estimate_power_pattern(samples, grid, binning)
    freqs = ref_spec.frequencies
    df = df_t = None
    if any(np.any(r) for r in rvb_specs):
        df = estimate_df(masks, rvb_specs)
        df_t = estimate_df_target(target_specs, rvb_specs)
    meta = {"manifest": str(manifest_path), "filter_source": filter_source, "pattern": pattern.to_dict(),
            "steering_deg": steering, "num_samples": len(sdrs)}
    if bands is not None:
        meta["bands_hz"] = [list(b) for b in bands]
    return EvalReport(freqs, pattern_est, df, df_t, sdrs, meta)


def _ensure_corpus(cfg, out):
    if cfg.corpus_dir:
        return Path(cfg.corpus_dir)
    d = out / "synthetic_corpus"
    if not d.is_dir():
        write_synthetic_corpus(d, 12, seed=cfg.seed)
    return d


def _write_summary(out, summary):
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_bandpass_probe(cfg):
    """Evaluate the configured filter once per probe band; returns ``{label: EvalReport}``."""
    if cfg.manifest is None:
        raise InvalidArgumentError("bandpass probe needs a manifest")
    out = Path(cfg.output_dir)
    reports = {}
    cache = _LsCache(cfg.wng_min_db)
    for band in cfg.bands:
        label, edges = band_spec(band)
        rep = evaluate_manifest(cfg.manifest, cfg.filter_source, cfg.pattern, cfg.mask_dir, cfg.steering,
                                cfg.wng_min_db, bands=edges, ls_cache=cache)
        rep.save(out / f"band_{label}")
        reports[label] = rep
    _write_summary(out, {"experiment": cfg.to_dict(),
                         "bands": {k: {"sdr_db": v.sdr_db, "dir": f"band_{k}"} for k, v in reports.items()}})
    return reports


def nominal_aliasing_frequency(diameter, c=SPEED_OF_SOUND):
    """Frequency whose wavelength equals the array aperture (inverse in the diameter)."""
    return c / diameter


def run_aperture_sweep(cfg):
    """Build one dataset per (diameter, SNR) cell with a shared seed and evaluate it.

    Returns ``{(diameter, snr): EvalReport}``; the summary also lists the LS
    grating-lobe onset per diameter.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _ensure_corpus(cfg, out)
    reports = {}
    summary = {"experiment": cfg.to_dict(), "cells": [], "aliasing": []}
    for dia in cfg.diameters:
        arr = build_array(float(dia))
        wide = design_ls_beamformer(arr, preset(cfg.pattern), freqs=np.arange(1, 513) * SAMPLE_RATE / 512,
                                    wng_min_db=cfg.wng_min_db)
        summary["aliasing"].append({"diameter": dia, "ls_onset_hz": grating_lobe_onset(wide, arr),
                                    "nominal_hz": nominal_aliasing_frequency(dia)})
        for snr in cfg.snrs:
            ds = {"seed": cfg.seed, "environment": cfg.environment, "scenes": {"count": 4, "num_sources": 2}}
            ds.update(cfg.dataset)
            ds.update({"array": {"diameter": float(dia)}, "snr_db": snr, "steering_deg": cfg.steering,
                       "pattern": {"preset": cfg.pattern}})
            cell = out / f"d{dia * 100:g}cm_snr{snr:g}"
            manifest = build_dataset(ds, corpus, cell)
            rep = evaluate_manifest(manifest, cfg.filter_source, cfg.pattern, cfg.mask_dir, cfg.steering,
                                    cfg.wng_min_db)
            rep.save(cell / "report")
            reports[(dia, snr)] = rep
            summary["cells"].append({"diameter": dia, "snr_db": snr, "sdr_db": rep.sdr_db, "dir": cell.name})
    _write_summary(out, summary)
    return reports


# -- piecewise-static moving sources ---------------------------------------------------


def _hop_windows(n, hop):
    """Hann crossfade windows centred on hop boundaries; they sum to one everywhere."""
    num = int(math.ceil(n / hop)) + 1
    windows = []
    t = np.arange(n)
    for h in range(num):
        c = h * hop
        w = np.clip(1 - np.abs(t - c) / hop, 0, 1)
        w = 0.5 - 0.5 * np.cos(np.pi * w)
        windows.append(w)
    total = np.sum(windows, axis=0)
    return [w / total for w in windows]


def render_moving_source(signal, azimuth_at, distance, array, center, room, patterns, hop_s=0.25,
                         fs=SAMPLE_RATE, c=SPEED_OF_SOUND):
    """Approximate a source moving in the array plane by static segments.

    ``azimuth_at(t)`` gives the source azimuth (degrees) at time ``t``; each
    hop renders static impulse responses and the segments are crossfaded.
    Returns ``(mics (Q, N), vdm (P, N), azimuths per hop)``.
    """
    x = np.asarray(signal, dtype=float)
    n = len(x)
    hop = int(round(hop_s * fs))
    mics = array.placed_at(center)
    ref = mics[array.reference_index]
    Q, P = len(mics), len(patterns)
    y = np.zeros((Q, n))
    v = np.zeros((P, n))
    pats = [(array.reference_index, p) for p in patterns]
    azs = []
    for h, w in enumerate(_hop_windows(n, hop)):
        idx = np.nonzero(w)[0]
        if idx.size == 0:
            continue
        az = float(azimuth_at(h * hop / fs))
        azs.append(az)
        pos = ref + distance * np.array([math.cos(math.radians(az)), math.sin(math.radians(az)), 0.0])
        omni, vdm = render_receivers(room, pos, mics, pats, fs=fs, c=c)
        lo, hi = idx[0], idx[-1] + 1
        seg = x[lo:hi] * w[lo:hi]
        for q in range(Q):
            r = fftconvolve(seg, omni[q])[: n - lo]
            y[q, lo:lo + len(r)] += r
        for p in range(P):
            r = fftconvolve(seg, vdm[p])[: n - lo]
            v[p, lo:lo + len(r)] += r
    return y, v, azs


def _demo_room(cfg):
    if cfg.environment == "anechoic":
        return None, np.zeros(3)
    room = RoomSpec((5.0, 4.0, 3.5), 0.15)
    return room, np.array([2.5, 2.0, 1.5])


def _spectrogram_csv(path, x):
    spec = stft(x)
    mag = 20 * np.log10(np.abs(spec.bins) + 1e-12)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz"] + [f"{t * spec.hop / spec.sample_rate:.4f}" for t in range(spec.num_frames)])
        for f, row in zip(spec.frequencies, mag):
            w.writerow([f"{f:g}"] + [f"{v:.2f}" for v in row])


def run_interferer_demo(cfg, target=None, interferer=None, duration=18.0, distance=1.5, hop_s=0.25):
    """Static target at 0 deg plus an interferer circling the array once in ``duration`` seconds.

    Writes reference, VDM-target and oracle-filtered WAVs plus spectrogram
    CSVs; returns a summary with per-hop interferer attenuation of the VDM
    target relative to the reference microphone.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    n = int(round(duration * SAMPLE_RATE))
    target = synth_source(duration, rng) if target is None else np.asarray(target, dtype=float)[:n]
    interferer = synth_source(duration, rng) if interferer is None else np.asarray(interferer, dtype=float)[:n]
    array = build_array(cfg.diameters[0] if cfg.diameters else 0.03)
    room, center = _demo_room(cfg)
    pattern = preset(cfg.pattern, cfg.steering[0] if cfg.steering else 0.0)
    steer = pattern.steering.azimuth_deg
    ref = array.reference_index
    t_mics, t_vdm, _ = render_moving_source(target, lambda t: steer, distance, array, center, room, [pattern], hop_s)
    i_mics, i_vdm, azs = render_moving_source(
        interferer, lambda t: (steer + 360.0 * t / duration) % 360.0, distance, array, center, room, [pattern], hop_s)
    reference = t_mics[ref] + i_mics[ref]
    vdm = t_vdm[0] + i_vdm[0]
    # oracle mask from the two reference-mic contributions
    specs = stft(np.stack([t_mics[ref], i_mics[ref]])).bins
    ref_spec = stft(reference)
    hop = int(round(hop_s * SAMPLE_RATE))
    frame_az = [azs[min(int(round(t * ref_spec.hop / hop)), len(azs) - 1)] for t in range(ref_spec.num_frames)]
    dom = np.argmax(np.abs(specs), axis=0)
    gains_t = abs(float(pattern.evaluate(math.radians(steer))))
    gains_i = np.abs(pattern.evaluate(np.deg2rad(frame_az)))
    mask = np.where(dom == 0, gains_t, gains_i[None, :])
    filtered = istft(apply_mask(mask, ref_spec))
    write_wav(out / "reference.wav", reference)
    write_wav(out / "target_vdm.wav", vdm)
    write_wav(out / "oracle_output.wav", filtered)
    _spectrogram_csv(out / "reference_spectrogram.csv", reference)
    _spectrogram_csv(out / "target_vdm_spectrogram.csv", vdm)
    hops = []
    for h, az in enumerate(azs):
        lo, hi = h * hop, min((h + 1) * hop, n)
        if hi - lo <= 0:
            continue
        e_ref = float(np.sum(i_mics[ref][lo:hi] ** 2))
        e_vdm = float(np.sum(i_vdm[0][lo:hi] ** 2))
        att = 10 * math.log10(e_ref / e_vdm) if e_ref > 0 and e_vdm > 0 else math.nan
        hops.append({"t_s": lo / SAMPLE_RATE, "interferer_deg": az, "attenuation_db": att})
    target_diff = 10 * math.log10(np.sum(t_vdm[0] ** 2) / np.sum(t_mics[ref] ** 2))
    summary = {"experiment": cfg.to_dict(), "duration_s": duration, "distance_m": distance,
               "target_vdm_minus_reference_db": target_diff, "hops": hops}
    with open(out / "interferer_attenuation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "interferer_deg", "attenuation_db"])
        for row in hops:
            w.writerow([f"{row['t_s']:.3f}", f"{row['interferer_deg']:.2f}", f"{row['attenuation_db']:.3f}"])
    _write_summary(out, summary)
    return summary


def run_stereo_demo(cfg, source=None, duration=12.0, distance=1.5, hop_s=0.25, left_deg=45.0, right_deg=135.0,
                    seg_len_s=1.0, overlap=0.75):
    """Pan a source from 0 to 180 deg and render a stereo pair of steered VDM targets.

    Writes ``stereo.wav`` and ``level_difference.csv``; returns the summary.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    n = int(round(duration * SAMPLE_RATE))
    source = synth_source(duration, rng) if source is None else np.asarray(source, dtype=float)[:n]
    array = build_array(cfg.diameters[0] if cfg.diameters else 0.03)
    room, center = _demo_room(cfg)
    pats = [preset(cfg.pattern, left_deg), preset(cfg.pattern, right_deg)]

    def pan(t):
        return min(180.0, 180.0 * t / duration)

    _, vdm, _ = render_moving_source(source, pan, distance, array, center, room, pats, hop_s)
    write_wav(out / "stereo.wav", vdm)
    diffs = stereo_level_difference(vdm[0], vdm[1], seg_len_s, overlap)
    step = seg_len_s * (1 - overlap)
    rows = [{"t_s": i * step, "azimuth_deg": pan(i * step + seg_len_s / 2), "level_diff_db": float(d)}
            for i, d in enumerate(diffs)]
    with open(out / "level_difference.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "azimuth_deg", "level_diff_db"])
        for r in rows:
            w.writerow([f"{r['t_s']:.3f}", f"{r['azimuth_deg']:.2f}", f"{r['level_diff_db']:.3f}"])
    summary = {"experiment": cfg.to_dict(), "left_deg": left_deg, "right_deg": right_deg, "segments": rows}
    _write_summary(out, summary)
    return summary
