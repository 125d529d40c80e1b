"""Acceptance suite: one test per numbered criterion.

Every test prints a ``PASS``/``FAIL`` line (visible even under output
capture) and then asserts the same condition.
"""

import itertools
import math
import shutil
import time

import numpy as np
import pytest

from ndfkit.directivity import DMA_PRESETS, preset, theoretical_df
from ndfkit.dsp import istft, stft
from ndfkit.filters import (
    beampattern,
    design_ls_beamformer,
    grating_lobe_onset,
)
from ndfkit.formats import load_manifest, read_tensor, read_wav, validate_manifest, write_tensor, write_wav
from ndfkit.geometry import build_array
from ndfkit.harness import evaluate_manifest
from ndfkit.metrics import estimate_df, estimate_df_target, estimate_power_pattern, loss_l1, loss_tsdr
from ndfkit.room import FS, RoomSpec, estimate_t60, image_sources, simulate_rir, simulate_vdm_rir
from ndfkit.scenes import build_dataset, load_render, plan_minibatches, render_scene, sample_scene, scene_rng, synth_source

C = 343.0


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok

    return emit


def test_criterion_01_stft_round_trip(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(64000)
        worst = max(worst, np.linalg.norm(istft(stft(x)) - x) / np.linalg.norm(x))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 5.0
    assert verdict(1, ok, f"worst relative error {worst:.2e} over 100 signals in {elapsed:.2f} s")
    assert ok


def test_criterion_02_pattern_algebra(verdict):
    sums = {k: abs(sum(v) - 1.0) for k, v in DMA_PRESETS.items()}
    on_axis = all(preset(n, s).evaluate(math.radians(s)) == 1.0
                  for n in ("dma1", "dma3", "dma6") for s in (0.0, 45.0, 137.5, 281.25))
    cardioid_null = abs(preset("dma1").raw(math.pi))
    dma3_nulls = max(abs(preset("dma3").raw(math.radians(a))) for a in (90.0, 120.0, 180.0))
    grid = np.deg2rad(np.arange(0, 360, 0.25))
    floors = [np.min(np.abs(preset(n).evaluate(grid))) for n in ("dma1", "dma3", "dma6")]
    at_null = preset("dma1").evaluate(math.pi)
    ok = (max(sums.values()) < 1e-12 and on_axis and cardioid_null < 1e-12 and dma3_nulls < 1e-12
          and min(floors) >= 0.01 - 1e-15 and at_null == 0.01)
    assert verdict(2, ok, f"coefficient sum error {max(sums.values()):.1e}, on-axis exact {on_axis}, "
                          f"nulls {cardioid_null:.1e}/{dma3_nulls:.1e}, floor {min(floors):.4f}")
    assert ok


def test_criterion_03_theoretical_df(verdict):
    omni = theoretical_df(preset("omni"))
    card = theoretical_df(preset("dma1"), clamp=False)
    drift = {}
    for name in ("dma1", "dma3", "dma6", "lobes", "steps"):
        coarse, fine = theoretical_df(preset(name), 1.0), theoretical_df(preset(name), 0.5)
        drift[name] = abs(coarse - fine) / fine
    ok = omni == 1.0 and abs(card - 3.0) < 1e-3 and max(drift.values()) < 1e-4
    assert verdict(3, ok, f"omni {omni!r}, unclamped cardioid {card:.6f}, "
                          f"max relative change on halving {max(drift.values()):.1e}")
    assert ok


def _axis_images(s, L, k):
    seen = {round(s, 9)}
    frontier = [s]
    for _ in range(k):
        nxt = []
        for x in frontier:
            for y in (-x, 2 * L - x):
                if round(y, 9) not in seen:
                    seen.add(round(y, 9))
                    nxt.append(y)
        frontier = nxt
    return seen


def test_criterion_04_image_source(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    arrival_err = 0.0
    for d in rng.uniform(0.5, 3.0, 10):
        h = simulate_rir(None, [d, 0.0, 0.0], [0.0, 0.0, 0.0])
        arrival_err = max(arrival_err, abs(int(np.argmax(h)) - d / C * FS))
    counts_ok = True
    room = RoomSpec((5.0, 4.0, 3.0), 0.3)
    src = (1.3, 2.2, 0.7)
    for k in (0, 1, 2):
        pos, _ = image_sources(room, src, k)
        expected = set(itertools.product(*(_axis_images(src[a], room.dimensions[a], k) for a in range(3))))
        got = {tuple(np.round(p, 9)) for p in pos}
        counts_ok &= len(pos) == (2 * k + 1) ** 3 == len(expected) and got == expected
    ratios = []
    for i in range(20):
        spec = sample_scene("train", "reverberant", preset("omni"), scene_rng(404, i), num_sources=1)
        mics = spec.mic_positions()
        h = simulate_rir(spec.room, spec.source_positions()[0], mics[0])
        ratios.append(estimate_t60(h) / spec.room.rt60)
    elapsed = time.perf_counter() - t0
    worst = max(abs(r - 1) for r in ratios)
    ok = arrival_err <= 1 and counts_ok and worst <= 0.2 and elapsed < 60
    assert verdict(4, ok, f"arrival error {arrival_err:.2f} samples, image sets match {counts_ok}, "
                          f"T60 ratio range [{min(ratios):.3f}, {max(ratios):.3f}] over 20 rooms, {elapsed:.1f} s")
    assert ok


def test_criterion_05_vdm_reduction(verdict):
    room = RoomSpec((7.0, 5.0, 3.2), 0.4)
    src, mic = [2.0, 1.5, 1.4], [4.5, 3.0, 1.6]
    identical = np.array_equal(simulate_rir(room, src, mic), simulate_vdm_rir(room, src, mic, preset("omni")))
    pat = preset("dma1")
    worst = 0.0
    for az in np.arange(0.0, 360.0, 15.0):
        p = 1.5 * np.array([math.cos(math.radians(az)), math.sin(math.radians(az)), 0.0])
        omni = simulate_rir(None, p, np.zeros(3))
        vdm = simulate_vdm_rir(None, p, np.zeros(3), pat)
        gain = vdm[np.argmax(omni)] / omni.max()
        worst = max(worst, abs(gain - pat.evaluate(math.radians(az))))
    ok = identical and worst < 1e-9
    assert verdict(5, ok, f"omni bit-identical {identical}, worst direct-gain error {worst:.1e}")
    assert ok


@pytest.fixture(scope="module")
def oracle_grid_manifest(tmp_path_factory, corpus_dir):
    cfg = {"seed": 606, "role": "test", "environment": "anechoic", "scenes": {"count": 144, "num_sources": 1}}
    t0 = time.perf_counter()
    path = build_dataset(cfg, corpus_dir, tmp_path_factory.mktemp("grid144"))
    return path, time.perf_counter() - t0


def test_criterion_06_oracle_pattern(verdict, oracle_grid_manifest):
    manifest, build_s = oracle_grid_manifest
    t0 = time.perf_counter()
    details, ok = [], True
    for name in ("dma1", "dma3", "dma6"):
        rep = evaluate_manifest(manifest, "oracle", name)
        est = rep.pattern
        # the power pattern is the squared clamped gain: 10 log10(L^2) = 20 log10 |L|
        target = 20 * np.log10(np.abs(preset(name).evaluate(np.deg2rad(est.grid_deg))))
        keep = target >= -20
        err = np.max(np.abs(est.wideband_db[keep] - target[keep]))
        covered = bool(np.all(est.counts == 1))
        ok &= covered and err <= 0.5
        details.append(f"{name} max error {err:.2e} dB over {int(keep.sum())} directions")
    elapsed = build_s + time.perf_counter() - t0
    ok &= elapsed < 300
    assert verdict(6, ok, "; ".join(details) + f"; {elapsed:.0f} s")
    assert ok


def test_criterion_07_identity_masks(verdict, reverberant_manifest):
    doc = load_manifest(reverberant_manifest)
    samples, masks, rvb = [], [], []
    for rec in doc["scenes"]:
        r = load_render(reverberant_manifest, rec)
        direct = stft(r.direct_stems).bins
        ones = np.ones(direct.shape[1:])
        samples.append((ones, [(s.azimuth_deg, direct[k]) for k, s in enumerate(r.spec.sources)]))
        masks.append(ones)
        rvb.append(stft(r.y_rvb).bins)
    grid = np.unique([src["azimuth_deg"] for rec in doc["scenes"] for src in rec["spec"]["sources"]])
    est = estimate_power_pattern(samples, grid)
    df = estimate_df(masks, rvb)
    ok = (np.all(np.abs(est.wideband_db) < 1e-12) and np.all(est.std_db < 1e-12)
          and np.all(np.abs(df) < 1e-12))
    assert verdict(7, ok, f"max |P| {np.max(np.abs(est.wideband_db)):.1e} dB, max std {np.max(est.std_db):.1e}, "
                          f"max |DF| {np.max(np.abs(df)):.1e} dB")
    assert ok


def test_criterion_08_df_target_low_drr(verdict):
    t0 = time.perf_counter()
    pattern = preset("dma1")
    targets, reverbs = [], []
    for i in range(50):
        rng = scene_rng(808, i)
        spec = sample_scene("test", "reverberant", pattern, rng, num_sources=1, distance=2.5,
                            rt60_range=(0.5, 0.6), snr_db=math.inf)
        r = render_scene(spec, [synth_source(4.0, np.random.default_rng([808, i]))])
        targets.append(stft(r.target(0.0)).bins)
        reverbs.append(stft(r.y_rvb).bins)
    df_t = estimate_df_target(targets, reverbs)
    freqs = np.arange(257) * 31.25
    band = (freqs >= 1000) & (freqs <= 6000)
    mean_db = float(np.mean(df_t[band]))
    elapsed = time.perf_counter() - t0
    ok = abs(mean_db - 4.77) <= 1.5 and elapsed < 600
    assert verdict(8, ok, f"DF_target mean over 1-6 kHz {mean_db:.2f} dB (target 4.77 +- 1.5) "
                          f"from 50 scenes in {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def two_speaker_manifest(tmp_path_factory, corpus_dir):
    cfg = {"seed": 909, "role": "test", "environment": "anechoic", "scenes": {"count": 12, "num_sources": 2}}
    return build_dataset(cfg, corpus_dir, tmp_path_factory.mktemp("two_speaker"))


def test_criterion_09_ls_beamformer(verdict, two_speaker_manifest):
    array = build_array(0.03)
    w = design_ls_beamformer(array, preset("dma1"), wng_min_db=-15.0)
    min_wng = float(np.min(w.wng_db))
    on_axis = np.abs(beampattern(w, array, angle_grid=np.array([0.0]))[:, 0])
    distortion = float(np.max(np.abs(20 * np.log10(on_axis))))
    oracle = evaluate_manifest(two_speaker_manifest, "oracle").sdr_db
    ls = evaluate_manifest(two_speaker_manifest, "ls").sdr_db
    ok = min_wng >= -15.0 and distortion <= 0.1 and oracle - ls >= 5.0
    assert verdict(9, ok, f"min WNG {min_wng:.3f} dB, on-axis deviation {distortion:.1e} dB, "
                          f"SDR oracle {oracle:.2f} dB vs LS {ls:.2f} dB (gap {oracle - ls:.2f} dB)")
    assert ok


def test_criterion_10_losses(verdict):
    rng = np.random.default_rng(10)
    z = rng.standard_normal((4, 1000))
    exact = loss_tsdr(z, z) == -40.0 and loss_l1(z, z) == 0.0
    l1_zero = loss_l1(z, np.zeros_like(z))
    perm_ok = True
    for _ in range(1000):
        b, n = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        zz, zh = rng.standard_normal((b, n)), rng.standard_normal((b, n))
        p = rng.permutation(b)
        perm_ok &= math.isclose(loss_tsdr(zz[p], zh[p]), loss_tsdr(zz, zh), rel_tol=1e-12, abs_tol=1e-12)
        perm_ok &= math.isclose(loss_l1(zz[p], zh[p]), loss_l1(zz, zh), rel_tol=1e-12, abs_tol=1e-12)
    ok = exact and 1 - 1e-6 <= l1_zero <= 1 and perm_ok
    assert verdict(10, ok, f"tSDR/L1 identities exact {exact}, L1 vs zero {l1_zero:.9f}, "
                           f"permutation-invariant over 1000 trials {perm_ok}")
    assert ok


def test_criterion_11_planner(verdict):
    rng = np.random.default_rng(11)
    scenes = []
    for i in range(200):
        az = float(rng.uniform(-15, 15) % 360) if i % 10 == 0 else float(rng.uniform(40, 320))
        scenes.append({"spec": {"sources": [{"azimuth_deg": az}]}})
    manifest = {"scenes": [scenes[i] for i in rng.permutation(200)]}
    near = [abs((s["spec"]["sources"][0]["azimuth_deg"] + 180) % 360 - 180) <= 20 for s in manifest["scenes"]]
    batches = plan_minibatches(manifest, 10, seed=5)
    covered = all(any(near[i] for i in b) for b in batches)
    partition = sorted(i for b in batches for i in b) == list(range(200)) and all(len(b) == 10 for b in batches)
    deterministic = batches == plan_minibatches(manifest, 10, seed=5)
    ok = sum(near) == 20 and covered and partition and deterministic
    assert verdict(11, ok, f"{len(batches)} batches, all hold a near-target sample {covered}, "
                           f"partition {partition}, deterministic {deterministic}")
    assert ok


def test_criterion_12_aliasing_scaling(verdict):
    freqs = np.arange(1, 513) * FS / 512  # 31.25 Hz bins up to 16 kHz
    onset = {}
    for d in (0.03, 0.06):
        arr = build_array(d)
        onset[d] = grating_lobe_onset(design_ls_beamformer(arr, preset("dma1"), freqs=freqs), arr)
    bin_hz = FS / 512
    gap = abs(onset[0.03] - 2 * onset[0.06])
    ok = gap <= bin_hz + 1e-9
    assert verdict(12, ok, f"onset 3 cm {onset[0.03]:.2f} Hz, 6 cm {onset[0.06]:.2f} Hz, ratio "
                           f"{onset[0.03] / onset[0.06]:.4f}, |f3 - 2 f6| = {gap:.2f} Hz (bin {bin_hz} Hz)")
    assert ok


def test_criterion_13_format_round_trips(verdict, tmp_path, anechoic_manifest):
    rng = np.random.default_rng(13)
    wav_ok = tensor_ok = True
    for i in range(1000):
        x = rng.standard_normal(int(rng.integers(1, 4000))).astype(np.float32) * rng.uniform(0.01, 10)
        write_wav(tmp_path / "r.wav", x)
        wav_ok &= np.array_equal(read_wav(tmp_path / "r.wav")[0], x)
        shape = tuple(int(s) for s in rng.integers(1, 7, size=rng.integers(1, 5)))
        if rng.random() < 0.5:
            t = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(np.complex64)
        else:
            t = rng.standard_normal(shape).astype(np.float32)
        write_tensor(tmp_path / "r.ndfm", t)
        back = read_tensor(tmp_path / "r.ndfm")
        tensor_ok &= back.dtype == t.dtype and np.array_equal(back, t)
    ds = tmp_path / "ds"
    shutil.copytree(anechoic_manifest.parent, ds)
    man = ds / anechoic_manifest.name
    victim = load_manifest(man)["scenes"][2]
    p = ds / victim["files"]["direct"][0]
    write_wav(p, 2 * read_wav(p)[0])
    hits = misses = 0
    for seed in range(30):
        rep = validate_manifest(man, sample_size=2, seed=seed)
        if victim["scene_id"] in rep.checked_scenes:
            flagged = any(v.kind == "stem-consistency" and v.scene_id == victim["scene_id"] for v in rep.violations)
            hits += flagged
            misses += not flagged
    ok = wav_ok and tensor_ok and hits > 0 and misses == 0
    assert verdict(13, ok, f"WAV bit-exact {wav_ok}, NDFM bit-exact {tensor_ok} over 1000 trials each; "
                           f"tampering caught in {hits}/{hits + misses} samples containing it")
    assert ok
