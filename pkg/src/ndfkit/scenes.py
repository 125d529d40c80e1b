"""Scene sampling and rendering, dataset building, and mini-batch planning."""

from __future__ import annotations

import copy
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import __version__
from .directivity import DirectivityPattern, preset
from .dsp import SAMPLE_RATE, add_sensor_noise, fit_length, loudness_dbfs, select_loud_segment
from .errors import CorpusError, InvalidArgumentError, PlanningError, SamplingError
from .formats import MANIFEST_FORMAT, MANIFEST_VERSION, read_wav, save_manifest, write_wav
from .geometry import SPEED_OF_SOUND, ArrayGeometry, Doa, build_array
from .room import RoomSpec, render_receivers, split_direct_reverb

ROLES = ("train", "val", "test")
ENVIRONMENTS = ("anechoic", "reverberant")
ANECHOIC_DISTANCE = 1.5
ROOM_RANGES = ((6.0, 10.0), (4.0, 8.0), (3.0, 5.0))
RT60_RANGE = (0.2, 0.5)
DISTANCE_RANGE = (0.5, 2.5)
WALL_MARGIN = 1.2
SOURCE_MARGIN = 0.1
LOUDNESS_RANGE = (-33.0, -25.0)
MIN_CLIP_LOUDNESS = -42.0
CLIP_SECONDS = 4.0
DEFAULT_SNR_DB = 30.0
VICINITY_DEG = 20.0


def candidate_grid(role):
    """Candidate source azimuths in degrees for a dataset role."""
    if role == "train":
        return np.arange(72) * 5.0
    if role == "val":
        return np.arange(72) * 5.0 + 2.5
    if role == "test":
        return np.arange(144) * 2.5 + 1.25
    raise InvalidArgumentError(f"unknown role {role!r}; expected one of {ROLES}")


def angular_distance_deg(a, b):
    return np.abs((np.asarray(a, dtype=float) - b + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class SourceSpec:
    azimuth_deg: float
    distance: float
    audio: str = ""
    loudness_dbfs: float = -29.0

    @property
    def doa(self):
        return Doa(math.radians(self.azimuth_deg), 0.0)

    def to_dict(self):
        return {"azimuth_deg": self.azimuth_deg, "distance": self.distance, "audio": self.audio,
                "loudness_dbfs": self.loudness_dbfs}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["azimuth_deg"]), float(d["distance"]), str(d.get("audio", "")),
                   float(d.get("loudness_dbfs", -29.0)))


@dataclass
class SceneSpec:
    environment: str
    room: RoomSpec | None
    array_center: tuple
    array: ArrayGeometry
    sources: list
    pattern: DirectivityPattern
    steering_deg: list
    snr_db: float = DEFAULT_SNR_DB
    rng_seed: int = 0
    role: str = "test"
    scene_id: str = ""

    @property
    def num_sources(self):
        return len(self.sources)

    def mic_positions(self):
        return self.array.placed_at(self.array_center)

    def source_positions(self):
        ref = self.mic_positions()[self.array.reference_index]
        return np.array([ref + s.distance * np.array([math.cos(s.doa.azimuth), math.sin(s.doa.azimuth), 0.0])
                         for s in self.sources])

    def steered_patterns(self):
        return [self.pattern.steered(math.radians(s)) for s in self.steering_deg]

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "role": self.role,
            "environment": self.environment,
            "room": None if self.room is None else self.room.to_dict(),
            "array_center": [float(x) for x in self.array_center],
            "array": self.array.to_dict(),
            "sources": [s.to_dict() for s in self.sources],
            "pattern": self.pattern.to_dict(),
            "steering_deg": [float(s) for s in self.steering_deg],
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            environment=d["environment"],
            room=None if d["room"] is None else RoomSpec.from_dict(d["room"]),
            array_center=tuple(float(x) for x in d["array_center"]),
            array=ArrayGeometry.from_dict(d["array"]),
            sources=[SourceSpec.from_dict(s) for s in d["sources"]],
            pattern=DirectivityPattern.from_dict(d["pattern"]),
            steering_deg=[float(s) for s in d["steering_deg"]],
            snr_db=math.inf if d["snr_db"] is None else float(d["snr_db"]),
            rng_seed=int(d["rng_seed"]),
            role=d.get("role", "test"),
            scene_id=d.get("scene_id", ""),
        )


def _placement_ok(room, center, azimuths, distances):
    for az, dist in zip(azimuths, distances):
        p = center + dist * np.array([math.cos(math.radians(az)), math.sin(math.radians(az)), 0.0])
        if not room.contains(p, SOURCE_MARGIN):
            return False
    return True


def sample_scene(role, environment, pattern, rng, *, array=None, num_sources=None, doas_deg=None,
                 steering_deg=(0.0,), snr_db=DEFAULT_SNR_DB, distance=None, rt60_range=RT60_RANGE,
                 distance_range=DISTANCE_RANGE, audio=(), max_tries=1000, scene_id=""):
    """Draw a random scene.

    Anechoic scenes put every source 1.5 m from the reference mic. For
    reverberant scenes the room, RT60 and distances are drawn from the
    configured ranges and the array position is rejection-sampled so the
    array keeps ``WALL_MARGIN`` from every wall and all sources stay inside
    the room. Sources sit at array height.
    """
    if environment not in ENVIRONMENTS:
        raise InvalidArgumentError(f"unknown environment {environment!r}")
    array = array or build_array(0.03)
    grid = candidate_grid(role)
    n = int(rng.integers(1, 4)) if num_sources is None else int(num_sources)
    if doas_deg is None:
        doas = [float(x) for x in rng.choice(grid, size=n, replace=False)]
    else:
        doas = [float(x) for x in doas_deg]
        n = len(doas)
    loudness = [float(x) for x in rng.uniform(*LOUDNESS_RANGE, size=n)]
    seed = int(rng.integers(0, 2**31 - 1))
    audio = list(audio) + [""] * (n - len(audio))
    template = pattern.steered(0.0, 0.0)

    if environment == "anechoic":
        dists = [ANECHOIC_DISTANCE if distance is None else float(distance)] * n
        room, center = None, (0.0, 0.0, 0.0)
    else:
        for _ in range(max_tries):
            dims = tuple(float(rng.uniform(lo, hi)) for lo, hi in ROOM_RANGES)
            rt60 = float(rng.uniform(*rt60_range))
            dists = [float(rng.uniform(*distance_range)) if distance is None else float(distance) for _ in range(n)]
            c = np.array([rng.uniform(WALL_MARGIN, dims[i] - WALL_MARGIN) for i in range(3)])
            if _placement_ok(RoomSpec(dims, rt60), c, doas, dists):
                room, center = RoomSpec(dims, rt60), tuple(float(x) for x in c)
                break
        else:
            raise SamplingError(f"no valid placement found in {max_tries} tries")
    sources = [SourceSpec(a, d, au, ld) for a, d, au, ld in zip(doas, dists, audio, loudness)]
    return SceneSpec(environment, room, center, array, sources, template, [float(s) for s in steering_deg],
                     float(snr_db), seed, role, scene_id)


@dataclass
class SceneRender:
    spec: SceneSpec
    mic_signals: np.ndarray  # (Q, N), with sensor noise
    mic_clean: np.ndarray  # (Q, N)
    vdm_targets: np.ndarray  # (S, N), one per steering direction
    direct_stems: np.ndarray  # (N_src, N) at the reference mic
    reverb_stems: np.ndarray
    steering_deg: list = field(default_factory=list)

    @property
    def doas(self):
        return [s.doa for s in self.spec.sources]

    @property
    def reference(self):
        return self.mic_signals[self.spec.array.reference_index]

    @property
    def reference_clean(self):
        return self.mic_clean[self.spec.array.reference_index]

    @property
    def y_dir(self):
        return self.direct_stems.sum(axis=0)

    @property
    def y_rvb(self):
        return self.reverb_stems.sum(axis=0)

    @property
    def noise(self):
        return self.mic_signals - self.mic_clean

    def target(self, steering_deg):
        for i, s in enumerate(self.steering_deg):
            if abs(s - steering_deg) < 1e-9:
                return self.vdm_targets[i]
        raise InvalidArgumentError(f"no target rendered for steering {steering_deg} deg")


def _conv(x, h, n):
    if not np.any(h):
        return np.zeros(n)
    return fftconvolve(x, h)[:n]


def render_scene(spec, audio, c=SPEED_OF_SOUND, fs=SAMPLE_RATE):
    """Render microphone mixtures, VDM targets and reference-mic stems.

    Each source is scaled so its convolved reference-mic signal reaches the
    loudness stored in its spec. The reference-mic channel and every VDM
    target are assembled from the same direct/reverberant split, so stems
    add up to the reference channel exactly, and an omnidirectional target
    equals the clean reference channel exactly.
    """
    if audio is None or len(audio) != spec.num_sources:
        raise InvalidArgumentError(f"scene has {spec.num_sources} sources but {0 if audio is None else len(audio)} audio clips")
    n = len(audio[0])
    if any(len(a) != n for a in audio):
        raise InvalidArgumentError("source clips must share one length")
    mics = spec.mic_positions()
    ref = spec.array.reference_index
    patterns = [(ref, p) for p in spec.steered_patterns()]
    S, Q = len(patterns), len(mics)
    mic_clean = np.zeros((Q, n))
    targets = np.zeros((S, n))
    direct = np.zeros((spec.num_sources, n))
    reverb = np.zeros((spec.num_sources, n))
    for k, (src, pos) in enumerate(zip(spec.sources, spec.source_positions())):
        x = np.asarray(audio[k], dtype=float)
        omni, vdm = render_receivers(spec.room, pos, mics, patterns, c=c, fs=fs)
        delay = float(np.linalg.norm(pos - mics[ref])) / c
        h_dir, h_rvb = split_direct_reverb(omni[ref], delay, fs)
        d_k, r_k = _conv(x, h_dir, n), _conv(x, h_rvb, n)
        level = loudness_dbfs(d_k + r_k)
        if not math.isfinite(level):
            raise InvalidArgumentError(f"source {k} is silent at the reference microphone")
        g = 10 ** ((src.loudness_dbfs - level) / 20)
        direct[k], reverb[k] = g * d_k, g * r_k
        for q in range(Q):
            if q != ref:
                mic_clean[q] += g * _conv(x, omni[q], n)
        for s in range(S):
            v_dir, v_rvb = split_direct_reverb(vdm[s], delay, fs)
            targets[s] += g * _conv(x, v_dir, n) + g * _conv(x, v_rvb, n)
    for k in range(spec.num_sources):
        mic_clean[ref] += direct[k] + reverb[k]
    noise_seed = np.random.SeedSequence([spec.rng_seed, 1])
    noisy = add_sensor_noise(mic_clean, spec.snr_db, noise_seed)
    return SceneRender(spec, noisy, mic_clean, targets, direct, reverb, list(spec.steering_deg))


# -- source audio -----------------------------------------------------------------------


def synth_source(duration, rng, kind="speech", fs=SAMPLE_RATE):
    """Speech-like (or noise-like) test signal for corpus-free runs.

    The speech-like signal alternates voiced syllables (a jittered harmonic
    series with a decaying spectral tilt), fricative noise bursts and short
    pauses, so it is broadband, non-stationary and sparse in the STFT
    domain without being a recording.
    """
    n = int(round(duration * fs))
    if kind == "noise":
        x = rng.standard_normal(n)
        b = np.array([1.0, -0.9])
        return np.convolve(x, b, mode="same") * np.sqrt(1 + rng.uniform(0, 1) * np.sin(np.linspace(0, 6, n)) ** 2)
    out = np.zeros(n)
    t = 0
    while t < n:
        seg = int(rng.uniform(0.12, 0.3) * fs)
        seg = min(seg, n - t)
        kind_draw = rng.uniform()
        tt = np.arange(seg) / fs
        env = np.sin(np.pi * np.arange(seg) / max(seg, 1)) ** 2
        if kind_draw < 0.6:
            f0 = rng.uniform(90, 240) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * tt))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            harm = np.arange(1, int(7800 / f0.max()))
            amps = harm ** -1.0 * (1 + 2 * np.exp(-((harm * f0.mean() - rng.uniform(400, 900)) / 300) ** 2))
            voiced = np.sum(amps[:, None] * np.sin(harm[:, None] * phase[None, :] + rng.uniform(0, 2 * np.pi, len(harm))[:, None]), axis=0)
            out[t:t + seg] = env * voiced
        elif kind_draw < 0.85:
            noise = np.diff(rng.standard_normal(seg + 1))
            out[t:t + seg] = 0.6 * env * noise
        t += seg
        t += int(rng.uniform(0.02, 0.12) * fs)  # pause
    return out / (np.max(np.abs(out)) + 1e-12) * 0.5


def write_synthetic_corpus(directory, count, seed=0, duration=5.0, kind="speech"):
    """Write ``count`` synthetic mono 16 kHz clips; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        p = d / f"{kind}_{i:04d}.wav"
        write_wav(p, synth_source(duration, rng, kind))
        paths.append(p)
    return paths


def list_corpus(corpus_dir, kind="speech"):
    """Usable clips in ``corpus_dir`` (relative paths, sorted).

    Speech clips quieter than ``MIN_CLIP_LOUDNESS`` are excluded.
    """
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    files = sorted(p for p in root.rglob("*.wav"))
    keep = []
    for p in files:
        x, _ = read_wav(p)
        if x.ndim != 1:
            continue
        if kind == "speech" and loudness_dbfs(x) < MIN_CLIP_LOUDNESS:
            continue
        keep.append(p.relative_to(root).as_posix())
    return keep


def prepare_sources(clips, kind="speech", duration=CLIP_SECONDS, fs=SAMPLE_RATE):
    """Trim/pad source clips to a fixed length.

    Speech clips are cut to their first segment louder than the clip
    average; several noise clips are first trimmed to the shortest one.
    """
    n = int(round(duration * fs))
    clips = [np.asarray(c, dtype=float) for c in clips]
    if kind == "speech":
        return [fit_length(select_loud_segment(c, duration, fs), n) for c in clips]
    if len(clips) > 1:
        shortest = min(len(c) for c in clips)
        clips = [c[:shortest] for c in clips]
    return [fit_length(c, n) for c in clips]


# -- datasets -------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "role": "test",
    "environment": "anechoic",
    "scenes": {"count": 100, "num_sources": 2},
    "array": {"diameter": 0.03},
    "pattern": {"preset": "dma1", "floor": 0.01},
    "steering_deg": [0.0],
    "snr_db": DEFAULT_SNR_DB,
    "corpus": {"kind": "speech"},
    "rt60_range": list(RT60_RANGE),
    "distance_range": list(DISTANCE_RANGE),
    "distance": None,
}


def resolve_config(config):
    """Deep-merge ``config`` over the defaults; unknown keys are rejected."""
    out = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src, prefix=""):
        for k, v in src.items():
            if k not in dst:
                raise InvalidArgumentError(f"unknown config key {prefix + k!r}")
            if isinstance(dst[k], dict) and isinstance(v, dict):
                merge(dst[k], v, prefix + k + ".")
            else:
                dst[k] = v

    merge(out, config or {})
    if out["role"] not in ROLES:
        raise InvalidArgumentError(f"unknown role {out['role']!r}")
    if out["environment"] not in ENVIRONMENTS:
        raise InvalidArgumentError(f"unknown environment {out['environment']!r}")
    return out


def pattern_from_config(cfg):
    p = cfg["pattern"]
    if "preset" in p:
        return preset(p["preset"], 0.0, p.get("floor", 0.01))
    return DirectivityPattern.from_dict(p)


def balanced_doa_plan(grid, count, per_scene, rng):
    """Assign ``per_scene`` distinct DOAs to each of ``count`` scenes, cycling
    through shuffled copies of the grid so every direction is used equally often."""
    grid = list(grid)
    if per_scene > len(grid):
        raise InvalidArgumentError("more sources per scene than candidate directions")
    pool = []
    plan = []
    for _ in range(count):
        chosen = []
        while len(chosen) < per_scene:
            if not pool:
                pool = [grid[i] for i in rng.permutation(len(grid))]
            j = next((i for i, a in enumerate(pool) if a not in chosen), None)
            if j is None:
                pool.extend(grid[i] for i in rng.permutation(len(grid)))
                continue
            chosen.append(pool.pop(j))
        plan.append(chosen)
    return plan


def scene_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def plan_scenes(cfg, corpus):
    """Scene specs for a resolved config; ``corpus`` is the list of usable clip paths."""
    count = int(cfg["scenes"]["count"])
    per = cfg["scenes"]["num_sources"]
    array = build_array(float(cfg["array"]["diameter"]))
    pattern = pattern_from_config(cfg)
    snr = math.inf if cfg["snr_db"] is None else float(cfg["snr_db"])
    grid = candidate_grid(cfg["role"])
    plan = None
    if cfg["role"] == "test" and isinstance(per, int):
        plan = balanced_doa_plan(grid, count, per, np.random.default_rng(np.random.SeedSequence(int(cfg["seed"]), spawn_key=(1,))))
    max_sources = per if isinstance(per, int) else 3
    if len(corpus) < max_sources:
        raise CorpusError(f"corpus holds {len(corpus)} usable clips, scenes need up to {max_sources}")
    specs = []
    for i in range(count):
        rng = scene_rng(cfg["seed"], i)
        n = per if isinstance(per, int) else int(rng.choice(per))
        clips = [corpus[j] for j in rng.choice(len(corpus), size=n, replace=False)]
        specs.append(sample_scene(
            cfg["role"], cfg["environment"], pattern, rng, array=array, num_sources=n,
            doas_deg=None if plan is None else plan[i], steering_deg=cfg["steering_deg"], snr_db=snr,
            distance=cfg["distance"], rt60_range=tuple(cfg["rt60_range"]),
            distance_range=tuple(cfg["distance_range"]), audio=clips, scene_id=f"{cfg['role']}_{i:05d}"))
    return specs


def _render_and_write(args):
    spec_dict, corpus_dir, kind, out_dir = args
    spec = SceneSpec.from_dict(spec_dict)
    clips = [read_wav(Path(corpus_dir) / s.audio)[0] for s in spec.sources]
    render = render_scene(spec, prepare_sources(clips, kind))
    return write_render(render, out_dir)


def write_render(render, out_dir):
    """Write one scene's WAV files below ``out_dir``; returns the manifest record."""
    spec = render.spec
    rel = Path("scenes") / spec.scene_id
    d = Path(out_dir) / rel
    d.mkdir(parents=True, exist_ok=True)
    files = {"mics": [], "targets": {}, "direct": [], "reverb": []}
    for q, x in enumerate(render.mic_signals):
        write_wav(d / f"mic{q}.wav", x)
        files["mics"].append((rel / f"mic{q}.wav").as_posix())
    for s, x in zip(render.steering_deg, render.vdm_targets):
        name = f"target_steer{s:g}.wav"
        write_wav(d / name, x)
        files["targets"][f"{s:g}"] = (rel / name).as_posix()
    for k in range(spec.num_sources):
        write_wav(d / f"direct{k}.wav", render.direct_stems[k])
        write_wav(d / f"reverb{k}.wav", render.reverb_stems[k])
        files["direct"].append((rel / f"direct{k}.wav").as_posix())
        files["reverb"].append((rel / f"reverb{k}.wav").as_posix())
    write_wav(d / "reference_clean.wav", render.reference_clean)
    files["reference_clean"] = (rel / "reference_clean.wav").as_posix()
    return {"scene_id": spec.scene_id, "seed": spec.rng_seed, "spec": spec.to_dict(), "files": files}


def build_dataset(config, corpus_dir, out_dir, workers=1):
    """Render every scene of a config and write ``manifest.json`` into ``out_dir``.

    Per-scene seeds derive from (global seed, scene index), so the output
    does not depend on ``workers``. Returns the manifest path.
    """
    cfg = resolve_config(config)
    kind = cfg["corpus"]["kind"]
    corpus = list_corpus(corpus_dir, kind)
    specs = plan_scenes(cfg, corpus)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(s.to_dict(), os.fspath(corpus_dir), kind, os.fspath(out)) for s in specs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_render_and_write, jobs))
    else:
        records = [_render_and_write(j) for j in jobs]
    array = build_array(float(cfg["array"]["diameter"]))
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "toolkit_version": __version__,
        "seed": cfg["seed"],
        "role": cfg["role"],
        "array": array.to_dict(),
        "pattern": pattern_from_config(cfg).to_dict(),
        "steering_deg": [float(s) for s in cfg["steering_deg"]],
        "config": cfg,
        "scenes": records,
    }
    path = out / "manifest.json"
    save_manifest(path, manifest)
    return path


def load_render(manifest_path, record):
    """Rebuild a :class:`SceneRender` from the WAV files of a manifest record."""
    root = Path(manifest_path).parent
    spec = SceneSpec.from_dict(record["spec"])
    files = record["files"]

    def load(p):
        return read_wav(root / p)[0].astype(float)

    mics = np.stack([load(p) for p in files["mics"]])
    direct = np.stack([load(p) for p in files["direct"]])
    reverb = np.stack([load(p) for p in files["reverb"]])
    steer = [float(s) for s in spec.steering_deg]
    targets = np.stack([load(files["targets"][f"{s:g}"]) for s in steer])
    clean = mics.copy()
    clean[spec.array.reference_index] = load(files["reference_clean"])
    return SceneRender(spec, mics, clean, targets, direct, reverb, steer)


# -- mini-batch planning --------------------------------------------------------------


def _scene_doas(manifest):
    if isinstance(manifest, dict):
        return [[s["azimuth_deg"] for s in rec["spec"]["sources"]] for rec in manifest["scenes"]]
    return [list(d) for d in manifest]


def plan_minibatches(manifest, batch_size, vicinity_deg=VICINITY_DEG, steering_deg=0.0, seed=0):
    """Shuffle scene indices into batches that each hold a near-target sample.

    A sample is near-target if any of its sources lies within
    ``vicinity_deg`` of the steering direction. ``manifest`` is a manifest
    dict or a list of per-scene DOA lists (degrees).
    """
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be at least 1")
    doas = _scene_doas(manifest)
    K = len(doas)
    if K == 0:
        return []
    near_flags = [bool(d) and bool(np.any(angular_distance_deg(d, steering_deg) <= vicinity_deg)) for d in doas]
    rng = np.random.default_rng(seed)
    near = [i for i in rng.permutation(K) if near_flags[i]]
    far = [i for i in rng.permutation(K) if not near_flags[i]]
    num_batches = math.ceil(K / batch_size)
    if len(near) < num_batches:
        deficit = num_batches - len(near)
        raise PlanningError(
            f"{num_batches} batches need a near-target sample each but only {len(near)} exist (deficit {deficit})",
            deficit)
    rest = near[num_batches:] + far
    rest = [rest[i] for i in rng.permutation(len(rest))]
    sizes = [batch_size] * (K // batch_size) + ([K % batch_size] if K % batch_size else [])
    batches = []
    pos = 0
    for b, size in enumerate(sizes):
        batch = [int(near[b])] + [int(i) for i in rest[pos:pos + size - 1]]
        pos += size - 1
        batches.append([batch[i] for i in rng.permutation(len(batch))])
    return batches


def save_config(path, cfg):
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
