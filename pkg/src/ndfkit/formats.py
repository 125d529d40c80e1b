"""WAV audio, the NDFM binary tensor format, and dataset manifests.

NDFM layout (little-endian throughout)::

    bytes 0-3   magic b"NDFM"
    u16         version (1)
    u16         dtype code: 0 = complex64 (interleaved float32 re/im), 1 = float32
    u16         ndim (>= 1)
    u32 * ndim  shape
    payload     row-major values
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import FormatError

SAMPLE_RATE = 16000
MAGIC = b"NDFM"
VERSION = 1
DTYPES = {0: np.dtype("<c8"), 1: np.dtype("<f4")}
MASK_BINS = 257
MANIFEST_FORMAT = "ndfkit-manifest"
MANIFEST_VERSION = 1


def write_wav(path, signal, sample_rate=SAMPLE_RATE):
    """Write float32 WAV; ``signal`` is ``(N,)`` or channel-first ``(C, N)``."""
    x = np.asarray(signal, dtype=np.float32)
    if x.ndim == 2:
        x = x.T
    elif x.ndim != 1:
        raise FormatError(f"cannot write a {x.ndim}-d array as audio")
    wavfile.write(os.fspath(path), sample_rate, np.ascontiguousarray(x))


def read_wav(path, strict=True):
    """Read a WAV file; returns float samples (mono ``(N,)`` or ``(C, N)``) and the rate.

    In strict mode anything other than 16 kHz is rejected.
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (ValueError, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if strict and rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if data.dtype.kind in "iu":
        info = np.iinfo(data.dtype)
        data = (data.astype(np.float64) - (info.max + 1 if data.dtype.kind == "u" else 0)) / (info.max + 1)
    if data.ndim == 2:
        data = data.T
    return data, rate


def write_tensor(path, tensor, role=None):
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        raise FormatError("0-dimensional tensors are not representable")
    _check_role(arr.shape, role)
    code = 0 if np.iscomplexobj(arr) else 1
    arr = np.ascontiguousarray(arr, dtype=DTYPES[code])
    header = MAGIC + struct.pack("<HHH", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path, role=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an NDFM tensor (bad magic)")
    version, code, ndim = struct.unpack_from("<HHH", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported NDFM version {version}")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim == 0:
        raise FormatError(f"{path}: 0-dimensional tensor")
    offset = 10 + 4 * ndim
    if len(blob) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 10)
    dtype = DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes, header implies {expected}")
    _check_role(shape, role)
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).copy()


def _check_role(shape, role):
    if role is None:
        return
    if role == "mask":
        if len(shape) != 2 or shape[0] != MASK_BINS:
            raise FormatError(f"mask tensors must be ({MASK_BINS}, T), got {tuple(shape)}")
    elif role == "weights":
        if len(shape) != 2:
            raise FormatError(f"weight tensors must be (F, Q), got {tuple(shape)}")
    else:
        raise FormatError(f"unknown tensor role {role!r}")


def mask_filename(scene_id, steering_deg):
    """File name under which an external mask for one (scene, steering) pair is expected."""
    return f"{scene_id}__steer{steering_deg:g}.ndfm"


def save_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


@dataclass
class Violation:
    kind: str
    scene_id: str | None
    detail: str

    def __str__(self):
        where = f"[{self.scene_id}] " if self.scene_id else ""
        return f"{self.kind}: {where}{self.detail}"


@dataclass
class ValidationReport:
    path: str
    checked_scenes: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return {"path": self.path, "ok": self.ok, "checked_scenes": self.checked_scenes,
                "violations": [vars(v) for v in self.violations]}


_TOP_KEYS = ("format", "version", "seed", "role", "array", "pattern", "steering_deg", "scenes")
_SCENE_KEYS = ("scene_id", "seed", "spec", "files")
_FILE_KEYS = ("mics", "targets", "direct", "reverb", "reference_clean")


def _scene_paths(files):
    yield from files.get("mics", [])
    yield from files.get("targets", {}).values()
    yield from files.get("direct", [])
    yield from files.get("reverb", [])
    if "reference_clean" in files:
        yield files["reference_clean"]


def validate_manifest(path, sample_size=None, seed=0, tolerance=1e-5):
    """Collect schema, missing-file and stem-consistency violations.

    Stem consistency is checked on ``sample_size`` randomly chosen scenes (all
    scenes when ``None``): the per-source direct and reverberant stems must
    sum to the clean reference-mic signal up to a relative residual energy of
    ``tolerance`` (float32 storage rounding).
    """
    from .scenes import SceneSpec  # avoids an import cycle

    report = ValidationReport(os.fspath(path))
    try:
        doc = load_manifest(path)
    except (OSError, FormatError) as exc:
        report.violations.append(Violation("unreadable", None, str(exc)))
        return report
    root = Path(path).parent
    for key in _TOP_KEYS:
        if key not in doc:
            report.violations.append(Violation("schema", None, f"missing top-level key {key!r}"))
    if doc.get("format") not in (None, MANIFEST_FORMAT):
        report.violations.append(Violation("schema", None, f"unexpected format {doc.get('format')!r}"))
    scenes = doc.get("scenes", [])
    intact = []
    for rec in scenes:
        sid = rec.get("scene_id")
        bad = [k for k in _SCENE_KEYS if k not in rec]
        bad += [f"files.{k}" for k in _FILE_KEYS if k not in rec.get("files", {})]
        if bad:
            report.violations.append(Violation("schema", sid, f"missing keys {bad}"))
            continue
        try:
            spec = SceneSpec.from_dict(rec["spec"])
            if spec.to_dict() != rec["spec"]:
                report.violations.append(Violation("schema", sid, "scene spec does not round-trip"))
        except (KeyError, TypeError, ValueError) as exc:
            report.violations.append(Violation("schema", sid, f"unparseable scene spec ({exc})"))
        missing = [p for p in _scene_paths(rec["files"]) if not (root / p).is_file()]
        for p in missing:
            report.violations.append(Violation("missing-path", sid, p))
        if not missing:
            intact.append(rec)
    rng = np.random.default_rng(seed)
    if sample_size is not None and sample_size < len(intact):
        picks = sorted(rng.choice(len(intact), size=sample_size, replace=False))
        intact = [intact[i] for i in picks]
    for rec in intact:
        sid = rec["scene_id"]
        report.checked_scenes.append(sid)
        try:
            files = rec["files"]
            ref, _ = read_wav(root / files["reference_clean"])
            total = np.zeros_like(ref, dtype=np.float64)
            for p in [*files["direct"], *files["reverb"]]:
                stem, _ = read_wav(root / p)
                if stem.shape != ref.shape:
                    raise FormatError(f"{p}: length {stem.shape} differs from reference {ref.shape}")
                total += stem
        except FormatError as exc:
            report.violations.append(Violation("format", sid, str(exc)))
            continue
        energy = float(np.sum(np.square(ref, dtype=np.float64)))
        resid = float(np.sum((total - ref) ** 2))
        if resid > tolerance * max(energy, 1e-20):
            report.violations.append(Violation(
                "stem-consistency", sid, f"stems differ from reference (residual/energy = {resid / max(energy, 1e-20):.3g})"))
    return report
