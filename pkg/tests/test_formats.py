import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.io import wavfile

from ndfkit.errors import FormatError
from ndfkit.formats import (
    load_manifest,
    mask_filename,
    read_tensor,
    read_wav,
    validate_manifest,
    write_tensor,
    write_wav,
)


def test_wav_round_trip_bit_exact(tmp_path, rng):
    x = rng.standard_normal(64000).astype(np.float32)
    write_wav(tmp_path / "a.wav", x)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000
    assert y.dtype == np.float32 and np.array_equal(x, y)


def test_wav_multichannel(tmp_path, rng):
    x = rng.standard_normal((3, 1000)).astype(np.float32)
    write_wav(tmp_path / "m.wav", x)
    y, _ = read_wav(tmp_path / "m.wav")
    assert np.array_equal(x, y)


def test_wav_wrong_rate(tmp_path):
    wavfile.write(tmp_path / "cd.wav", 44100, np.zeros(100, dtype=np.float32))
    with pytest.raises(FormatError):
        read_wav(tmp_path / "cd.wav")
    _, rate = read_wav(tmp_path / "cd.wav", strict=False)
    assert rate == 44100


def test_wav_empty_file(tmp_path):
    (tmp_path / "empty.wav").write_bytes(b"")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "empty.wav")


def test_wav_garbage_header(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"RIFF\x00\x00junkjunkjunk")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "junk.wav")


def test_wav_int16_scaled(tmp_path):
    wavfile.write(tmp_path / "i.wav", 16000, np.array([0, 16384, -32768], dtype=np.int16))
    y, _ = read_wav(tmp_path / "i.wav")
    np.testing.assert_allclose(y, [0.0, 0.5, -1.0])


def test_mask_round_trip(tmp_path, rng):
    m = (rng.standard_normal((257, 249)) + 1j * rng.standard_normal((257, 249))).astype(np.complex64)
    write_tensor(tmp_path / "m.ndfm", m, role="mask")
    out = read_tensor(tmp_path / "m.ndfm", role="mask")
    assert out.dtype == np.complex64 and np.array_equal(out, m)


def test_header_layout(tmp_path):
    write_tensor(tmp_path / "t.ndfm", np.ones((2, 3), dtype=np.float32))
    blob = (tmp_path / "t.ndfm").read_bytes()
    assert blob[:4] == b"NDFM"
    assert struct.unpack_from("<HHH", blob, 4) == (1, 1, 2)
    assert struct.unpack_from("<2I", blob, 10) == (2, 3)
    assert len(blob) == 18 + 6 * 4
    assert np.frombuffer(blob[18:], "<f4").tolist() == [1.0] * 6


def test_complex_interleaved(tmp_path):
    write_tensor(tmp_path / "c.ndfm", np.array([1 + 2j, 3 - 4j], dtype=np.complex64))
    blob = (tmp_path / "c.ndfm").read_bytes()
    assert np.frombuffer(blob[14:], "<f4").tolist() == [1.0, 2.0, 3.0, -4.0]


def test_wrong_magic(tmp_path):
    write_tensor(tmp_path / "t.ndfm", np.ones(4, dtype=np.float32))
    blob = bytearray((tmp_path / "t.ndfm").read_bytes())
    blob[:4] = b"XXXX"
    (tmp_path / "t.ndfm").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "t.ndfm")


def test_wrong_version(tmp_path):
    write_tensor(tmp_path / "t.ndfm", np.ones(4, dtype=np.float32))
    blob = bytearray((tmp_path / "t.ndfm").read_bytes())
    blob[4:6] = struct.pack("<H", 9)
    (tmp_path / "t.ndfm").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "t.ndfm")


def test_zero_dim_rejected(tmp_path):
    with pytest.raises(FormatError):
        write_tensor(tmp_path / "z.ndfm", np.float32(1.0))
    (tmp_path / "z.ndfm").write_bytes(b"NDFM" + struct.pack("<HHH", 1, 1, 0) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "z.ndfm")


def test_truncated_payload(tmp_path):
    write_tensor(tmp_path / "t.ndfm", np.ones((4, 4), dtype=np.float32))
    blob = (tmp_path / "t.ndfm").read_bytes()
    (tmp_path / "t.ndfm").write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "t.ndfm")


def test_mask_role_shape(tmp_path):
    with pytest.raises(FormatError):
        write_tensor(tmp_path / "m.ndfm", np.ones((256, 10), dtype=np.complex64), role="mask")
    write_tensor(tmp_path / "m.ndfm", np.ones((10, 257), dtype=np.complex64))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "m.ndfm", role="mask")


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.complex64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=6),
                  elements=st.complex_numbers(max_magnitude=1e6, allow_nan=False, width=64)))
def test_tensor_round_trip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("t") / "x.ndfm"
    write_tensor(p, arr)
    assert np.array_equal(read_tensor(p), arr)


def test_mask_filename():
    assert mask_filename("test_00003", 0.0) == "test_00003__steer0.ndfm"
    assert mask_filename("a", 12.5) == "a__steer12.5.ndfm"


def test_fresh_dataset_validates(anechoic_manifest):
    report = validate_manifest(anechoic_manifest)
    assert report.ok, report.violations
    assert len(report.checked_scenes) == len(load_manifest(anechoic_manifest)["scenes"])


def _copy_dataset(src_manifest, dst):
    import shutil

    shutil.copytree(src_manifest.parent, dst)
    return dst / src_manifest.name


def test_deleted_stem_reported(anechoic_manifest, tmp_path):
    man = _copy_dataset(anechoic_manifest, tmp_path / "ds")
    rec = load_manifest(man)["scenes"][1]
    (man.parent / rec["files"]["reverb"][0]).unlink()
    report = validate_manifest(man)
    kinds = [(v.kind, v.scene_id) for v in report.violations]
    assert ("missing-path", rec["scene_id"]) in kinds


def test_tampered_stem_reported(anechoic_manifest, tmp_path):
    man = _copy_dataset(anechoic_manifest, tmp_path / "ds")
    rec = load_manifest(man)["scenes"][0]
    p = man.parent / rec["files"]["direct"][0]
    x, _ = read_wav(p)
    write_wav(p, 2 * x)
    report = validate_manifest(man)
    assert [(v.kind, v.scene_id) for v in report.violations] == [("stem-consistency", rec["scene_id"])]


def test_schema_violation(anechoic_manifest, tmp_path):
    man = _copy_dataset(anechoic_manifest, tmp_path / "ds")
    doc = load_manifest(man)
    del doc["pattern"]
    del doc["scenes"][0]["files"]["targets"]
    man.write_text(json.dumps(doc))
    kinds = [v.kind for v in validate_manifest(man).violations]
    assert kinds.count("schema") == 2


def test_unreadable_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    report = validate_manifest(tmp_path / "m.json")
    assert not report.ok and report.violations[0].kind == "unreadable"
