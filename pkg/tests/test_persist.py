import struct
import zlib

import numpy as np
import pytest

from aranet import persist
from aranet.dosimetry import MaskVolume, Volume
from aranet.persist import (
    BadMagicError,
    CrcMismatchError,
    DtypeShapeError,
    DuplicateNameError,
    FormatError,
    HeaderError,
    TrailingDataError,
    TruncatedError,
)

from _oracles import fuzz_readers


def test_volume_round_trip_is_bit_exact(tmp_path, rng):
    vol = Volume(rng.standard_normal((3, 5, 4)).astype(np.float32), (3.0, 1.25, 1.25))
    persist.write_volume(tmp_path / "a.dvol", vol)
    back = persist.read_volume(tmp_path / "a.dvol")
    assert back.values.tobytes() == vol.values.tobytes()
    assert back.spacing_mm == vol.spacing_mm
    persist.write_volume(tmp_path / "b.dvol", back)
    assert (tmp_path / "a.dvol").read_bytes() == (tmp_path / "b.dvol").read_bytes()


def test_layout_is_row_major_little_endian(tmp_path):
    vol = Volume(np.arange(6, dtype=np.float32).reshape(1, 2, 3))
    persist.write_volume(tmp_path / "v.dvol", vol)
    raw = (tmp_path / "v.dvol").read_bytes()
    header, body = raw.split(b"\n", 1)
    assert header.startswith(b"DVOL1 {")
    assert body == struct.pack("<6f", *range(6))


def test_mask_round_trip_keeps_label(tmp_path, rng):
    mask = MaskVolume(rng.random((2, 3, 4)) < 0.5, "femur_L", (2.0, 2.0, 3.0))
    persist.write_mask(tmp_path / "m.dmask", mask)
    back = persist.read_mask(tmp_path / "m.dmask")
    assert back.label == "femur_L" and np.array_equal(back.values, mask.values)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": np.array([1.5], np.float32),
               "scalar": np.float32(2.0).reshape(())}
    persist.save_checkpoint(tmp_path / "c.ackpt", tensors)
    back = persist.load_checkpoint(tmp_path / "c.ackpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape
    persist.save_checkpoint(tmp_path / "d.ackpt", back)
    assert (tmp_path / "c.ackpt").read_bytes() == (tmp_path / "d.ackpt").read_bytes()


def test_checkpoint_layout():
    blob = persist.encode_checkpoint({"w": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:8] == b"ARACKPT1"
    assert struct.unpack_from("<II", blob, 8) == (1, 1)
    assert struct.unpack_from("<H", blob, 16) == (1,)
    assert blob[18:19] == b"w"
    assert struct.unpack_from("<BII", blob, 19) == (2, 1, 2)
    assert struct.unpack_from("<2f", blob, 28) == (1.0, 2.0)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_duplicate_names_rejected():
    with pytest.raises(DuplicateNameError):
        persist.encode_checkpoint([("a", np.zeros(1)), ("a", np.ones(1))])
    # forge a file with a duplicate and a valid CRC
    one = persist.encode_checkpoint({"a": np.zeros(1, np.float32)})[:-4]
    body = one[16:]
    forged = b"ARACKPT1" + struct.pack("<II", 1, 2) + body + body
    forged += struct.pack("<I", zlib.crc32(forged))
    with pytest.raises(DuplicateNameError):
        persist.decode_checkpoint(forged)


@pytest.mark.parametrize("blob,err", [
    (b"XVOL1 {}\n", BadMagicError),
    (b"DVOL1 " + b"x" * 5000, HeaderError),
    (b"DVOL1 {not json}\n", HeaderError),
    (b'DVOL1 {"shape":[1,1,1],"spacing_mm":[1,1,0],"dtype":"f32le"}\n\0\0\0\0', HeaderError),
    (b'DVOL1 {"shape":[1,1,2],"spacing_mm":[1,1,1],"dtype":"f32le"}\n\0\0\0\0', TruncatedError),
    (b'DVOL1 {"shape":[1,1,1],"spacing_mm":[1,1,1],"dtype":"f32le"}\n\0\0\0\0\0', TrailingDataError),
    (b'DVOL1 {"shape":[1,1,1],"spacing_mm":[1,1,1],"dtype":"f16"}\n\0\0', DtypeShapeError),
    (b'DVOL1 {"shape":[1,-1,1],"spacing_mm":[1,1,1],"dtype":"u8"}\n', HeaderError),
    (b'DVOL1 [1,2]\n', HeaderError),
])
def test_volume_errors_are_typed(blob, err):
    with pytest.raises(err):
        persist.decode_volume(blob)


def test_reader_rejects_wrong_kind_and_nonfinite(tmp_path):
    persist.write_mask(tmp_path / "m.dmask", MaskVolume(np.ones((1, 1, 2), np.uint8), "ptv"))
    with pytest.raises(DtypeShapeError):
        persist.read_volume(tmp_path / "m.dmask")
    nan = persist.encode_volume(np.full((1, 1, 1), np.nan, np.float32), (1, 1, 1), "f32le")
    (tmp_path / "n.dvol").write_bytes(nan)
    with pytest.raises(FormatError):
        persist.read_volume(tmp_path / "n.dvol")
    two = persist.encode_volume(np.full((1, 1, 1), 2, np.uint8), (1, 1, 1), "u8")
    (tmp_path / "t.dmask").write_bytes(two)
    with pytest.raises(FormatError):
        persist.read_mask(tmp_path / "t.dmask")


def test_checkpoint_errors_are_typed():
    good = persist.encode_checkpoint({"a": np.zeros(3, np.float32)})
    with pytest.raises(BadMagicError):
        persist.decode_checkpoint(b"NOTACKPT" + good[8:])
    with pytest.raises(CrcMismatchError):
        persist.decode_checkpoint(good[:-1] + bytes([good[-1] ^ 1]))
    with pytest.raises(FormatError):
        persist.decode_checkpoint(good[:10])
    bad_version = bytearray(good[:-4])
    bad_version[8] = 9
    bad_version += struct.pack("<I", zlib.crc32(bad_version))
    with pytest.raises(HeaderError):
        persist.decode_checkpoint(bytes(bad_version))
    short = bytearray(good[:-8])
    short += struct.pack("<I", zlib.crc32(short))
    with pytest.raises(TruncatedError):
        persist.decode_checkpoint(bytes(short))
    extra = bytearray(good[:-4]) + b"\0"
    extra += struct.pack("<I", zlib.crc32(extra))
    with pytest.raises(TrailingDataError):
        persist.decode_checkpoint(bytes(extra))


def test_single_byte_corruption_never_crashes(tmp_path):
    counts = fuzz_readers(tmp_path, n_cases=300, seed=1)
    assert counts["typed_error"] + counts["accepted"] == 300
    assert counts["ckpt_accepted"] == 0
