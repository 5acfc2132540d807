import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from savfi import dataio


def test_round_trip_ones(tmp_path):
    t = np.ones((3, 4), np.float32)
    dataio.write_tensor(tmp_path / "a.vfit", t)
    back = dataio.read_tensor(tmp_path / "a.vfit")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, t)


def test_header_bytes_2x2():
    raw = dataio.encode_tensor(np.zeros((2, 2), np.float32))
    assert raw[:7] == bytes([0x56, 0x46, 0x49, 0x54, 0x01, 0x00, 0x02])
    assert raw[7:23] == bytes([2, 0, 0, 0, 0, 0, 0, 0]) * 2
    assert len(raw) == 23 + 4 * 4


def test_complex_scalar_interleaved():
    raw = dataio.encode_tensor(np.array([1 + 2j], np.complex64))
    assert raw[4:7] == bytes([1, 2, 1])
    assert raw[-8:] == struct.pack("<ff", 1.0, 2.0)


def test_float64_code():
    raw = dataio.encode_tensor(np.zeros(3))
    assert raw[5] == 1
    assert len(raw) == 7 + 8 + 3 * 8


_dtypes = st.sampled_from([np.float32, np.float64, np.complex64])


@settings(max_examples=60, deadline=None)
@given(dtype=_dtypes, shape=hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
       data=st.data())
def test_round_trip_bit_exact(dtype, shape, data):
    if dtype is np.complex64:
        parts = data.draw(hnp.arrays(np.float32, shape + (2,)))
        # reinterpret (re, im) float pairs so every bit pattern survives
        arr = np.ascontiguousarray(parts).view(np.complex64)[..., 0]
    else:
        arr = data.draw(hnp.arrays(dtype, shape))
    raw = dataio.encode_tensor(arr)
    back = dataio.decode_tensor(raw)
    assert back.shape == arr.shape
    # compare bit patterns so NaNs and signed zeros count too
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
    assert dataio.encode_tensor(back) == raw


def test_distinct_errors():
    good = dataio.encode_tensor(np.ones((2, 3), np.float32))
    with pytest.raises(dataio.BadMagicError):
        dataio.decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(dataio.UnsupportedVersionError):
        dataio.decode_tensor(good[:4] + b"\x02" + good[5:])
    with pytest.raises(dataio.UnsupportedDtypeError):
        dataio.decode_tensor(good[:5] + b"\x07" + good[6:])
    with pytest.raises(dataio.TruncatedPayloadError):
        dataio.decode_tensor(good[:-1])
    errs = {dataio.BadMagicError, dataio.UnsupportedVersionError,
            dataio.UnsupportedDtypeError, dataio.TruncatedPayloadError}
    assert len(errs) == 4
    assert all(issubclass(e, dataio.TensorFormatError) for e in errs)


def test_unsupported_write_dtype_and_zero_dim():
    with pytest.raises(dataio.UnsupportedDtypeError):
        dataio.encode_tensor(np.zeros(3, np.int32))
    with pytest.raises(ValueError):
        dataio.encode_tensor(np.zeros((0, 3), np.float32))


def test_little_endian_regardless_of_input_order():
    big = np.arange(4, dtype=">f4")
    raw = dataio.encode_tensor(big)
    assert raw[-4:] == struct.pack("<f", 3.0)


def test_tensor_dims_reads_header_only(tmp_path):
    dataio.write_tensor(tmp_path / "t.vfit", np.zeros((5, 2, 3), np.complex64))
    assert dataio.tensor_dims(tmp_path / "t.vfit") == (5, 2, 3)


def test_sidecar_round_trip(tmp_path):
    meta = {"fs": 40e6, "t0": 1.2345678901234567e-5, "src": np.array([0.1, -0.2])}
    dataio.write_sidecar(tmp_path / "x.vfit", meta)
    back = dataio.read_sidecar(tmp_path / "x.vfit")
    assert float(back["t0"]) == meta["t0"]
    assert [float(v) for v in back["src"].split(",")] == [0.1, -0.2]


# -- manifests ----------------------------------------------------------------


def _write_entry(folder, i, frames=5, size=8, mask=True):
    dataio.write_tensor(folder / f"in{i}.vfit", np.ones((frames, size, size), np.complex64))
    dataio.write_tensor(folder / f"gt{i}.vfit", np.zeros((frames, 2, size, size), np.float32))
    if mask:
        dataio.write_tensor(folder / f"m{i}.vfit", np.ones((size, size), np.float32))
    m = f"m{i}.vfit" if mask else "-"
    return f"input=in{i}.vfit truth=gt{i}.vfit mask={m} tag=straight90 seed={i}"


def test_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("")
    man = dataio.load_manifest(tmp_path / "m.txt")
    assert man.entries == []


def test_missing_file_named(tmp_path):
    (tmp_path / "m.txt").write_text("input=nothere.vfit truth=gt.vfit mask=- tag=a seed=1\n")
    with pytest.raises(dataio.MissingFileError) as err:
        dataio.load_manifest(tmp_path / "m.txt")
    assert "missing file" in str(err.value)
    assert "nothere.vfit" in str(err.value)


def test_ten_entries(tmp_path):
    lines = ["pitch_m=5e-05", "frame_dt_s=0.001"]
    lines += [_write_entry(tmp_path, i, mask=i % 2 == 0) for i in range(10)]
    (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
    man = dataio.load_manifest(tmp_path / "m.txt")
    assert len(man.entries) == 10
    assert man.pitch_m == 5e-5
    assert man.frame_dt_s == 1e-3
    assert man.entries[1].mask is None
    assert man.entries[3].seed == 3


def test_inconsistent_dims(tmp_path):
    line = _write_entry(tmp_path, 0)
    dataio.write_tensor(tmp_path / "gt0.vfit", np.zeros((5, 2, 8, 9), np.float32))
    (tmp_path / "m.txt").write_text(line + "\n")
    with pytest.raises(dataio.InconsistentDimsError):
        dataio.load_manifest(tmp_path / "m.txt")


def test_nonpositive_interval_rejected(tmp_path):
    (tmp_path / "m.txt").write_text("frame_dt_s=0\n")
    with pytest.raises(dataio.ManifestError):
        dataio.load_manifest(tmp_path / "m.txt")


def test_manifest_save_load_round_trip(tmp_path):
    lines = [_write_entry(tmp_path, i) for i in range(3)]
    (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
    man = dataio.load_manifest(tmp_path / "m.txt")
    dataio.save_manifest(tmp_path / "m2.txt", man)
    again = dataio.load_manifest(tmp_path / "m2.txt")
    assert again == man
    assert "in0.vfit" in (tmp_path / "m2.txt").read_text()
