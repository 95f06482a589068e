import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smlmforge.io import (
    FormatError,
    psf_from_dict,
    psf_to_dict,
    read_maps,
    read_psf,
    read_smlf,
    read_table,
    read_truth,
    write_maps,
    write_psf,
    write_smlf,
    write_table,
    write_truth,
)
from smlmforge.losses import CHANNELS, OutputMaps
from smlmforge.psf import PixelMap3D, PsfAsParams, PsfDhParams, PsfModel
from smlmforge.simulator import FrameStack
from smlmforge.table import empty_locs, empty_truth


def test_smlf_round_trip(tmp_path, rng):
    frames = rng.normal(100, 30, (3, 5, 7)).astype(np.float32)
    frames[0, 0, 0] = np.float32(1e-38)
    path = tmp_path / "s.smlf"
    write_smlf(FrameStack(frames, pixel_size=107.5), path)
    back = read_smlf(path)
    assert back.frames.dtype == np.float32
    assert back.frames.tobytes() == frames.tobytes()
    assert back.pixel_size == 107.5
    raw = path.read_bytes()
    assert raw[:4] == b"SMLF" and len(raw) == 28 + 4 * frames.size
    assert struct.unpack_from("<IIII", raw, 4) == (1, 7, 5, 3)


def test_smlf_empty_stack(tmp_path):
    path = tmp_path / "e.smlf"
    write_smlf(FrameStack(np.zeros((0, 4, 4), np.float32)), path)
    assert read_smlf(path).frames.shape == (0, 4, 4)


def _write(tmp_path, data):
    path = tmp_path / "x.smlf"
    path.write_bytes(data)
    return path


@pytest.mark.parametrize("data,code", [
    (b"TIFF" + bytes(40), "bad_magic"),
    (b"", "bad_magic"),
    (b"SMLF" + bytes(10), "truncated_payload"),
    (struct.pack("<4sIIIId", b"SMLF", 1, 4, 4, 2, 100.0) + bytes(4 * 16), "truncated_payload"),
    (struct.pack("<4sIIIId", b"SMLF", 2, 1, 1, 1, 100.0) + bytes(4), "bad_version"),
    (struct.pack("<4sIIIId", b"SMLF", 1, 2**31, 2**31, 2**31, 100.0), "dimension_overflow"),
    (struct.pack("<4sIIIId", b"SMLF", 1, 0, 4, 3, 100.0), "dimension_overflow"),
    (struct.pack("<4sIIIId", b"SMLF", 1, 1, 1, 1, 100.0) + bytes(8), "trailing_data"),
    (struct.pack("<4sIIIId", b"SMLF", 1, 1, 1, 1, -1.0) + bytes(4), "bad_header"),
])
def test_smlf_errors(tmp_path, data, code):
    with pytest.raises(FormatError) as err:
        read_smlf(_write(tmp_path, data))
    assert err.value.code == code


def _table(rng, n):
    t = empty_locs(n)
    t["frame"] = np.sort(rng.integers(0, 100, n))
    for c in ("x", "y", "z", "photons", "sig_x", "sig_y", "sig_z"):
        t[c] = rng.normal(0, 1000, n)
    t["prob"] = rng.uniform(0.01, 1, n)
    return t


def test_table_round_trip(tmp_path, rng):
    t = _table(rng, 50)
    t["x"][0] = 0.1 + 0.2
    t["sig_x"][1] = np.inf
    path = tmp_path / "t.csv"
    write_table(t, path)
    assert np.array_equal(read_table(path), t)
    text = path.read_bytes()
    assert text.startswith(b"frame,x_nm,y_nm,z_nm,photons,prob,sig_x,sig_y,sig_z\n")
    assert b"\r" not in text


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=10))
def test_table_round_trip_exact_floats(tmp_path_factory, values):
    t = empty_locs(len(values))
    t["x"] = values
    path = tmp_path_factory.mktemp("t") / "t.csv"
    write_table(t, path)
    assert np.array_equal(read_table(path)["x"], t["x"])


def test_truth_round_trip_and_as_table(tmp_path, rng):
    tr = empty_truth(4)
    tr["frame"] = [0, 0, 1, 3]
    tr["id"] = [7, 8, 7, 9]
    tr["x"], tr["y"], tr["z"], tr["photons"] = rng.normal(size=(4, 4)) * 500
    path = tmp_path / "truth.csv"
    write_truth(tr, path)
    assert np.array_equal(read_truth(path), tr)
    as_locs = read_table(path)
    assert np.array_equal(as_locs["x"], tr["x"])
    assert np.all(as_locs["prob"] == 1.0) and np.all(as_locs["sig_z"] == 0.0)


def test_table_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("frame,x_nm,y_nm,z_nm,photons,prob,sig_x,sig_y\n0,1,2,3,4,1,1,1\n")
    with pytest.raises(FormatError) as err:
        read_table(path)
    assert err.value.code == "missing_column" and "sig_z" in str(err.value)
    path.write_text("")
    with pytest.raises(FormatError):
        read_table(path)


def test_table_non_numeric_reports_row_and_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("frame,x_nm,y_nm,z_nm,photons,prob,sig_x,sig_y,sig_z\n"
                    "0,1,2,3,4,1,1,1,1\n"
                    "1,1,oops,3,4,1,1,1,1\n")
    with pytest.raises(FormatError) as err:
        read_table(path)
    assert err.value.code == "non_numeric"
    assert "row 3" in str(err.value) and "y_nm" in str(err.value)


def test_table_columns_in_any_order(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("sig_z,sig_y,sig_x,prob,photons,z_nm,y_nm,x_nm,frame\n9,8,7,0.5,5,4,3,2,1\n")
    t = read_table(path)
    assert t[0].tolist() == (1, 2.0, 3.0, 4.0, 5.0, 0.5, 7.0, 8.0, 9.0)


def test_psf_json_round_trip(tmp_path, rng):
    pm = PixelMap3D(rng.normal(0, 0.01, (5, 4, 3)), 100.0, 50.0)
    psf = PsfModel(PsfAsParams.from_widths(110.0, 350.0), pm)
    path = tmp_path / "psf.json"
    write_psf(psf, path)
    doc = json.loads(path.read_text())
    assert doc["kind"] == "as" and doc["pixmap"]["dims"] == [3, 4, 5]
    back = read_psf(path)
    assert back.parametric == psf.parametric
    assert np.array_equal(back.pixmap.values, pm.values.astype(np.float32))
    plain = PsfModel(PsfDhParams(1e-4, 0.003, 0.1, 300.0))
    assert psf_from_dict(psf_to_dict(plain)).parametric == plain.parametric


def test_psf_json_errors(tmp_path):
    for doc in ({"kind": "airy", "params": {}}, {"params": {}}, {"kind": "as", "params": {"a": 1.0}}):
        with pytest.raises(FormatError) as err:
            psf_from_dict(doc)
        assert err.value.code == "bad_psf"
    path = tmp_path / "p.json"
    path.write_text("{not json")
    with pytest.raises(FormatError) as err:
        read_psf(path)
    assert err.value.code == "bad_json"


def test_maps_round_trip(tmp_path, rng):
    maps = [OutputMaps(pixel_size=100.0, **{c: rng.uniform(size=(3, 4)).astype(np.float32) for c in CHANNELS})
            for _ in range(2)]
    path = tmp_path / "maps.smlf"
    write_maps(maps, path)
    back = read_maps(path)
    assert len(back) == 2
    for a, b in zip(maps, back):
        for c in CHANNELS:
            assert np.array_equal(getattr(a, c), getattr(b, c))
    side = json.loads((tmp_path / "maps.smlf.json").read_text())
    assert side["channels"] == list(CHANNELS)
    side["channels"] = side["channels"][:-1]
    (tmp_path / "maps.smlf.json").write_text(json.dumps(side))
    with pytest.raises(FormatError):
        read_maps(path)
