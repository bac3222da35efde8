import numpy as np
import pytest

from pasdet.mapfile import MapFormatError, read_map, write_map


def test_float_round_trip(tmp_path, rng):
    a = rng.normal(size=(5, 7, 3))
    write_map(tmp_path / "a.map", a)
    np.testing.assert_array_equal(read_map(tmp_path / "a.map"), a)


def test_int_single_channel_round_trip(tmp_path, rng):
    a = rng.integers(-5, 5, size=(4, 6))
    write_map(tmp_path / "a.map", a, dtype="i8")
    back = read_map(tmp_path / "a.map")
    assert back.dtype == np.int64 and back.shape == (4, 6)
    np.testing.assert_array_equal(back, a)


def test_layout(tmp_path):
    write_map(tmp_path / "a.map", np.array([[1.5]]))
    raw = (tmp_path / "a.map").read_bytes()
    assert raw[:12] == b"PASDMAP1f8le"
    assert raw[12:24] == (1).to_bytes(4, "little") * 3
    assert np.frombuffer(raw[24:], "<f8")[0] == 1.5


def test_errors(tmp_path):
    with pytest.raises(ValueError):
        write_map(tmp_path / "a.map", np.zeros(3))
    (tmp_path / "b.map").write_bytes(b"NOTAMAP!" + bytes(16))
    with pytest.raises(MapFormatError):
        read_map(tmp_path / "b.map")
    write_map(tmp_path / "c.map", np.zeros((2, 2)))
    (tmp_path / "c.map").write_bytes((tmp_path / "c.map").read_bytes()[:-3])
    with pytest.raises(MapFormatError):
        read_map(tmp_path / "c.map")
    (tmp_path / "d.map").write_bytes(b"PASDMAP1f4le" + bytes(12))
    with pytest.raises(MapFormatError):
        read_map(tmp_path / "d.map")
