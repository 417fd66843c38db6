import numpy as np
import pytest

from offnadir.netpbm import normalize, quantize, read_pnm, write_pgm, write_ppm
from offnadir.tensor import FormatError


def test_quantize_spans_full_range():
    pixels, low, high = quantize(np.array([[-1.0, 0.0], [0.5, 3.0]]))
    assert (low, high) == (-1.0, 3.0)
    np.testing.assert_array_equal(pixels, [[0, 64], [96, 255]])
    assert pixels.dtype == np.uint8


def test_constant_map_quantizes_to_zero():
    pixels, low, high = quantize(np.full((3, 3), 0.25))
    np.testing.assert_array_equal(pixels, 0)
    assert low == high == 0.25
    np.testing.assert_array_equal(normalize(np.full(4, 7.0)), 0.0)


def test_pgm_header_is_byte_exact(tmp_path):
    path = tmp_path / "map.pgm"
    write_pgm(path, np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(range(6))


def test_pgm_and_ppm_read_back(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), gray)

    color = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
    write_ppm(tmp_path / "a.ppm", color)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n4 2\n255\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), color)


def test_reader_skips_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pnm(path), [[1, 2]])


@pytest.mark.parametrize(
    "data",
    [
        pytest.param(b"P2\n1 1\n255\n\x00", id="ascii_magic"),
        pytest.param(b"P5\n1 1\n65535\n\x00\x00", id="16_bit"),
        pytest.param(b"P5\n2 2\n255\n\x00", id="short_raster"),
        pytest.param(b"P5\n2", id="short_header"),
    ],
)
def test_reader_rejects_unsupported_files(tmp_path, data):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(FormatError):
        read_pnm(path)


def test_writers_need_uint8(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2), dtype=np.uint8))
