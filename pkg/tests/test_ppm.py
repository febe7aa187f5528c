import numpy as np
import pytest

from agcm.ppm import float_to_image, image_to_float, read_ppm, to_uint8, write_ppm


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(13, 9, 3)).astype(np.uint8)
    p = tmp_path / "a.ppm"
    write_ppm(p, img)
    assert np.array_equal(read_ppm(p), img)


def test_float_quantization_and_back(tmp_path):
    img = np.linspace(0, 1, 12).reshape(2, 2, 3)
    p = tmp_path / "f.ppm"
    write_ppm(p, img)
    got = read_ppm(p)
    assert np.array_equal(got.ravel(), np.clip(np.rint(img.ravel() * 255), 0, 255))


def test_grayscale_replicated(tmp_path):
    img = np.array([[0.0, 1.0]])
    p = tmp_path / "g.ppm"
    write_ppm(p, img)
    got = read_ppm(p)
    assert got.shape == (1, 2, 3)
    assert np.array_equal(got[0, 0], [0, 0, 0])
    assert np.array_equal(got[0, 1], [255, 255, 255])


def test_byte_deterministic(tmp_path):
    img = np.random.default_rng(3).uniform(size=(8, 8, 3))
    p1, p2 = tmp_path / "1.ppm", tmp_path / "2.ppm"
    write_ppm(p1, img)
    write_ppm(p2, img.copy())
    assert p1.read_bytes() == p2.read_bytes()


def test_header_comments_parsed(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n2 1\n# more\n255\n" + bytes(6))
    assert read_ppm(p).shape == (1, 2, 3)


def test_rejections(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError, match="P6"):
        read_ppm(p)
    p.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(ValueError, match="pixel bytes"):
        read_ppm(p)
    p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="maxval"):
        read_ppm(p)
    with pytest.raises(ValueError, match="image"):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 4)))


def test_channel_layout_helpers():
    img = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
    chw = image_to_float(img)
    assert chw.shape == (3, 2, 4)
    assert chw[1, 0, 2] == img[0, 2, 1] / 255.0
    back = float_to_image(chw)
    assert back.shape == (2, 4, 3)
    assert np.array_equal(to_uint8(back), img)
