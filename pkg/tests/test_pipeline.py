"""Normalization, upsampling, colormap overlay, and PPM/PGM round-trips."""

import numpy as np
import pytest

from crgx import postprocess as pp
from crgx.imgio import Image, encode_image_bytes, parse_image_bytes, read_image, write_image


# ------------------------------------------------------------- normalization

def test_normalize_hand_values():
    assert np.array_equal(pp.normalize_minmax([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])
    assert np.array_equal(pp.normalize_minmax([-1.0, 1.0]), [0.0, 1.0])
    assert np.array_equal(pp.normalize_minmax([3.0, 3.0, 3.0]), [0.0, 0.0, 0.0])


def test_normalize_affine_invariance():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.normal(size=(5, 7))
        a = float(rng.uniform(0.1, 10.0))
        b = float(rng.normal())
        base = pp.normalize_minmax(h)
        moved = pp.normalize_minmax(a * h + b)
        assert np.max(np.abs(base - moved)) <= 1e-12


# ---------------------------------------------------------------- upsampling

def test_upsample_identity_same_size():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(4, 5))
    out = pp.upsample_bilinear(src, 4, 5)
    assert np.array_equal(out, src)


def test_upsample_two_by_two_checker():
    src = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = pp.upsample_bilinear(src, 3, 3)
    expected = np.array([[0.0, 0.5, 1.0],
                         [0.5, 0.5, 0.5],
                         [1.0, 0.5, 0.0]])
    assert np.max(np.abs(out - expected)) <= 1e-15


def test_upsample_one_by_one_broadcasts():
    out = pp.upsample_bilinear(np.array([[0.7]]), 4, 6)
    assert out.shape == (4, 6)
    assert np.array_equal(out, np.full((4, 6), 0.7))


def test_upsample_corners_preserved():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(3, 4))
    out = pp.upsample_bilinear(src, 9, 13)
    assert out[0, 0] == src[0, 0]
    assert out[0, -1] == src[0, -1]
    assert out[-1, 0] == src[-1, 0]
    assert out[-1, -1] == src[-1, -1]


def test_upsample_range_preserved():
    rng = np.random.default_rng(3)
    for _ in range(10):
        src = rng.normal(size=(4, 4))
        out = pp.upsample_bilinear(src, 11, 7)
        assert out.min() >= src.min() - 1e-12
        assert out.max() <= src.max() + 1e-12


def test_upsample_singleton_target_uses_first_sample():
    src = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = pp.upsample_bilinear(src, 1, 3)
    assert np.array_equal(out, [[1.0, 2.0, 3.0]])


def test_upsample_rejects_bad_dims():
    with pytest.raises(ValueError, match="target dims"):
        pp.upsample_bilinear(np.ones((2, 2)), 0, 3)
    with pytest.raises(ValueError, match="2-D"):
        pp.upsample_bilinear(np.ones(4), 2, 2)


# ------------------------------------------------------------------ colormap

def test_colormap_table_shape_and_range():
    table = pp.load_colormap()
    assert table.shape == (256, 3)
    assert table.min() >= 0.0 and table.max() <= 1.0
    # jet-like anchors: dark blue start, dark red end
    assert table[0, 2] > 0.0 and table[0, 0] == 0.0
    assert table[255, 0] > 0.0 and table[255, 2] == 0.0


def test_colormap_checksum_guard(monkeypatch):
    monkeypatch.setattr(pp, "_COLORMAP_CACHE", {})
    monkeypatch.setattr(pp, "COLORMAP_SHA256", "0" * 64)
    with pytest.raises(ValueError, match="sha256"):
        pp.load_colormap()


def test_apply_colormap_endpoints():
    table = pp.load_colormap()
    planes = pp.apply_colormap(np.array([[0.0, 1.0]]))
    assert planes.shape == (3, 1, 2)
    assert np.array_equal(planes[:, 0, 0], table[0])
    assert np.array_equal(planes[:, 0, 1], table[255])


def test_apply_colormap_validates_input():
    with pytest.raises(ValueError, match="normalize"):
        pp.apply_colormap(np.array([[1.5]]))
    with pytest.raises(ValueError, match="2-D"):
        pp.apply_colormap(np.ones(3))


# ------------------------------------------------------------------- overlay

def test_overlay_alpha_extremes():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (3, 2, 2))
    h = np.array([[0.0, 0.25], [0.5, 1.0]])
    assert np.array_equal(pp.overlay(x, h, pp.OverlayStyle(alpha=0.0)), x)
    assert np.array_equal(pp.overlay(x, h, pp.OverlayStyle(alpha=1.0)),
                          pp.apply_colormap(h))


def test_overlay_midpoint_pixel():
    x = np.full((3, 1, 1), 0.2)
    h = np.array([[1.0]])
    entry = pp.load_colormap()[255]
    out = pp.overlay(x, h, pp.OverlayStyle(alpha=0.5))
    assert np.max(np.abs(out[:, 0, 0] - 0.5 * (0.2 + entry))) <= 1e-15


def test_overlay_broadcasts_gray_input():
    x = np.full((1, 2, 3), 0.5)
    h = np.zeros((2, 3))
    out = pp.overlay(x, h)
    assert out.shape == (3, 2, 3)


def test_overlay_validation():
    with pytest.raises(ValueError, match="resolution"):
        pp.overlay(np.zeros((3, 2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="alpha"):
        pp.OverlayStyle(alpha=1.5)


# ------------------------------------------------------------------ image IO

def test_parse_p6_minimal():
    data = b"P6\n2 1\n255\n" + bytes([10, 20, 30, 250, 0, 128])
    img = parse_image_bytes(data)
    assert img.channels == 3 and img.height == 1 and img.width == 2
    assert np.array_equal(img.pixels[:, 0, 0], np.array([10, 20, 30]) / 255.0)
    assert np.array_equal(img.pixels[:, 0, 1], np.array([250, 0, 128]) / 255.0)


def test_parse_p5_and_comment():
    data = b"P5 # gray\n2 2\n# another note\n255\n" + bytes([0, 64, 128, 255])
    img = parse_image_bytes(data)
    assert img.channels == 1
    assert np.array_equal(img.pixels[0].ravel(), np.array([0, 64, 128, 255]) / 255.0)


def test_parse_rejects_wrong_magic():
    with pytest.raises(ValueError, match="byte 0"):
        parse_image_bytes(b"P3\n1 1\n255\n000")


def test_parse_rejects_high_maxval():
    with pytest.raises(ValueError, match="maxval 65535"):
        parse_image_bytes(b"P6\n1 1\n65535\n" + bytes(6))


def test_parse_reports_truncation_offset():
    data = b"P6\n2 2\n255\n" + bytes(5)
    with pytest.raises(ValueError, match="truncated") as err:
        parse_image_bytes(data)
    assert "byte" in str(err.value)


def test_parse_rejects_bad_header_fields():
    with pytest.raises(ValueError, match="decimal integer"):
        parse_image_bytes(b"P6\nx 1\n255\n")
    with pytest.raises(ValueError, match="positive"):
        parse_image_bytes(b"P6\n0 1\n255\n")
    with pytest.raises(ValueError, match="ran out of data"):
        parse_image_bytes(b"P6\n2 2")


def test_write_rounds_half_away_from_zero():
    values = np.array([[[0.5 / 255, 1.5 / 255, 2.5 / 255]]])
    img = Image.from_array(np.broadcast_to(values, (3, 1, 3)))
    raw = encode_image_bytes(img)
    assert raw.startswith(b"P6\n3 1\n255\n")
    payload = raw[len(b"P6\n3 1\n255\n"):]
    assert list(payload[:3]) == [1, 1, 1]
    assert list(payload[3:6]) == [2, 2, 2]
    assert list(payload[6:9]) == [3, 3, 3]


def test_round_trip_through_files(tmp_path):
    rng = np.random.default_rng(5)
    img = Image.from_array(rng.uniform(0, 1, (3, 4, 6)))
    path = tmp_path / "out.ppm"
    write_image(path, img)
    back = read_image(path)
    assert np.max(np.abs(back.pixels - img.pixels)) <= 1.0 / 510 + 1e-12
    # a quantized image re-encodes to identical bytes
    write_image(tmp_path / "again.ppm", back)
    assert (tmp_path / "again.ppm").read_bytes() == path.read_bytes()


def test_gray_writes_as_p6(tmp_path):
    img = Image.from_array(np.linspace(0, 1, 6).reshape(2, 3))
    path = tmp_path / "gray.ppm"
    write_image(path, img)
    back = read_image(path)
    assert back.channels == 3
    assert np.array_equal(back.pixels[0], back.pixels[1])
    assert np.max(np.abs(back.pixels[0] - img.pixels[0])) <= 1.0 / 510 + 1e-12


def test_image_validation():
    with pytest.raises(ValueError, match="planes"):
        Image(np.zeros((2, 3, 3)))
    with pytest.raises(ValueError, match="clamp"):
        Image(np.full((1, 2, 2), 1.5))
    with pytest.raises(ValueError, match="finite"):
        Image(np.full((1, 2, 2), np.nan))
    clamped = Image.from_array(np.array([[-1.0, 2.0]]))
    assert np.array_equal(clamped.pixels, [[[0.0, 1.0]]])
