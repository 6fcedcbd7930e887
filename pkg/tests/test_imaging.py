import numpy as np
import pytest

from mammoseg.errors import ContractViolation, FormatError
from mammoseg.imaging import (BoundingBox, crop, encode_pgm, equalize_histogram, gaussian_kernel1d,
                              gaussian_smooth, loose_frame_from_tight, morph_cleanup, parse_pgm,
                              preprocess_roi, read_mask, read_pgm, resize_bilinear, write_pgm)

from oracles import naive_cleanup


def test_morph_cleanup_matches_oracle_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = rng.integers(3, 12, size=2)
        m = (rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        np.testing.assert_array_equal(morph_cleanup(m), naive_cleanup(m))


def test_morph_examples():
    assert not morph_cleanup(np.zeros((10, 10), np.uint8)).any()
    single = np.zeros((9, 9), np.uint8)
    single[4, 4] = 1
    assert not morph_cleanup(single).any()
    sq = np.zeros((30, 30), np.uint8)
    sq[5:25, 5:25] = 1
    out = morph_cleanup(sq)
    assert out[6:24, 6:24].all()
    assert not out[:4].any() and not out[26:].any()


def test_gaussian_kernel_and_smoothing():
    k = gaussian_kernel1d(0.5)
    assert k.size == 3 and k.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(gaussian_smooth(np.full((8, 8), 0.3), 0.5), 0.3, atol=1e-12)
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    resp = gaussian_smooth(img, 0.5)
    np.testing.assert_allclose(resp[3:6, 3:6], np.outer(k, k), atol=1e-12)
    assert resp.sum() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ContractViolation):
        gaussian_kernel1d(0.0)


def test_equalization_examples():
    assert not equalize_histogram(np.full((4, 4), 0.6)).any()
    ramp = (np.arange(256) / 255.0).reshape(16, 16)
    assert np.abs(equalize_histogram(ramp) - ramp).max() <= 1 / 256
    two = np.zeros((4, 4))
    two[1:] = 1.0
    out = equalize_histogram(two)
    assert set(np.unique(out)) == {0.25, 1.0}
    assert out[0, 0] == 0.25


def test_resize_examples():
    img = np.random.default_rng(0).random((7, 5))
    np.testing.assert_array_equal(resize_bilinear(img, 5, 7), img)
    np.testing.assert_allclose(resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 1), [[0.0, 1.0]])
    mask = np.zeros((256, 256), np.uint8)
    mask[64:192, 80:160] = 1
    small = resize_bilinear(mask, 64, 64)
    assert small.shape == (64, 64) and small.dtype == np.uint8
    assert set(np.unique(small)) == {0, 1}


def test_loose_frame():
    loose = loose_frame_from_tight(BoundingBox(100, 100, 40, 60), 512, 512)
    assert (loose.center_x, loose.center_y, loose.width, loose.height) == (100, 100, 80, 120)
    tight = BoundingBox(5, 5, 10, 10)
    corner = loose_frame_from_tight(tight, 64, 64)
    assert corner.x0 >= 0 and corner.y0 >= 0 and corner.area <= 4 * tight.area
    assert corner.x0 + corner.width <= 64


def test_bounding_box_and_crop():
    m = np.zeros((20, 20), np.uint8)
    m[3:7, 10:18] = 1
    b = BoundingBox.from_mask(m)
    assert (b.x0, b.y0, b.width, b.height) == (10, 3, 8, 4)
    np.testing.assert_array_equal(crop(m, b), np.ones((4, 8)))
    with pytest.raises(ContractViolation):
        BoundingBox.from_mask(np.zeros((4, 4), np.uint8))


def test_preprocess_roi_shape_and_range():
    img = np.random.default_rng(1).random((90, 70))
    out = preprocess_roi(img, BoundingBox(35, 45, 40, 50), size=32)
    assert out.shape == (32, 32)
    assert 0 <= out.min() and out.max() <= 1


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    q = rng.integers(0, 256, (13, 17)).astype(np.float64) / 255
    data = encode_pgm(q)
    assert encode_pgm(parse_pgm(data)) == data
    write_pgm(q, tmp_path / "a.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), q)
    m = (rng.random((5, 6)) > 0.5).astype(np.uint8)
    write_pgm(m, tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)


def test_pgm_sixteen_bit_and_comments():
    data = b"P5\n# comment\n1 1\n65535\n" + np.array([32768], ">u2").tobytes()
    assert parse_pgm(data)[0, 0] == pytest.approx(32768 / 65535)
    assert parse_pgm(data)[0, 0] == pytest.approx(0.50000763, abs=1e-8)


@pytest.mark.parametrize("data,fragment", [
    (b"P6\n1 1\n255\n\x00\x00\x00", "P6"),
    (b"XX\n1 1\n255\n\x00", "magic"),
    (b"P5\n2 2\n255\n\x00", "truncated"),
    (b"P5\n2 x\n255\n\x00", "non-numeric"),
    (b"P5\n1 1\n0\n\x00", "maxval"),
    (b"P5\n1 1\n10\n\xff", "exceeds"),
])
def test_pgm_rejects_malformed(data, fragment):
    with pytest.raises(FormatError, match=fragment):
        parse_pgm(data)


def test_read_pgm_error_names_file(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError) as info:
        read_pgm(p)
    assert str(p) in str(info.value)


def test_mask_contract():
    with pytest.raises(ContractViolation):
        morph_cleanup(np.full((3, 3), 2, np.uint8))
