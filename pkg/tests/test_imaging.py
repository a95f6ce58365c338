import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopus.imaging import (
    DEFAULT_SPACING,
    DuplexFrame,
    HsvPixel,
    ImageGrid,
    extract_doppler_mask,
    load_sequence,
    mask_to_color,
    mm_to_px,
    px_to_mm,
    render_composite,
    resample,
    rgb_to_hsv,
    save_sequence,
    threshold_hsv,
)
from dopus.pose import ProbePose


def hsv_pixel_rgb(s, v):
    """uint8 RGB pixel with hue 0 and the requested 8-bit saturation and value."""
    r = v
    g = b = round(v * (1 - s / 255))
    return np.array([[[r, g, b]]], dtype=np.uint8)


def test_threshold_examples():
    hsv = np.array([[[0, 150, 100], [0, 100, 20], [0, 99, 200], [0, 200, 19]]], dtype=float)
    assert threshold_hsv(hsv).tolist() == [[1.0, 1.0, 0.0, 0.0]]


def test_extract_matches_hsv_of_real_pixels():
    px = np.concatenate([hsv_pixel_rgb(150, 100), hsv_pixel_rgb(100, 20), hsv_pixel_rgb(60, 240)], axis=1)
    hsv = rgb_to_hsv(px)
    assert hsv[0, 0, 1] == pytest.approx(150, abs=1)
    m = extract_doppler_mask(px)
    assert m.data[0, 0] == 1 and m.data[0, 2] == 0


def test_grey_frame_gives_empty_mask():
    grey = np.repeat(np.linspace(0, 1, 64 * 64).reshape(64, 64)[..., None], 3, axis=2)
    assert extract_doppler_mask(grey).data.sum() == 0


def test_empty_input_rejected():
    with pytest.raises(ValueError, match="empty input"):
        extract_doppler_mask(np.zeros((0, 5, 3)))
    with pytest.raises(ValueError, match="empty input"):
        ImageGrid(np.zeros((0, 4)))


def test_grid_validation():
    with pytest.raises(ValueError):
        ImageGrid(np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        ImageGrid(np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((3, 3)), spacing=0.0)
    g = ImageGrid(np.zeros((3, 4)), spacing=0.5)
    assert g.spacing == (0.5, 0.5) and g.extent_mm == (1.5, 2.0)


def test_hsv_pixel_bounds():
    HsvPixel(359.0, 255, 0)
    with pytest.raises(ValueError):
        HsvPixel(360.0, 10, 10)


def test_composite_round_trip():
    rng = np.random.default_rng(0)
    b = ImageGrid(rng.uniform(0, 1, (40, 50)))
    d = ImageGrid((rng.uniform(size=(40, 50)) < 0.2).astype(float))
    comp = render_composite(b, d)
    np.testing.assert_array_equal(extract_doppler_mask(comp).data, d.data)
    assert mask_to_color(d).data.shape == (40, 50, 3)


def test_resample_screen_grab_spacing():
    grab = ImageGrid(np.zeros((497, 733)), spacing=(45.0 / 497, 45.0 / 497))
    out = resample(grab, 320, 320)
    assert out.shape == (320, 320)
    assert out.spacing[0] == pytest.approx(45.0 / 320)
    assert out.spacing[0] == pytest.approx(0.1406, abs=1e-4)


def test_resample_identity_is_bit_identical():
    g = ImageGrid(np.random.default_rng(1).uniform(size=(17, 23)), spacing=(0.2, 0.3))
    out = resample(g, 23, 17)
    np.testing.assert_array_equal(out.data, g.data)
    assert out.spacing == g.spacing and out.data is not g.data


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.integers(1, 120), st.integers(2, 90), st.integers(2, 90),
       st.floats(0.0, 1.0))
def test_resample_constant_and_extent(h, w, th, tw, value):
    g = ImageGrid(np.full((h, w), value), spacing=(0.1, 0.2))
    out = resample(g, tw, th)
    np.testing.assert_allclose(out.data, value, atol=1e-6)
    assert out.width * out.spacing[1] == pytest.approx(g.width * g.spacing[1], rel=1e-12)
    assert out.height * out.spacing[0] == pytest.approx(g.height * g.spacing[0], rel=1e-12)


def test_resample_mask_stays_binary():
    m = ImageGrid((np.random.default_rng(2).uniform(size=(50, 60)) < 0.3).astype(float))
    assert resample(m, 33, 41).is_binary


def test_unit_conversion():
    assert px_to_mm(30, 0.14) == pytest.approx(4.2)
    assert px_to_mm(0, 0.14) == 0
    assert mm_to_px(1.2, 0.1406) == pytest.approx(8.53, abs=0.01)
    assert mm_to_px(1.2, DEFAULT_SPACING) == pytest.approx(1.2 / DEFAULT_SPACING)
    with pytest.raises(ValueError):
        px_to_mm(1, 0)


def test_frame_validation():
    b = ImageGrid(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        DuplexFrame(b, ImageGrid(np.zeros((4, 5))), 0.0, ProbePose.from_tilt((0, 0, 0)))
    with pytest.raises(ValueError):
        DuplexFrame(b, ImageGrid(np.full((4, 4), 0.5)), 0.0, ProbePose.from_tilt((0, 0, 0)))


def test_sequence_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    frames, gts = [], []
    for i in range(3):
        b = ImageGrid(rng.uniform(size=(20, 24)))
        d = ImageGrid((rng.uniform(size=(20, 24)) < 0.1).astype(float))
        frames.append(DuplexFrame(b, d, i * 0.1, ProbePose.from_tilt((0, i, 0), 2.5 * i), i, {"k": i}))
        gts.append(ImageGrid((rng.uniform(size=(20, 24)) < 0.2).astype(float)))
    save_sequence(tmp_path / "seq", frames, gts, {"patient": 4})
    back, gback, meta = load_sequence(tmp_path / "seq")
    assert meta["patient"] == 4 and len(back) == 3
    for a, b, ga, gb in zip(frames, back, gts, gback):
        np.testing.assert_allclose(a.bmode.data, b.bmode.data, atol=1 / 65535)
        np.testing.assert_array_equal(a.doppler.data, b.doppler.data)
        np.testing.assert_array_equal(ga.data, gb.data)
        assert a.pose == b.pose and a.meta == b.meta
