"""Temporal decoder wiring, prediction head maps, and box decoding."""

import numpy as np
import pytest

from statetrack.decoder_head import (
    BBox,
    HeadOutput,
    PredictionHead,
    TemporalDecoder,
    decode_box,
)
from statetrack.errors import DimensionError
from statetrack.numerics.tensor import Tensor


def rand_map(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, shape).astype(np.float32))


# ---------------------------------------------------------------------------
# decode_box
# ---------------------------------------------------------------------------

def test_decode_one_hot_peak_reads_cell_center():
    cls_map = np.zeros((8, 8), dtype=np.float32)
    cls_map[2, 3] = 1.0
    size_map = np.zeros((2, 8, 8), dtype=np.float32)
    size_map[0] = 0.25
    size_map[1] = 0.5
    box, conf = decode_box(cls_map, size_map)
    assert box.cx == pytest.approx((3 + 0.5) / 8)
    assert box.cy == pytest.approx((2 + 0.5) / 8)
    assert box.w == pytest.approx(0.25)
    assert box.h == pytest.approx(0.5)
    assert conf == 1.0


def test_decode_uniform_map_tie_breaks_to_origin():
    cls_map = np.full((8, 8), 0.37, dtype=np.float32)
    size_map = np.full((2, 8, 8), 0.2, dtype=np.float32)
    size_map[0, 0, 0] = 0.6
    size_map[1, 0, 0] = 0.3
    box, conf = decode_box(cls_map, size_map)
    assert box.cx == pytest.approx(0.5 / 8)
    assert box.cy == pytest.approx(0.5 / 8)
    assert box.w == pytest.approx(0.6) and box.h == pytest.approx(0.3)
    assert conf == np.float32(0.37)


def test_confidence_is_exactly_the_map_maximum():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cls_map = rng.uniform(0.0, 1.0, (6, 9)).astype(np.float32)
        size_map = rng.uniform(0.1, 0.9, (2, 6, 9)).astype(np.float32)
        _, conf = decode_box(cls_map, size_map)
        assert conf == float(cls_map.max())


def test_decode_is_scale_consistent_under_nearest_neighbor_upscale():
    rng = np.random.default_rng(1)
    for k in (2, 4):
        cls_map = rng.uniform(0.0, 1.0, (5, 7)).astype(np.float32)
        size_map = rng.uniform(0.1, 0.9, (2, 5, 7)).astype(np.float32)
        box, _ = decode_box(cls_map, size_map)
        cls_up = np.repeat(np.repeat(cls_map, k, axis=0), k, axis=1)
        size_up = np.repeat(np.repeat(size_map, k, axis=1), k, axis=2)
        box_up, _ = decode_box(cls_up, size_up)
        assert abs(box_up.cx - box.cx) <= 1.0 / 7
        assert abs(box_up.cy - box.cy) <= 1.0 / 5
        assert box_up.w == pytest.approx(box.w)  # same source cell value
        assert box_up.h == pytest.approx(box.h)


def test_decode_box_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        decode_box(np.zeros((1, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(DimensionError):
        decode_box(np.zeros((8, 8)), np.zeros((2, 4, 8)))


def test_decode_box_floors_underflowed_sizes():
    cls_map = np.full((4, 4), 0.5, dtype=np.float32)
    size_map = np.zeros((2, 4, 4), dtype=np.float32)
    box, _ = decode_box(cls_map, size_map)
    assert box.w > 0 and box.h > 0


# ---------------------------------------------------------------------------
# BBox
# ---------------------------------------------------------------------------

def test_bbox_validation_corners_and_pixel_round_trip():
    with pytest.raises(DimensionError):
        BBox(0.5, 0.5, 0.0, 0.2)
    with pytest.raises(DimensionError):
        BBox(0.5, 0.5, 0.2, -0.1)
    box = BBox(0.5, 0.25, 0.25, 0.125)
    x0, y0, x1, y1 = box.corners()
    assert (x0, y0, x1, y1) == (0.375, 0.1875, 0.625, 0.3125)
    x, y, w, h = box.to_pixels(128, 64)
    assert (x, y, w, h) == (48.0, 12.0, 32.0, 8.0)
    back = BBox.from_pixels(x, y, w, h, 128, 64)
    assert back == box


# ---------------------------------------------------------------------------
# prediction head
# ---------------------------------------------------------------------------

def test_head_map_shapes_and_ranges():
    head = PredictionHead(64, np.random.default_rng(2))
    out = head(rand_map(np.random.default_rng(3), (1, 64, 8, 8)))
    assert out.cls_map.shape == (1, 1, 8, 8)
    assert out.size_map.shape == (1, 2, 8, 8)
    for arr in (out.cls_map.data, out.size_map.data):
        assert np.all(arr > 0.0) and np.all(arr < 1.0)


def test_zero_weight_head_gives_uniform_half():
    head = PredictionHead(16, np.random.default_rng(4))
    for _, p in head.named_parameters(""):
        p.data = np.zeros_like(p.data)
    out = head(rand_map(np.random.default_rng(5), (1, 16, 4, 4)))
    assert np.all(out.cls_map.data == 0.5)
    assert np.all(out.size_map.data == 0.5)


def test_head_output_validates_channel_layout():
    ok_cls = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    ok_size = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    HeadOutput(ok_cls, ok_size)
    with pytest.raises(DimensionError):
        HeadOutput(ok_size, ok_size)
    with pytest.raises(DimensionError):
        HeadOutput(ok_cls, Tensor(np.zeros((1, 2, 2, 4), dtype=np.float32)))


# ---------------------------------------------------------------------------
# temporal decoder
# ---------------------------------------------------------------------------

def make_decoder(seed, dim=16, heads=2, layers=3):
    return TemporalDecoder(dim, heads, layers, np.random.default_rng(seed))


def test_decoder_preserves_search_shape_and_is_deterministic():
    dec = make_decoder(6)
    rng = np.random.default_rng(7)
    x = rand_map(rng, (2, 16, 4, 4))
    refs = [rand_map(rng, (2, 16, 2, 2)), rand_map(rng, (2, 16, 2, 2))]
    out1 = dec(x, refs).data
    out2 = dec(x, refs).data
    assert out1.shape == (2, 16, 4, 4)
    assert np.array_equal(out1, out2)


def test_decoder_handles_duplicated_template_reference():
    dec = make_decoder(8)
    rng = np.random.default_rng(9)
    x = rand_map(rng, (1, 16, 4, 4))
    f_z = rand_map(rng, (1, 16, 2, 2))
    out = dec(x, [f_z, f_z]).data  # predicted feature identical to template
    assert np.all(np.isfinite(out))
    assert np.array_equal(out, dec(x, [f_z, f_z]).data)


def test_decoder_predicted_reference_is_load_bearing():
    dec = make_decoder(10)
    rng = np.random.default_rng(11)
    x = rand_map(rng, (1, 16, 4, 4))
    f_z = rand_map(rng, (1, 16, 2, 2))
    f_pred = rand_map(rng, (1, 16, 2, 2))
    zero_pred = Tensor(np.zeros((1, 16, 2, 2), dtype=np.float32))
    out = dec(x, [f_pred, f_z]).data
    out_zero = dec(x, [zero_pred, f_z]).data
    assert np.linalg.norm(out - out_zero) > 0.0
    # the template slot matters too
    out_swap = dec(x, [f_pred, Tensor(np.zeros((1, 16, 2, 2), dtype=np.float32))]).data
    assert np.linalg.norm(out - out_swap) > 0.0


def test_decoder_requires_references():
    dec = make_decoder(12)
    x = rand_map(np.random.default_rng(13), (1, 16, 4, 4))
    with pytest.raises(DimensionError):
        dec(x, [])
