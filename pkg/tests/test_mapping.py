from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfsg import network as net
from cfsg.crf import CrfParams
from cfsg.mapping import (TilePlan, fit_line, ground_area, plan_tiles, predict_roi, prescription, spray_curve,
                          spray_stats, spray_stats_from_counts, weed_heatmap)

TABLE4 = [  # (weed grids, total, spraying %, saving %)
    (250, 504, 49.60, 50.40),
    (266, 504, 52.78, 47.22),
    (550, 2016, 27.28, 72.72),
    (587, 2016, 29.12, 70.88),
    (4080, 50851, 8.02, 91.98),
    (4621, 50851, 9.09, 90.91),
]


def hand_least_squares(xs, ys):
    """Textbook OLS in exact rational arithmetic."""
    xs = [Fraction(str(x)) for x in xs]
    ys = [Fraction(str(y)) for y in ys]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sum((x - mx) ** 2 for x in xs)
    icpt = my - slope * mx
    ss_res = sum((y - slope * x - icpt) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    return float(slope), float(icpt), float(1 - ss_res / ss_tot)


# ---------------------------------------------------------------- tiling


def test_square_roi_tiles():
    plan = plan_tiles(1024, 1024, 512)
    assert set(plan.origins) == {(0, 0), (512, 0), (0, 512), (512, 512)}


def test_edge_tiles_shift_inward():
    plan = plan_tiles(1000, 512, 512)
    assert sorted({x for x, _ in plan.origins}) == [0, 488]
    assert {y for _, y in plan.origins} == {0}


def test_tile_plan_errors():
    with pytest.raises(ValueError):
        plan_tiles(100, 100, 128)
    with pytest.raises(ValueError):
        plan_tiles(256, 256, 100)
    with pytest.raises(ValueError):
        plan_tiles(256, 256, 64, overlap=64)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([32, 64, 96, 128]), st.integers(0, 300), st.integers(0, 300), st.data())
def test_tiles_cover_roi(tile, extra_w, extra_h, data):
    overlap = data.draw(st.integers(0, tile - 1))
    w, h = tile + extra_w, tile + extra_h
    plan = plan_tiles(w, h, tile, overlap)
    cover = np.zeros((h, w), bool)
    for x, y in plan.origins:
        assert 0 <= x <= w - tile and 0 <= y <= h - tile
        cover[y:y + tile, x:x + tile] = True
    assert cover.all()


# ---------------------------------------------------------------- stitched prediction


@pytest.fixture(scope="module")
def tiny_model():
    return net.build_model(net.ArchitectureConfig(stage_widths=(4, 4, 4, 4, 4)), seed=3)


def test_disjoint_tiles_match_per_tile_prediction(tiny_model):
    image = np.random.default_rng(0).random((64, 96, 3), dtype=np.float32)
    mask, probs = predict_roi(tiny_model, image, plan_tiles(96, 64, 32), batch_size=1)
    for y in (0, 32):
        for x in (0, 32, 64):
            tile = image[y:y + 32, x:x + 32].transpose(2, 0, 1)[None]
            p = net.forward(tiny_model, tile).probabilities[0]
            np.testing.assert_array_equal(probs[y:y + 32, x:x + 32], p.transpose(1, 2, 0))
            np.testing.assert_array_equal(mask[y:y + 32, x:x + 32], p.argmax(0))


def test_constant_model_gives_uniform_mask(tiny_model):
    model = tiny_model.copy()
    model.params["conv29.weight"][:] = 0
    model.params["conv29.bias"][:] = [0.0, 4.0, 0.0]
    image = np.random.default_rng(1).random((80, 70, 3), dtype=np.float32)
    mask, _ = predict_roi(model, image, plan_tiles(70, 80, 32, overlap=8))
    assert np.all(mask == 1)


def test_tile_order_does_not_matter(tiny_model):
    image = np.random.default_rng(2).random((96, 96, 3), dtype=np.float32)
    plan = plan_tiles(96, 96, 64, overlap=32)
    reversed_plan = TilePlan(plan.tile_size, plan.overlap, 96, 96, tuple(reversed(plan.origins)))
    a_mask, a = predict_roi(tiny_model, image, plan)
    b_mask, b = predict_roi(tiny_model, image, reversed_plan, batch_size=3)
    assert a.tobytes() == b.tobytes() and a_mask.tobytes() == b_mask.tobytes()


def test_predict_with_crf(tiny_model):
    image = np.random.default_rng(4).random((32, 32, 3), dtype=np.float32)
    mask, probs = predict_roi(tiny_model, image, plan_tiles(32, 32, 32), crf_params=CrfParams(iterations=2))
    assert mask.shape == (32, 32) and probs.shape == (32, 32, 3)


def test_plan_dims_must_match(tiny_model):
    with pytest.raises(ValueError):
        predict_roi(tiny_model, np.zeros((32, 64, 3), np.float32), plan_tiles(32, 32, 32))


# ---------------------------------------------------------------- heatmap


def test_heatmap_without_weeds_is_zero():
    assert not weed_heatmap(np.zeros((20, 20), np.uint8), 3.0).any()


def test_heatmap_sigma_zero_is_indicator(rng):
    mask = rng.integers(0, 3, (10, 12))
    np.testing.assert_array_equal(weed_heatmap(mask, 0), (mask == 2).astype(float))


def test_heatmap_conserves_weed_fraction():
    mask = np.zeros((80, 80), np.uint8)
    mask[30:36, 40:47] = 2
    mask[50, 20] = 2
    heat = weed_heatmap(mask, 2.5)
    assert heat.max() <= 1
    assert abs(heat.mean() - np.mean(mask == 2)) < 1e-3


# ---------------------------------------------------------------- prescription and statistics


def test_table4_grid_totals():
    mask = np.zeros((2415, 2110), np.uint8)
    totals = {g: prescription(mask, g).total for g in (100, 50, 10)}
    assert totals == {100: 504, 50: 2016, 10: 50851}
    assert (prescription(mask, 100).rows, prescription(mask, 100).cols) == (24, 21)


def test_all_soil_sprays_nothing():
    assert spray_stats(prescription(np.zeros((50, 50), np.uint8), 10)).weed_grids == 0


def test_single_weed_pixel():
    mask = np.zeros((55, 55), np.uint8)
    mask[23, 31] = 2
    pmap = prescription(mask, 10)
    assert pmap.cells.sum() == 1 and pmap.cells[2, 3]
    outside = np.zeros((55, 55), np.uint8)
    outside[52, 3] = 2   # in the dropped edge strip
    assert prescription(outside, 10).cells.sum() == 0


def test_min_weed_pixels_threshold():
    mask = np.zeros((20, 20), np.uint8)
    mask[0:2, 0] = 2
    assert prescription(mask, 10, min_weed_pixels=3).cells.sum() == 0
    assert prescription(mask, 10, min_weed_pixels=2).cells.sum() == 1


def test_grid_larger_than_mask():
    with pytest.raises(ValueError):
        prescription(np.zeros((20, 20), np.uint8), 30)


def test_grid_one_sprays_weed_pixels(rng):
    mask = rng.integers(0, 3, (13, 17))
    np.testing.assert_array_equal(prescription(mask, 1).cells, mask == 2)


@pytest.mark.parametrize("weed,total,spraying,saving", TABLE4)
def test_table4_percentages(weed, total, spraying, saving):
    s = spray_stats_from_counts(weed, total)
    assert (s.spraying_rate, s.saving_rate) == (spraying, saving)
    assert s.free_weed_grids + s.weed_grids == total


def test_no_weeds_saves_everything():
    assert spray_stats_from_counts(0, 504).saving_rate == 100.0


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        spray_stats_from_counts(0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**6), st.data())
def test_rates_sum_to_100(total, data):
    weed = data.draw(st.integers(0, total))
    s = spray_stats_from_counts(weed, total)
    assert round(s.spraying_rate + s.saving_rate, 2) == 100.0


def test_coarser_grids_spray_more(rng):
    mask = np.zeros((200, 200), np.uint8)
    mask[rng.integers(0, 200, 40), rng.integers(0, 200, 40)] = 2
    rates = [spray_stats(prescription(mask, g)).spraying_rate for g in (10, 20, 50, 100)]
    assert rates == sorted(rates)


# ---------------------------------------------------------------- ground area and fit


@pytest.mark.parametrize("grid,gsd,side", [(100, 1.78, 17.8), (50, 1.78, 8.9), (10, 1.78, 1.78), (1, 10, 1.0)])
def test_ground_area(grid, gsd, side):
    area = ground_area(grid, gsd)
    assert area.side_cm == side
    assert area.area_cm2 == float(Fraction(str(side)) ** 2)


def test_ground_area_label():
    assert str(ground_area(100, 1.78)) == "17.8x17.8 cm^2"


def test_collinear_fit():
    fit = fit_line([(0, 0), (1, 1), (2, 2)])
    assert (fit.slope, fit.intercept, fit.r_squared) == (1.0, 0.0, 1.0)
    fit = fit_line([(0.3, 1.1), (1.7, 4.6), (2.9, 7.6)])
    assert fit.r_squared == 1.0


def test_constant_y_fit():
    fit = fit_line([(1, 2), (2, 2), (3, 2)])
    assert (fit.slope, fit.intercept, fit.r_squared) == (0.0, 2.0, 1.0)


def test_fit_needs_distinct_x():
    with pytest.raises(ValueError):
        fit_line([(1, 2), (1, 3)])


def test_gtm_fit_matches_hand_oracle():
    xs, ys = (17.8, 8.9, 1.78), (50.40, 72.72, 91.98)
    slope, icpt, r2 = hand_least_squares(xs, ys)
    fit = fit_line(list(zip(xs, ys)))
    assert fit.slope == pytest.approx(slope, rel=1e-12)
    assert fit.intercept == pytest.approx(icpt, rel=1e-12)
    assert fit.r_squared == pytest.approx(r2, abs=1e-12)
    assert fit.slope == pytest.approx(-2.59, abs=0.01)
    # exact least squares on these three points: R^2 = 0.99953
    assert fit.r_squared == pytest.approx(0.99953, abs=1e-5)


def test_spray_curve(rng):
    mask = np.zeros((300, 300), np.uint8)
    mask[rng.integers(0, 300, 60), rng.integers(0, 300, 60)] = 2
    rows, fit = spray_curve(mask, [100, 50, 10], 1.78)
    assert [r[1] for r in rows] == [17.8, 8.9, 1.78]
    assert fit.slope < 0
    with pytest.raises(ValueError):
        spray_curve(mask, [100], 1.78)
