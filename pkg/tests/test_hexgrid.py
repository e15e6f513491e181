import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmtaccess.hexgrid import (
    EmploymentField,
    OutOfDomainError,
    PointRecord,
    aggregate_points,
    assign_point,
    assign_points,
    build_grid,
    centroid_distance,
    project_lonlat,
    read_points_csv,
    side_length_for_area,
)

from conftest import brute_force_cell


def test_unit_area_side_length():
    assert side_length_for_area(1.0) == pytest.approx(math.sqrt(2 / (3 * math.sqrt(3))), rel=1e-15)
    assert side_length_for_area(1.0) == pytest.approx(0.620403, abs=5e-7)


@given(st.floats(min_value=1e-3, max_value=1e3))
def test_side_length_reproduces_area(area):
    s = side_length_for_area(area)
    assert s * s * 3 * math.sqrt(3) / 2 == pytest.approx(area, rel=1e-12)


def test_degenerate_bbox_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        build_grid((0, 0, 0, 5))
    with pytest.raises(ValueError):
        build_grid((0, 0, 5, 5), cell_area=0.0)


@pytest.mark.parametrize("orientation", ["pointy", "flat"])
def test_ten_mile_box_coverage(orientation, rng):
    grid = build_grid((0, 0, 10, 10), 1.0, orientation)
    assert 100 <= grid.n_cells <= 135
    xs = rng.uniform(0, 10, 100_000)
    ys = rng.uniform(0, 10, 100_000)
    idx = assign_points(grid, xs, ys)
    assert (idx >= 0).all()
    # every assigned cell really contains its point: distance to the
    # centroid is bounded by the circumradius
    d = np.hypot(xs - grid.centroids[idx, 0], ys - grid.centroids[idx, 1])
    assert d.max() <= grid.side_length * (1 + 1e-12)


def test_assignment_is_order_invariant(grid10, rng):
    xs = rng.uniform(0, 10, 100_000)
    ys = rng.uniform(0, 10, 100_000)
    idx = assign_points(grid10, xs, ys)
    perm = rng.permutation(len(xs))
    assert np.array_equal(assign_points(grid10, xs[perm], ys[perm]), idx[perm])


def test_grid_is_deterministic():
    a = build_grid((0, 0, 10, 10))
    b = build_grid((0, 0, 10, 10))
    assert a.cells.tobytes() == b.cells.tobytes()
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_cells_overlap_box():
    grid = build_grid((0, 0, 10, 10))
    for c in grid.cell_ids():
        v = grid.vertices(c)
        # at least part of the hexagon lies strictly inside the box
        assert v[:, 0].max() > 0 and v[:, 0].min() < 10
        assert v[:, 1].max() > 0 and v[:, 1].min() < 10


def test_neighbors_symmetric_and_interior_has_six(grid10):
    for c in grid10.cell_ids():
        for nb in grid10.neighbors(c):
            assert c in grid10.neighbors(nb)
    center = assign_point(grid10, PointRecord(5.0, 5.0))
    assert len(grid10.neighbors(center)) == 6


def test_centroid_maps_to_itself(grid10):
    for c in grid10.cell_ids():
        x, y = grid10.centroid(c)
        if grid10.bbox.contains(x, y):
            assert assign_point(grid10, PointRecord(x, y)) == c


def test_random_points_match_brute_force(grid10, rng):
    for x, y in rng.uniform(0, 10, size=(300, 2)):
        assert assign_point(grid10, PointRecord(x, y)) == brute_force_cell(grid10, x, y)


@pytest.mark.parametrize("orientation", ["pointy", "flat"])
def test_shared_edge_tie_break(orientation):
    grid = build_grid((0, 0, 10, 10), 1.0, orientation)
    c = assign_point(grid, PointRecord(5.0, 5.0))
    for nb in grid.neighbors(c):
        (x0, y0), (x1, y1) = grid.centroid(c), grid.centroid(nb)
        mid = PointRecord(0.5 * (x0 + x1), 0.5 * (y0 + y1))
        expect = min(c, nb)
        assert assign_point(grid, mid) == expect
        assert assign_point(grid, mid) == expect


def test_point_outside_box(grid10):
    with pytest.raises(OutOfDomainError, match="10.5"):
        assign_point(grid10, PointRecord(10.5, 3.0))


def test_centroid_distance_basics(grid10):
    c = grid10.cell_ids()[7]
    assert centroid_distance(grid10, c, c) == 0.0
    a = assign_point(grid10, PointRecord(5.0, 5.0))
    b = (a[0] + 1, a[1])
    assert centroid_distance(grid10, a, b) == pytest.approx(math.sqrt(3) * grid10.side_length, rel=1e-12)
    assert centroid_distance(grid10, a, b) == pytest.approx(1.074570, abs=5e-7)
    with pytest.raises(KeyError):
        centroid_distance(grid10, a, (999, 999))


def test_centroid_distance_metric(grid10, rng):
    ids = grid10.cell_ids()
    for _ in range(300):
        i, j, k = (ids[t] for t in rng.integers(0, len(ids), 3))
        xi, yi = grid10.centroids[grid10.index_of(i)]
        xj, yj = grid10.centroids[grid10.index_of(j)]
        dij = centroid_distance(grid10, i, j)
        assert dij == pytest.approx(math.sqrt((xi - xj) ** 2 + (yi - yj) ** 2), rel=1e-12, abs=1e-15)
        assert dij == centroid_distance(grid10, j, i)
        assert dij <= centroid_distance(grid10, i, k) + centroid_distance(grid10, k, j) + 1e-9
        assert (dij == 0) == (i == j)


def test_aggregate_empty(grid10):
    f = aggregate_points(grid10, [])
    assert not f.values.any()


def test_aggregate_single_cell(grid10):
    c = assign_point(grid10, PointRecord(5.0, 5.0))
    x, y = grid10.centroid(c)
    pts = [PointRecord(x, y, 5), PointRecord(x + 0.1, y, 7), PointRecord(x, y - 0.1, 11)]
    f = aggregate_points(grid10, pts)
    assert f[c] == 23
    assert f.values.sum() == 23
    assert f[(999, 999)] == 0.0


def test_aggregate_matches_double_loop(grid10, rng):
    n = 10_000
    xs, ys = rng.uniform(0, 10, n), rng.uniform(0, 10, n)
    ws = rng.integers(1, 50, n).astype(float)
    f = aggregate_points(grid10, pd.DataFrame({"x_mi": xs, "y_mi": ys, "weight": ws}))
    oracle = np.zeros(grid10.n_cells)
    cents = grid10.centroids.tolist()
    for x, y, w in zip(xs, ys, ws):
        best, bd = None, math.inf
        for k, (cx, cy) in enumerate(cents):
            d = (cx - x) ** 2 + (cy - y) ** 2
            if d < bd:
                best, bd = k, d
        oracle[best] += w
    assert np.array_equal(f.values, oracle)
    assert f.total == ws.sum()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1e4)), max_size=200))
def test_aggregate_conserves_weight(points):
    grid = build_grid((0, 0, 10, 10))
    f = aggregate_points(grid, [PointRecord(*p) for p in points])
    total = math.fsum(p[2] for p in points)
    assert f.total == pytest.approx(total, rel=1e-9, abs=1e-9)


def test_aggregate_strict_and_drop(grid10):
    pts = [PointRecord(1, 1, 2), PointRecord(11, 1, 3), PointRecord(2, 2, 4), PointRecord(1, 12, 5)]
    with pytest.raises(OutOfDomainError, match="record 1"):
        aggregate_points(grid10, pts)
    f = aggregate_points(grid10, pts, policy="drop")
    assert f.n_dropped == 2 and f.weight_dropped == 8
    assert f.total == 6


def test_field_rejects_negative(grid10):
    with pytest.raises(ValueError):
        EmploymentField(grid10, -np.ones(grid10.n_cells))


def test_point_record_validation():
    with pytest.raises(ValueError):
        PointRecord(0, 0, -1)
    with pytest.raises(ValueError):
        PointRecord(math.nan, 0)


def test_lonlat_projection(tmp_path):
    x, y = project_lonlat([-118.0, -117.0], [34.0, 34.0], ref_lat=34.0)
    assert x[1] - x[0] == pytest.approx(69.0547 * math.cos(math.radians(34.0)))
    assert y[0] == y[1]
    p = tmp_path / "pts.csv"
    p.write_text("lon,lat,weight\n-118.0,34.0,3\n-117.9,34.1,4\n")
    df = read_points_csv(p, ref_lat=34.0)
    assert list(df.columns) == ["x_mi", "y_mi", "weight"]
    with pytest.raises(ValueError, match="reference latitude"):
        read_points_csv(p)
    q = tmp_path / "xy.csv"
    q.write_text("x_mi,y_mi\n1,2\n")
    assert read_points_csv(q)["weight"].tolist() == [1.0]
