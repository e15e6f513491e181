"""Hexagonal tessellation of a planar study region.

Cells are addressed by axial coordinates ``(q, r)``. The centroid of cell
``(0, 0)`` sits on the lower-left corner of the bounding box, and a cell is
part of the grid when its interior overlaps the interior of the box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

SQRT3 = math.sqrt(3.0)

# axial neighbour offsets; identical for both orientations
NEIGHBOR_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1))

MILES_PER_DEGREE_LAT = 69.0547

Cell = tuple[int, int]


class OutOfDomainError(ValueError):
    """A point lies outside the grid's bounding box."""


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"bounding box has non-finite corner: {vals}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(
                f"degenerate bounding box {vals}: width and height must be positive"
            )

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point has non-finite coordinates: ({self.x}, {self.y})")
        if not (self.weight >= 0):
            raise ValueError(f"point weight must be nonnegative, got {self.weight}")


def side_length_for_area(cell_area: float) -> float:
    """Side length of a regular hexagon with the given area."""
    if not cell_area > 0:
        raise ValueError(f"cell_area must be positive, got {cell_area}")
    return math.sqrt(2.0 * cell_area / (3.0 * SQRT3))


@dataclass(frozen=True, eq=False)
class HexGrid:
    """Immutable hexagonal grid.

    ``cells`` is an ``(H, 2)`` integer array of axial coordinates sorted
    lexicographically; row ``k`` is cell index ``k`` everywhere in the package.
    """

    bbox: BBox
    cell_area: float
    orientation: str
    side_length: float
    cells: np.ndarray
    centroids: np.ndarray
    _index: dict = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def __len__(self) -> int:
        return len(self.cells)

    def cell_ids(self) -> list[Cell]:
        return [(int(q), int(r)) for q, r in self.cells]

    def index_of(self, cell: Cell) -> int:
        try:
            return self._index[(int(cell[0]), int(cell[1]))]
        except KeyError:
            raise KeyError(f"unknown cell {tuple(cell)}") from None

    def has_cell(self, cell: Cell) -> bool:
        return (int(cell[0]), int(cell[1])) in self._index

    def centroid(self, cell: Cell) -> tuple[float, float]:
        x, y = self.centroids[self.index_of(cell)]
        return float(x), float(y)

    def axial_to_xy(self, q, r):
        return _axial_to_xy(q, r, self.side_length, self.orientation, self.bbox)

    def neighbors(self, cell: Cell) -> list[Cell]:
        """Edge-sharing neighbours of ``cell`` that belong to the grid."""
        q, r = int(cell[0]), int(cell[1])
        out = [(q + dq, r + dr) for dq, dr in NEIGHBOR_OFFSETS]
        return sorted(c for c in out if c in self._index)

    def neighbor_indices(self) -> list[list[int]]:
        idx = self._index
        result = []
        for q, r in self.cells:
            nb = []
            for dq, dr in NEIGHBOR_OFFSETS:
                k = idx.get((int(q) + dq, int(r) + dr))
                if k is not None:
                    nb.append(k)
            result.append(sorted(nb))
        return result

    def vertices(self, cell: Cell) -> np.ndarray:
        """Polygon vertices (6, 2) of a cell, counter-clockwise."""
        cx, cy = self.centroid(cell)
        start = 30.0 if self.orientation == "pointy" else 0.0
        ang = np.radians(start + 60.0 * np.arange(6))
        s = self.side_length
        return np.column_stack([cx + s * np.cos(ang), cy + s * np.sin(ang)])

    def spec(self) -> dict:
        return {
            "xmin": self.bbox.xmin,
            "ymin": self.bbox.ymin,
            "xmax": self.bbox.xmax,
            "ymax": self.bbox.ymax,
            "cell_area": self.cell_area,
            "orientation": self.orientation,
        }


def _axial_to_xy(q, r, s, orientation, bbox):
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    if orientation == "pointy":
        x = s * SQRT3 * (q + r / 2.0)
        y = s * 1.5 * r
    else:
        x = s * 1.5 * q
        y = s * SQRT3 * (r + q / 2.0)
    return x + bbox.xmin, y + bbox.ymin


def _xy_to_fractional_axial(x, y, s, orientation, bbox):
    x = np.asarray(x, dtype=float) - bbox.xmin
    y = np.asarray(y, dtype=float) - bbox.ymin
    if orientation == "pointy":
        q = (SQRT3 / 3.0 * x - y / 3.0) / s
        r = (2.0 / 3.0 * y) / s
    else:
        q = (2.0 / 3.0 * x) / s
        r = (-x / 3.0 + SQRT3 / 3.0 * y) / s
    return q, r


def _cube_round(qf, rf):
    sf = -qf - rf
    q = np.rint(qf)
    r = np.rint(rf)
    s = np.rint(sf)
    dq = np.abs(q - qf)
    dr = np.abs(r - rf)
    ds = np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def _hex_overlaps_box(cx, cy, s, orientation, bbox) -> np.ndarray:
    """Separating-axis test for positive-area overlap of hexagons and the box.

    ``cx`` and ``cy`` are centroid arrays; returns one flag per hexagon.
    """
    cx = np.atleast_1d(np.asarray(cx, dtype=float))
    cy = np.atleast_1d(np.asarray(cy, dtype=float))
    start = 30.0 if orientation == "pointy" else 0.0
    ang = np.radians(start + 60.0 * np.arange(6))
    vx = cx[:, None] + s * np.cos(ang)
    vy = cy[:, None] + s * np.sin(ang)
    corners = np.array(
        [
            [bbox.xmin, bbox.ymin],
            [bbox.xmax, bbox.ymin],
            [bbox.xmax, bbox.ymax],
            [bbox.xmin, bbox.ymax],
        ]
    )
    # box normals plus the three hexagon edge normals (start+30 + k*60 degrees)
    axes = [(1.0, 0.0), (0.0, 1.0)]
    for k in range(3):
        a = math.radians(start + 30.0 + 60.0 * k)
        axes.append((math.cos(a), math.sin(a)))
    eps = 1e-12 * max(s, 1.0)
    ok = np.ones(len(cx), dtype=bool)
    for ax, ay in axes:
        ph = vx * ax + vy * ay
        pb = corners @ (ax, ay)
        overlap = np.minimum(ph.max(axis=1), pb.max()) - np.maximum(ph.min(axis=1), pb.min())
        ok &= overlap > eps
    return ok


def build_grid(bbox, cell_area: float = 1.0, orientation: str = "pointy") -> HexGrid:
    """Tile ``bbox`` with regular hexagons of area ``cell_area``.

    Parameters
    ----------
    bbox : BBox or sequence of four floats ``(xmin, ymin, xmax, ymax)`` in miles.
    cell_area : float
        Hexagon area in square miles.
    orientation : {"pointy", "flat"}

    Returns
    -------
    HexGrid
        Every cell whose interior overlaps the box, sorted by ``(q, r)``.
    """
    if not isinstance(bbox, BBox):
        bbox = BBox(*map(float, bbox))
    orientation = _normalize_orientation(orientation)
    s = side_length_for_area(float(cell_area))

    # conservative axial range from the box corners, padded by 2 cells
    cx = np.array([bbox.xmin, bbox.xmax, bbox.xmin, bbox.xmax])
    cy = np.array([bbox.ymin, bbox.ymin, bbox.ymax, bbox.ymax])
    qf, rf = _xy_to_fractional_axial(cx, cy, s, orientation, bbox)
    qlo, qhi = int(math.floor(qf.min())) - 2, int(math.ceil(qf.max())) + 2
    rlo, rhi = int(math.floor(rf.min())) - 2, int(math.ceil(rf.max())) + 2

    qq, rr = np.meshgrid(np.arange(qlo, qhi + 1), np.arange(rlo, rhi + 1), indexing="ij")
    qq = qq.ravel()
    rr = rr.ravel()
    xs, ys = _axial_to_xy(qq, rr, s, orientation, bbox)
    # cheap prefilter on the circumscribed circle
    near = (
        (xs + s >= bbox.xmin)
        & (xs - s <= bbox.xmax)
        & (ys + s >= bbox.ymin)
        & (ys - s <= bbox.ymax)
    )
    keep = np.flatnonzero(near)
    keep = keep[_hex_overlaps_box(xs[keep], ys[keep], s, orientation, bbox)]
    cells = np.column_stack([qq[keep], rr[keep]]).astype(np.int64)
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    cells = cells[order]
    cx, cy = _axial_to_xy(cells[:, 0], cells[:, 1], s, orientation, bbox)
    centroids = np.column_stack([cx, cy])
    index = {(int(q), int(r)): k for k, (q, r) in enumerate(cells)}
    return HexGrid(
        bbox=bbox,
        cell_area=float(cell_area),
        orientation=orientation,
        side_length=s,
        cells=cells,
        centroids=centroids,
        _index=index,
    )


def _normalize_orientation(orientation: str) -> str:
    o = str(orientation).lower().replace("-top", "").replace("_top", "")
    if o not in ("pointy", "flat"):
        raise ValueError(f"orientation must be 'pointy' or 'flat', got {orientation!r}")
    return o


def assign_points(grid: HexGrid, xs, ys) -> np.ndarray:
    """Vectorised cell lookup; returns cell indices (``-1`` outside the box).

    Points on a shared edge or vertex go to the lexicographically smallest
    containing cell that belongs to the grid.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    s = grid.side_length
    qf, rf = _xy_to_fractional_axial(xs, ys, s, grid.orientation, grid.bbox)
    q0, r0 = _cube_round(qf, rf)

    offsets = ((0, 0),) + NEIGHBOR_OFFSETS
    cand_q = np.stack([q0 + dq for dq, _ in offsets], axis=1)
    cand_r = np.stack([r0 + dr for _, dr in offsets], axis=1)
    cx, cy = _axial_to_xy(cand_q, cand_r, s, grid.orientation, grid.bbox)
    d2 = (cx - xs[:, None]) ** 2 + (cy - ys[:, None]) ** 2
    dmin = d2.min(axis=1, keepdims=True)
    tie_tol = 1e-9 * s * s
    tied = d2 <= dmin + tie_tol

    inside = (
        (xs >= grid.bbox.xmin)
        & (xs <= grid.bbox.xmax)
        & (ys >= grid.bbox.ymin)
        & (ys <= grid.bbox.ymax)
    )
    # dense (q, r) -> index table; cells are lexsorted, so the smallest
    # index among tied candidates is the lexicographically smallest id
    qmin, rmin = grid.cells.min(axis=0)
    qmax, rmax = grid.cells.max(axis=0)
    table = np.full((qmax - qmin + 1, rmax - rmin + 1), -1, dtype=np.int64)
    table[grid.cells[:, 0] - qmin, grid.cells[:, 1] - rmin] = np.arange(grid.n_cells)
    iq = cand_q - qmin
    ir = cand_r - rmin
    in_table = (iq >= 0) & (iq < table.shape[0]) & (ir >= 0) & (ir < table.shape[1])
    cand_idx = np.full(cand_q.shape, -1, dtype=np.int64)
    cand_idx[in_table] = table[iq[in_table], ir[in_table]]
    usable = tied & (cand_idx >= 0)
    sentinel = np.iinfo(np.int64).max
    best = np.where(usable, cand_idx, sentinel).min(axis=1)
    lost = inside & (best == sentinel)
    if lost.any():
        i = int(np.flatnonzero(lost)[0])
        raise RuntimeError(f"point ({xs[i]}, {ys[i]}) fell between grid cells")
    return np.where(inside, best, -1)


def assign_point(grid: HexGrid, p: PointRecord) -> Cell:
    """Return the id of the cell containing ``p``."""
    if not grid.bbox.contains(p.x, p.y):
        raise OutOfDomainError(f"point ({p.x}, {p.y}) lies outside the grid bounding box")
    k = assign_points(grid, [p.x], [p.y])[0]
    q, r = grid.cells[k]
    return int(q), int(r)


def centroid_distance(grid: HexGrid, i: Cell, j: Cell) -> float:
    """Euclidean distance in miles between two cell centroids."""
    xi, yi = grid.centroids[grid.index_of(i)]
    xj, yj = grid.centroids[grid.index_of(j)]
    return float(math.hypot(xi - xj, yi - yj))


@dataclass(frozen=True, eq=False)
class EmploymentField:
    """Nonnegative job counts aligned with ``grid.cells``."""

    grid: HexGrid
    values: np.ndarray
    n_dropped: int = 0
    weight_dropped: float = 0.0

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise ValueError(
                f"field has shape {v.shape}, expected ({self.grid.n_cells},)"
            )
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError("employment values must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, cell: Cell) -> float:
        if not self.grid.has_cell(cell):
            return 0.0
        return float(self.values[self.grid.index_of(cell)])

    @property
    def total(self) -> float:
        return float(math.fsum(self.values))

    def density(self) -> np.ndarray:
        return self.values / self.grid.cell_area

    @classmethod
    def from_mapping(cls, grid: HexGrid, mapping: dict) -> "EmploymentField":
        v = np.zeros(grid.n_cells)
        for cell, val in mapping.items():
            v[grid.index_of(cell)] = val
        return cls(grid, v)


def aggregate_points(
    grid: HexGrid, points: Iterable[PointRecord] | pd.DataFrame, policy: str = "strict"
) -> EmploymentField:
    """Sum point weights into the cells that contain them.

    ``policy="strict"`` raises on the first point outside the box;
    ``policy="drop"`` skips such points and records how many were dropped
    and how much weight they carried.
    """
    if policy not in ("strict", "drop"):
        raise ValueError(f"unknown policy {policy!r}")
    xs, ys, ws = _point_arrays(points)
    if np.any(ws < 0):
        raise ValueError("point weights must be nonnegative")
    idx = assign_points(grid, xs, ys) if len(xs) else np.zeros(0, dtype=np.int64)
    outside = idx < 0
    if outside.any() and policy == "strict":
        k = int(np.flatnonzero(outside)[0])
        raise OutOfDomainError(
            f"record {k} at ({xs[k]}, {ys[k]}) lies outside the grid bounding box"
        )
    vals = np.zeros(grid.n_cells)
    # np.add.at accumulates in record order, so results are reproducible
    np.add.at(vals, idx[~outside], ws[~outside])
    return EmploymentField(
        grid,
        vals,
        n_dropped=int(outside.sum()),
        weight_dropped=float(math.fsum(ws[outside])),
    )


def _point_arrays(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(points, pd.DataFrame):
        w = points["weight"] if "weight" in points else np.ones(len(points))
        return (
            points["x_mi"].to_numpy(float),
            points["y_mi"].to_numpy(float),
            np.asarray(w, dtype=float),
        )
    pts = list(points)
    if not pts:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    return (
        np.array([p.x for p in pts], dtype=float),
        np.array([p.y for p in pts], dtype=float),
        np.array([p.weight for p in pts], dtype=float),
    )


def project_lonlat(lon, lat, ref_lat: float, ref_lon: float = 0.0):
    """Equirectangular projection of degrees to planar miles."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    kx = MILES_PER_DEGREE_LAT * math.cos(math.radians(ref_lat))
    return (lon - ref_lon) * kx, lat * MILES_PER_DEGREE_LAT


def read_points_csv(
    path: str | Path, ref_lat: float | None = None, ref_lon: float = 0.0
) -> pd.DataFrame:
    """Read a point file with ``x_mi,y_mi,weight`` (or ``lon,lat,weight``).

    Lon/lat input requires ``ref_lat`` for the pre-projection. A missing
    weight column means unit weights.
    """
    df = pd.read_csv(path)
    if {"x_mi", "y_mi"} <= set(df.columns):
        out = df[["x_mi", "y_mi"]].astype(float).copy()
    elif {"lon", "lat"} <= set(df.columns):
        if ref_lat is None:
            raise ValueError(f"{path}: lon/lat input needs a reference latitude")
        x, y = project_lonlat(df["lon"], df["lat"], ref_lat, ref_lon)
        out = pd.DataFrame({"x_mi": x, "y_mi": y})
    else:
        raise ValueError(f"{path}: expected columns x_mi,y_mi[,weight] or lon,lat[,weight]")
    out["weight"] = df["weight"].astype(float) if "weight" in df.columns else 1.0
    if out.isna().any().any():
        raise ValueError(f"{path}: missing values in point file")
    return out


def write_points_csv(path: str | Path, xs: Sequence[float], ys: Sequence[float], ws) -> None:
    pd.DataFrame({"x_mi": xs, "y_mi": ys, "weight": ws}).to_csv(path, index=False)


def grid_frame(grid: HexGrid) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "cell_q": grid.cells[:, 0],
            "cell_r": grid.cells[:, 1],
            "x_mi": grid.centroids[:, 0],
            "y_mi": grid.centroids[:, 1],
        }
    )
