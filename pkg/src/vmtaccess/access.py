"""Gravity accessibility indices on a hexagonal grid.

Each destination cell sums source weights damped by squared centroid
distance; the destination's own weight enters undamped. The employment
index is divided by 10,000, amenity indices are not scaled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .hexgrid import Cell, EmploymentField, HexGrid
from .subcenter import CellClassification

EMPLOYMENT_SCALE = 10_000.0
BLOCK_ROWS = 512


@dataclass(frozen=True, eq=False)
class AccessVector:
    values: np.ndarray
    kind: str
    scale: float = 1.0
    mask: str = "all"

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


def _check_distinct_centroids(grid: HexGrid) -> None:
    c = grid.centroids
    if len(np.unique(np.round(c, 12), axis=0)) != len(c):
        raise ValueError("grid has coincident centroids for distinct cells")


def gravity_sum(grid: HexGrid, weights: np.ndarray, block_rows: int = BLOCK_ROWS) -> np.ndarray:
    """``sum_{j != i} w_j / D_ij**2 + w_i`` for every cell ``i``.

    Destinations are processed in blocks; within a row the sum runs over
    sources in cell order, so the result does not depend on ``block_rows``.
    """
    w = np.asarray(weights, dtype=float)
    n = grid.n_cells
    if w.shape != (n,):
        raise ValueError(f"weights have shape {w.shape}, expected ({n},)")
    _check_distinct_centroids(grid)
    x = grid.centroids[:, 0]
    y = grid.centroids[:, 1]
    out = np.empty(n)
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        dx = x[start:stop, None] - x[None, :]
        dy = y[start:stop, None] - y[None, :]
        d2 = dx * dx + dy * dy
        rows = np.arange(stop - start)
        d2[rows, rows + start] = 1.0
        contrib = w[None, :] / d2
        # own cell: undamped
        contrib[rows, rows + start] = w[start:stop]
        out[start:stop] = contrib.sum(axis=1)
    return out


def gravity_access(
    grid: HexGrid,
    field: EmploymentField,
    mask: np.ndarray | None = None,
    scale: float = EMPLOYMENT_SCALE,
    name: str = "all",
) -> AccessVector:
    """Job accessibility counting only cells where ``mask`` is true."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    w = np.asarray(field.values, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != w.shape:
            raise ValueError("mask does not match the grid")
        w = np.where(mask, w, 0.0)
    return AccessVector(gravity_sum(grid, w) / scale, "employment-gravity", scale, name)


def partition_access(
    grid: HexGrid,
    field: EmploymentField,
    classification: CellClassification,
    scale: float = EMPLOYMENT_SCALE,
    merges: Mapping[str, list[str]] | None = None,
) -> dict[str, AccessVector]:
    """Access split by classification label, plus ``"all"``.

    ``merges`` adds vectors for unions of labels, e.g.
    ``{"centered": ["rank1", "rank2", "rank3plus"]}``.
    """
    if classification.grid is not grid and classification.grid.n_cells != grid.n_cells:
        raise ValueError("classification was built on a different grid")
    if len(classification.labels) != grid.n_cells:
        raise ValueError(
            f"classification covers {len(classification.labels)} of {grid.n_cells} cells"
        )
    labels = np.array(classification.labels, dtype=object)
    out: dict[str, AccessVector] = {"all": gravity_access(grid, field, None, scale, "all")}
    for lab in classification.label_names():
        out[lab] = gravity_access(grid, field, labels == lab, scale, lab)
    for name, members in (merges or {}).items():
        m = np.isin(labels, list(members))
        out[name] = gravity_access(grid, field, m, scale, name)
    return out


def amenity_access(grid: HexGrid, amenity: np.ndarray, name: str = "amenity") -> AccessVector:
    """Unscaled gravity access to a 0/1 amenity layer."""
    a = np.asarray(amenity, dtype=float)
    if a.shape != (grid.n_cells,):
        raise ValueError(f"amenity layer has shape {a.shape}, expected ({grid.n_cells},)")
    if not np.all((a == 0) | (a == 1)):
        bad = a[(a != 0) & (a != 1)][0]
        raise ValueError(f"amenity indicator must be 0 or 1, found {bad}")
    return AccessVector(gravity_sum(grid, a), "amenity-gravity", 1.0, name)


def amenity_indicator(grid: HexGrid, cell_index: np.ndarray) -> np.ndarray:
    """0/1 layer marking every cell that holds at least one amenity point."""
    a = np.zeros(grid.n_cells)
    idx = np.asarray(cell_index)
    a[idx[idx >= 0]] = 1.0
    return a


def anchor_inverse_distance(grid: HexGrid, anchor: Cell, name: str = "anchor") -> AccessVector:
    """``1 / D(i, anchor)``, with the anchor cell itself set to 1."""
    k = grid.index_of(anchor)
    d = np.hypot(*(grid.centroids - grid.centroids[k]).T)
    with np.errstate(divide="ignore"):
        v = 1.0 / d
    v[k] = 1.0
    return AccessVector(v, "anchor-inverse-distance", 1.0, name)


def quantile_classes(v, k: int = 5, cell_ids: np.ndarray | None = None) -> np.ndarray:
    """Assign classes ``1..k`` by ascending rank.

    Cells are sorted by (value, cell position); the cell at 1-based rank
    ``m`` gets class ``ceil(m * k / n)``. Tied values all take the class of
    the first tied cell in that order.
    """
    vals = np.asarray(v.values if isinstance(v, AccessVector) else v, dtype=float)
    n = len(vals)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if n < k:
        raise ValueError(f"need at least {k} cells, got {n}")
    tiebreak = np.arange(n) if cell_ids is None else np.asarray(cell_ids)
    order = np.lexsort((tiebreak, vals))
    ranks = np.arange(1, n + 1)
    cls_sorted = -(-ranks * k // n)
    sorted_vals = vals[order]
    # propagate the first class through each run of equal values
    for m in range(1, n):
        if sorted_vals[m] == sorted_vals[m - 1]:
            cls_sorted[m] = cls_sorted[m - 1]
    out = np.empty(n, dtype=np.int64)
    out[order] = cls_sorted
    return out


def access_frame(grid: HexGrid, vectors: Mapping[str, AccessVector]) -> pd.DataFrame:
    df = pd.DataFrame({"cell_q": grid.cells[:, 0], "cell_r": grid.cells[:, 1]})
    for name, vec in vectors.items():
        df[name] = vec.values
    return df
