"""Employment sub-center detection with the density-percentile / job-floor rule.

A cell is a candidate when its job density is strictly above a regional
percentile. Edge-connected candidates form clusters; clusters holding at
least ``min_total_jobs`` jobs become sub-centers, ranked by size.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .hexgrid import Cell, EmploymentField, HexGrid

INF = math.inf
NONE_LABEL = "none"


@dataclass(frozen=True)
class SubCenter:
    rank: int
    members: tuple[Cell, ...]
    total_jobs: float
    peak_density: float


@dataclass(frozen=True)
class SubCenterSet:
    centers: tuple[SubCenter, ...]
    threshold_density: float
    min_total_jobs: float
    percentile: float

    def __len__(self) -> int:
        return len(self.centers)

    def rank_of(self) -> dict[Cell, int]:
        return {c: sc.rank for sc in self.centers for c in sc.members}

    def summary(self) -> dict:
        return {
            "threshold_density": self.threshold_density,
            "percentile": self.percentile,
            "min_total_jobs": self.min_total_jobs,
            "n_centers": len(self.centers),
            "centers": [
                {
                    "rank": sc.rank,
                    "n_cells": len(sc.members),
                    "total_jobs": sc.total_jobs,
                    "peak_density": sc.peak_density,
                }
                for sc in self.centers
            ],
        }


def _nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    n = len(sorted_values)
    # guard against p*n landing a hair above an integer
    k = max(1, math.ceil(p * n - 1e-9))
    return float(sorted_values[min(k, n) - 1])


def density_threshold(
    field: EmploymentField, grid: HexGrid, percentile: float = 0.95, positive_only: bool = False
) -> float:
    """Nearest-rank percentile of cell job density, in jobs per square mile.

    By default every grid cell enters the distribution, zeros included.
    ``positive_only=True`` restricts it to cells with jobs.
    """
    if not 0.0 < percentile < 1.0:
        raise ValueError(f"percentile must lie in (0, 1), got {percentile}")
    if grid.n_cells == 0:
        raise ValueError("grid has no cells")
    dens = field.values / grid.cell_area
    if positive_only:
        dens = dens[dens > 0]
        if len(dens) == 0:
            raise ValueError("no cells with positive employment")
    return _nearest_rank(np.sort(dens), percentile)


def identify_subcenters(
    grid: HexGrid,
    field: EmploymentField,
    percentile: float = 0.95,
    min_total_jobs: float = 10_000.0,
    positive_only: bool = False,
) -> SubCenterSet:
    """Find and rank employment sub-centers.

    Parameters
    ----------
    grid, field
        Tessellation and per-cell job counts.
    percentile : float
        Density percentile a cell must strictly exceed.
    min_total_jobs : float
        Minimum jobs in a connected candidate cluster.
    positive_only : bool
        Compute the percentile over positive-employment cells only.

    Returns
    -------
    SubCenterSet
        Possibly empty; ranks follow total jobs (descending), ties broken by
        the smallest member cell id.
    """
    if min_total_jobs < 0:
        raise ValueError(f"min_total_jobs must be nonnegative, got {min_total_jobs}")
    thr = density_threshold(field, grid, percentile, positive_only=positive_only)
    dens = field.values / grid.cell_area
    cand = dens > thr
    nbrs = grid.neighbor_indices()

    seen = np.zeros(grid.n_cells, dtype=bool)
    clusters = []
    for start in np.flatnonzero(cand):
        if seen[start]:
            continue
        seen[start] = True
        comp = []
        queue = deque([int(start)])
        while queue:
            k = queue.popleft()
            comp.append(k)
            for j in nbrs[k]:
                if cand[j] and not seen[j]:
                    seen[j] = True
                    queue.append(j)
        comp.sort()
        total = math.fsum(field.values[comp])
        if total >= min_total_jobs:
            clusters.append((comp, total))

    # cells are stored lexicographically, so comp[0] is the smallest member id
    clusters.sort(key=lambda c: (-c[1], c[0][0]))
    centers = tuple(
        SubCenter(
            rank=i + 1,
            members=tuple((int(grid.cells[k, 0]), int(grid.cells[k, 1])) for k in comp),
            total_jobs=float(total),
            peak_density=float(dens[comp].max()),
        )
        for i, (comp, total) in enumerate(clusters)
    )
    return SubCenterSet(centers, float(thr), float(min_total_jobs), float(percentile))


@dataclass(frozen=True)
class CellClassification:
    """One label per grid cell; ``labels[k]`` belongs to ``grid.cells[k]``."""

    grid: HexGrid
    labels: tuple[str, ...]
    grouping: tuple[tuple[int, float], ...]
    group_names: tuple[str, ...] = field(default=())

    def label_names(self) -> list[str]:
        return list(self.group_names) + [NONE_LABEL]

    def mask(self, label: str) -> np.ndarray:
        return np.array([lab == label for lab in self.labels], dtype=bool)


def interval_name(lo: int, hi: float) -> str:
    if hi == INF:
        return f"rank{lo}plus"
    if lo == hi:
        return f"rank{lo}"
    return f"rank{lo}to{int(hi)}"


def parse_grouping(text: str) -> list[tuple[int, float]]:
    """Parse ``"1-1,2-2,3-inf"`` into rank intervals."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition("-")
        lo_i = int(lo)
        hi_v = INF if hi.strip().lower() in ("inf", "") else int(hi)
        out.append((lo_i, hi_v))
    return out


def _check_grouping(grouping: Sequence[tuple[int, float]]) -> list[tuple[int, float]]:
    g = sorted((int(lo), float(hi)) for lo, hi in grouping)
    if not g:
        raise ValueError("grouping needs at least one rank interval")
    expect = 1
    for lo, hi in g:
        if hi < lo:
            raise ValueError(f"empty rank interval [{lo}, {hi}]")
        if lo < expect:
            raise ValueError(f"rank intervals overlap at rank {lo}")
        if lo > expect:
            raise ValueError(f"rank intervals leave a gap before rank {lo}")
        expect = hi + 1
    if g[-1][1] != INF:
        raise ValueError("rank intervals must extend to infinity")
    return g


def classify_cells(
    grid: HexGrid, centers: SubCenterSet, grouping: Sequence[tuple[int, float]]
) -> CellClassification:
    """Label each cell by the rank interval of its sub-center, or ``"none"``."""
    g = _check_grouping(grouping)
    names = tuple(interval_name(lo, hi) for lo, hi in g)
    rank_of = centers.rank_of()
    labels = []
    for q, r in grid.cells:
        rank = rank_of.get((int(q), int(r)))
        if rank is None:
            labels.append(NONE_LABEL)
            continue
        for (lo, hi), name in zip(g, names):
            if lo <= rank <= hi:
                labels.append(name)
                break
    return CellClassification(grid, tuple(labels), tuple(g), names)


def centers_frame(centers: SubCenterSet) -> pd.DataFrame:
    rows = [
        (q, r, sc.rank, sc.total_jobs) for sc in centers.centers for q, r in sc.members
    ]
    return pd.DataFrame(rows, columns=["cell_q", "cell_r", "center_rank", "center_total_jobs"])


def write_centers(centers: SubCenterSet, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    centers_frame(centers).to_csv(out_dir / "centers.csv", index=False)
    with open(out_dir / "centers_summary.json", "w") as fh:
        json.dump(centers.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_centers(path: str | Path, threshold: float = math.nan) -> SubCenterSet:
    df = pd.read_csv(path)
    centers = []
    for rank, grp in df.groupby("center_rank", sort=True):
        members = tuple(sorted(zip(grp["cell_q"].astype(int), grp["cell_r"].astype(int))))
        centers.append(
            SubCenter(int(rank), members, float(grp["center_total_jobs"].iloc[0]), math.nan)
        )
    return SubCenterSet(tuple(centers), threshold, math.nan, math.nan)
