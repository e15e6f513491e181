"""In-memory building blocks shared by the CLI stages and the Monte-Carlo tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import access as acc
from .effects import elasticity
from .hexgrid import EmploymentField, HexGrid, aggregate_points, assign_points, build_grid
from .iv import iv_tobit_two_step, two_sls
from .regress import (
    HouseholdSample,
    _drop_constant_dummies,
    control_columns,
    design_matrix,
    joint_significance,
    tobit_fit,
)
from .subcenter import classify_cells, identify_subcenters
from .synthdata import Region, SynthConfig, gen_households, gen_region

DEFAULT_GROUPING = ((1, 1), (2, 2), (3, math.inf))
LABEL_COLUMNS = {
    "all": "acc_all",
    "centered": "acc_centered",
    "none": "acc_noncentered",
    "rank1": "acc_rank1",
    "rank2": "acc_rank2",
    "rank3plus": "acc_rank3plus",
}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    table: str
    access: tuple[str, ...]
    instruments: tuple[str, ...] = ()
    urban_only: bool = False

    @property
    def is_iv(self) -> bool:
        return bool(self.instruments)


T3_IV = ("iv_yellow_car", "iv_plaza")
T4_IV = ("iv_red_car", "iv_yellow_car", "iv_highway")
T4_ACC = ("acc_centered", "acc_noncentered")
T5_ACC = ("acc_rank1", "acc_rank2", "acc_rank3plus", "acc_noncentered")

MODEL_SPECS = (
    ModelSpec("model_1", "table3", ("acc_all",)),
    ModelSpec("model_2", "table3", ("acc_all",), T3_IV),
    ModelSpec("model_3", "table3", ("acc_all",), urban_only=True),
    ModelSpec("model_4", "table3", ("acc_all",), T3_IV, urban_only=True),
    ModelSpec("model_5", "table4", T4_ACC),
    ModelSpec("model_6", "table4", T4_ACC, T4_IV),
    ModelSpec("model_7", "table4", T4_ACC, urban_only=True),
    ModelSpec("model_8", "table4", T4_ACC, T4_IV, urban_only=True),
    ModelSpec("model_9", "table5", T5_ACC),
    ModelSpec("model_10", "table5", T5_ACC, urban_only=True),
)


def build_access_table(
    grid: HexGrid,
    field: EmploymentField,
    centers,
    amenities: dict[str, pd.DataFrame],
    anchor_xy: tuple[float, float],
    scale: float = acc.EMPLOYMENT_SCALE,
    grouping=DEFAULT_GROUPING,
) -> pd.DataFrame:
    """Employment access by sub-center partition plus instrument access columns."""
    classification = classify_cells(grid, centers, grouping)
    rank_labels = list(classification.group_names)
    vectors = acc.partition_access(
        grid, field, classification, scale, merges={"centered": rank_labels}
    )
    named = {}
    for label, vec in vectors.items():
        named[LABEL_COLUMNS.get(label, f"acc_{label}")] = vec
    for layer, pts in sorted(amenities.items()):
        idx = assign_points(grid, pts["x_mi"].to_numpy(), pts["y_mi"].to_numpy())
        named[f"iv_{layer}"] = acc.amenity_access(grid, acc.amenity_indicator(grid, idx), layer)
    k = assign_points(grid, [anchor_xy[0]], [anchor_xy[1]])[0]
    if k < 0:
        raise ValueError(f"anchor point {anchor_xy} lies outside the grid")
    q, r = grid.cells[k]
    named["iv_plaza"] = acc.anchor_inverse_distance(grid, (int(q), int(r)), "plaza")
    order = [c for c in LABEL_COLUMNS.values() if c in named]
    order += sorted(c for c in named if c not in order)
    return acc.access_frame(grid, {c: named[c] for c in order})


@dataclass
class SynthDataset:
    cfg: SynthConfig
    region: Region
    grid: HexGrid
    field: EmploymentField
    centers: object
    access: pd.DataFrame
    households: pd.DataFrame
    truth: dict


def synth_dataset(cfg: SynthConfig, percentile: float = 0.95, min_total_jobs: float = 10_000.0) -> SynthDataset:
    region = gen_region(cfg)
    grid = build_grid(cfg.bbox, cfg.cell_area, cfg.orientation)
    field = aggregate_points(grid, region.establishments)
    centers = identify_subcenters(grid, field, percentile, min_total_jobs)
    table = build_access_table(grid, field, centers, region.amenities, region.anchor)
    vecs = {c: table[c].to_numpy() for c in table.columns if c not in ("cell_q", "cell_r")}
    draw = gen_households(cfg, grid, vecs, region)
    return SynthDataset(cfg, region, grid, field, centers, table, draw.data, draw.truth)


def _design(df: pd.DataFrame, access_cols) -> tuple[np.ndarray, list[str]]:
    X, names = design_matrix(df, access_cols, controls=True)
    return _drop_constant_dummies(X, names)


def fit_model(
    sample: HouseholdSample,
    spec: ModelSpec,
    policy: str = "observed",
    bootstrap_reps: int = 200,
    seed: int = 0,
) -> dict:
    """Fit one Tables-3/4/5 style model and return its report record."""
    df = sample.data
    if spec.urban_only:
        df = df.loc[df["urban_core"] == 1].reset_index(drop=True)
    y = df["vmt"].to_numpy(float)
    X, names = _design(df, spec.access)
    rec = {"model": spec.name, "table": spec.table, "estimator": "iv_tobit" if spec.is_iv else "tobit",
           "sample": "urban_core" if spec.urban_only else "all", "access": list(spec.access),
           "instruments": list(spec.instruments)}
    if spec.is_iv:
        m = len(spec.access)
        W = X[:, 1 : 1 + m]
        C = np.delete(X, np.s_[1 : 1 + m], axis=1)
        cnames = [names[0]] + names[1 + m :]
        Z = df[list(spec.instruments)].to_numpy(float)
        fit = iv_tobit_two_step(
            y, W, C, Z, endog_names=list(spec.access), exog_names=cnames,
            bootstrap_reps=bootstrap_reps, seed=seed,
        )
        tob = fit.second_stage
        rec.update(fit.to_dict())
        rec["se_type"] = "bootstrap" if fit.bootstrap_se is not None else "naive"
        lr = joint_significance(tob, y)
        tsls = two_sls(y, W, C, Z, list(spec.access), cnames)
        rec["two_sls"] = {nm: float(b) for nm, b in zip(tsls.names[:m], tsls.params[:m])}
        se = {a: fit.se(a) for a in spec.access}
    else:
        tob = tobit_fit(X, y, names)
        rec.update(tob.to_dict())
        rec["se_type"] = "robust"
        lr = joint_significance(tob, y)
        rec["first_stage"] = None
        rec["sargan"] = None
        se = {a: tob.se(a) for a in spec.access}
    rec["lr_joint"] = {"stat": lr.statistic, "dof": lr.dof, "p": lr.pvalue}
    # elasticities use observed regressors in the index, also for IV models
    Xobs = X[:, [names.index(nm) for nm in tob.names]]
    rows = []
    for a in spec.access:
        e = elasticity(tob, Xobs, y, a, df[a].to_numpy(float), policy)
        rows.append(
            {"variable": a, "coefficient": tob.coef(a), "se": se[a], "elasticity": e.value,
             "n_used": e.n_used, "policy": e.policy}
        )
    rec["access_effects"] = rows
    return rec


__all__ = [
    "MODEL_SPECS",
    "ModelSpec",
    "build_access_table",
    "control_columns",
    "fit_model",
    "synth_dataset",
]
