"""Command-line pipeline: ``vmtaccess <stage> --config FILE --out DIR``.

Stages communicate only through files in the output directory::

    synth      -> establishments.csv, amenity_*.csv, anchor.csv, households.csv, truth.json
    grid       -> grid.json, grid.csv, employment.csv
    centers    -> centers.csv, centers_summary.json, classification.csv
    access     -> access.csv, quintiles.csv
    estimate   -> estimates.json
    iv-estimate-> iv_estimates.json
    elasticity -> elasticities.csv
    scenario   -> scenario.json
    report     -> report.json, table3.csv, table4.csv, table5.csv, top_quintile.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import access as acc
from .effects import ElasticityEstimate, elasticity, scenario_vmt_change
from .hexgrid import BBox, EmploymentField, aggregate_points, build_grid, grid_frame, read_points_csv
from .pipeline import MODEL_SPECS, _design, build_access_table, fit_model
from .regress import EstimationError, TobitFit, attach_access, coefficient_stability, load_households
from .subcenter import (
    classify_cells,
    identify_subcenters,
    parse_grouping,
    write_centers,
)
from .synthdata import SynthConfig, config_dict, gen_households, gen_region, write_region, write_truth

logger = logging.getLogger("vmtaccess")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

STAGES = ("synth", "grid", "centers", "access", "estimate", "iv-estimate", "elasticity", "scenario", "report")

PRODUCER = {
    "establishments.csv": "synth",
    "households.csv": "synth",
    "anchor.csv": "synth",
    "grid.json": "grid",
    "employment.csv": "grid",
    "centers.csv": "centers",
    "classification.csv": "centers",
    "access.csv": "access",
    "quintiles.csv": "access",
    "estimates.json": "estimate",
    "iv_estimates.json": "iv-estimate",
    "elasticities.csv": "elasticity",
    "scenario.json": "scenario",
}

DEFAULTS = {
    "seed": "20190",
    "establishments": "",
    "households": "",
    "amenities": "",
    "anchor": "",
    "bbox": "",
    "cell_area": "1.0",
    "orientation": "pointy",
    "ref_lat": "",
    "ref_lon": "0",
    "point_policy": "strict",
    "percentile": "0.95",
    "min_total_jobs": "10000",
    "positive_only": "false",
    "rank_groups": "1-1,2-2,3-inf",
    "access_scale": "10000",
    "quantiles": "5",
    "quantile_variable": "acc_noncentered",
    "outlier_cap": "200",
    "models": ",".join(s.name for s in MODEL_SPECS),
    "bootstrap_reps": "200",
    "elasticity_policy": "observed",
    "stability_models": "model_1,model_5",
    "scenario_model": "model_6",
    "scenario_variable": "acc_noncentered",
    "scenario_pct": "100",
    "synth_bbox": "0,0,40,30",
    "synth_n_households": "5000",
    "synth_censor_target": "0.25",
    "synth_endogeneity": "-10",
    "synth_sigma": "35",
    "synth_n_clusters": "6",
    "synth_background": "900",
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class MissingArtifact(DataError):
    pass


# ---------------------------------------------------------------------------
# configuration


def read_config(path: str | Path | None) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg: dict[str, str] = {}
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        cfg[k] = v
    return cfg


@dataclass
class Settings:
    raw: dict[str, str]
    out: Path
    base: Path

    def get(self, key: str) -> str:
        return self.raw[key]

    def float(self, key: str) -> float:
        try:
            return float(self.raw[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.raw[key]!r}") from None

    def int(self, key: str) -> int:
        try:
            return int(self.raw[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.raw[key]!r}") from None

    def bool(self, key: str) -> bool:
        v = self.raw[key].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key} must be true/false, got {self.raw[key]!r}")
        return v in ("true", "1", "yes")

    def list(self, key: str) -> list[str]:
        return [s.strip() for s in self.raw[key].split(",") if s.strip()]

    def input_path(self, key: str, default_name: str) -> Path:
        v = self.raw.get(key, "")
        if not v:
            return self.out / default_name
        p = Path(v)
        return p if p.is_absolute() else self.base / p

    def artifact(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise MissingArtifact(
                f"missing {p}; run the '{PRODUCER.get(name, '?')}' stage first"
            )
        return p

    def echo(self, stage: str) -> None:
        lines = [f"{k} = {self.raw[k]}" for k in sorted(self.raw)]
        (self.out / f"config_{stage}.txt").write_text("\n".join(lines) + "\n")


def resolve_settings(args: argparse.Namespace) -> Settings:
    raw = dict(DEFAULTS)
    raw.update(read_config(args.config))
    overrides = {
        "seed": args.seed,
        "percentile": args.percentile,
        "min_total_jobs": args.min_jobs,
        "bootstrap_reps": args.bootstrap_reps,
    }
    for k, v in overrides.items():
        if v is not None:
            raw[k] = str(v)
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    out = Path(args.out)
    s = Settings(raw, out, base)
    _validate(s)
    out.mkdir(parents=True, exist_ok=True)
    return s


def _validate(s: Settings) -> None:
    p = s.float("percentile")
    if not 0.0 < p < 1.0:
        raise ConfigError(f"percentile must lie in (0, 1), got {p}")
    if s.float("min_total_jobs") < 0:
        raise ConfigError("min_total_jobs must be nonnegative")
    if not s.float("cell_area") > 0:
        raise ConfigError("cell_area must be positive")
    if s.get("orientation").lower() not in ("pointy", "flat", "pointy-top", "flat-top"):
        raise ConfigError(f"orientation must be pointy or flat, got {s.get('orientation')!r}")
    if not s.float("access_scale") > 0:
        raise ConfigError("access_scale must be positive")
    if s.int("quantiles") < 2:
        raise ConfigError("quantiles must be at least 2")
    if s.int("bootstrap_reps") < 0:
        raise ConfigError("bootstrap_reps must be nonnegative")
    if s.get("elasticity_policy") not in ("observed", "predicted"):
        raise ConfigError("elasticity_policy must be 'observed' or 'predicted'")
    if s.get("point_policy") not in ("strict", "drop"):
        raise ConfigError("point_policy must be 'strict' or 'drop'")
    try:
        seed = int(s.get("seed"))
    except ValueError:
        raise ConfigError("seed must be an integer") from None
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    known = {m.name for m in MODEL_SPECS}
    for m in s.list("models") + s.list("stability_models") + [s.get("scenario_model")]:
        if m not in known:
            raise ConfigError(f"unknown model {m!r}")
    try:
        parse_grouping(s.get("rank_groups"))
    except ValueError:
        raise ConfigError(f"cannot parse rank_groups {s.get('rank_groups')!r}") from None
    if s.get("bbox"):
        _bbox(s.get("bbox"))


def _bbox(text: str) -> BBox:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bbox must be four numbers, got {text!r}") from None
    if len(vals) != 4:
        raise ConfigError(f"bbox must be four numbers, got {text!r}")
    try:
        return BBox(*vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# io helpers


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def _load_grid(s: Settings):
    spec = _read_json(s.artifact("grid.json"))
    grid = build_grid(
        (spec["xmin"], spec["ymin"], spec["xmax"], spec["ymax"]),
        spec["cell_area"],
        spec["orientation"],
    )
    return grid


def _load_field(s: Settings, grid) -> EmploymentField:
    emp = pd.read_csv(s.artifact("employment.csv"))
    if len(emp) != grid.n_cells or not (
        np.array_equal(emp["cell_q"], grid.cells[:, 0]) and np.array_equal(emp["cell_r"], grid.cells[:, 1])
    ):
        raise DataError("employment.csv does not match grid.json; rerun the 'grid' stage")
    return EmploymentField(grid, emp["jobs"].to_numpy(float))


def _read_points(s: Settings, path: Path) -> pd.DataFrame:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run the '{PRODUCER.get(path.name, 'synth')}' stage first")
    ref_lat = s.get("ref_lat")
    try:
        return read_points_csv(path, float(ref_lat) if ref_lat else None, s.float("ref_lon"))
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None


def _amenity_paths(s: Settings) -> dict[str, Path]:
    spec = s.list("amenities")
    if spec:
        out = {}
        for item in spec:
            name, _, path = item.partition(":")
            if not path:
                raise ConfigError(f"amenities entry {item!r} must be name:path")
            p = Path(path)
            out[name] = p if p.is_absolute() else s.base / p
        return out
    found = sorted(s.out.glob("amenity_*.csv"))
    if not found:
        raise MissingArtifact(f"no amenity_*.csv in {s.out}; run the 'synth' stage first")
    return {p.stem[len("amenity_"):]: p for p in found}


def _households(s: Settings):
    path = s.input_path("households", "households.csv")
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run the 'synth' stage first")
    try:
        sample = load_households(path, s.float("outlier_cap"))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    access = pd.read_csv(s.artifact("access.csv"))
    try:
        return attach_access(sample, access)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _specs(s: Settings, iv: bool):
    wanted = set(s.list("models"))
    return [m for m in MODEL_SPECS if m.name in wanted and m.is_iv == iv]


# ---------------------------------------------------------------------------
# stages


def stage_synth(s: Settings) -> None:
    cfg = SynthConfig(
        seed=s.int("seed"),
        bbox=tuple(float(v) for v in s.get("synth_bbox").split(",")),
        cell_area=s.float("cell_area"),
        orientation=s.get("orientation"),
        n_households=s.int("synth_n_households"),
        censor_target=s.float("synth_censor_target"),
        endogeneity=s.float("synth_endogeneity"),
        sigma=s.float("synth_sigma"),
        n_clusters=s.int("synth_n_clusters"),
        background_jobs_per_sqmi=s.float("synth_background"),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    region = gen_region(cfg)
    write_region(region, s.out)
    # households need access on the synthetic grid; this mirrors the grid,
    # centers and access stages in memory
    grid = build_grid(cfg.bbox, cfg.cell_area, cfg.orientation)
    field = aggregate_points(grid, region.establishments)
    centers = identify_subcenters(grid, field, s.float("percentile"), s.float("min_total_jobs"))
    table = build_access_table(
        grid, field, centers, region.amenities, region.anchor,
        s.float("access_scale"), parse_grouping(s.get("rank_groups")),
    )
    vecs = {c: table[c].to_numpy() for c in table.columns if c not in ("cell_q", "cell_r")}
    draw = gen_households(cfg, grid, vecs, region)
    draw.data.to_csv(s.out / "households.csv", index=False)
    truth = dict(draw.truth)
    truth["bbox"] = list(cfg.bbox)
    write_truth(truth, s.out / "truth.json")
    _write_json(s.out / "synth_config.json", config_dict(cfg))
    logger.info("synth: %d establishments, %d households", len(region.establishments), len(draw.data))


def stage_grid(s: Settings) -> None:
    pts = _read_points(s, s.input_path("establishments", "establishments.csv"))
    if s.get("bbox"):
        bbox = _bbox(s.get("bbox"))
    else:
        truth = s.out / "truth.json"
        if truth.exists():
            bbox = BBox(*_read_json(truth)["bbox"])
        else:
            bbox = BBox(pts.x_mi.min(), pts.y_mi.min(), pts.x_mi.max(), pts.y_mi.max())
    grid = build_grid(bbox, s.float("cell_area"), s.get("orientation"))
    try:
        field = aggregate_points(grid, pts, s.get("point_policy"))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _write_json(s.out / "grid.json", grid.spec())
    grid_frame(grid).to_csv(s.out / "grid.csv", index=False)
    pd.DataFrame({"cell_q": grid.cells[:, 0], "cell_r": grid.cells[:, 1], "jobs": field.values}).to_csv(
        s.out / "employment.csv", index=False
    )
    _write_json(
        s.out / "grid_summary.json",
        {
            "n_cells": grid.n_cells,
            "side_length": grid.side_length,
            "total_jobs": field.total,
            "n_points_dropped": field.n_dropped,
            "weight_dropped": field.weight_dropped,
        },
    )


def stage_centers(s: Settings) -> None:
    grid = _load_grid(s)
    field = _load_field(s, grid)
    centers = identify_subcenters(
        grid, field, s.float("percentile"), s.float("min_total_jobs"), s.bool("positive_only")
    )
    write_centers(centers, s.out)
    cls = classify_cells(grid, centers, parse_grouping(s.get("rank_groups")))
    pd.DataFrame({"cell_q": grid.cells[:, 0], "cell_r": grid.cells[:, 1], "label": cls.labels}).to_csv(
        s.out / "classification.csv", index=False
    )


def stage_access(s: Settings) -> None:
    grid = _load_grid(s)
    field = _load_field(s, grid)
    from .subcenter import read_centers

    centers = read_centers(s.artifact("centers.csv"))
    amenities = {name: _read_points(s, p) for name, p in _amenity_paths(s).items()}
    anchor = _read_points(s, s.input_path("anchor", "anchor.csv"))
    table = build_access_table(
        grid, field, centers, amenities, (float(anchor.x_mi.iloc[0]), float(anchor.y_mi.iloc[0])),
        s.float("access_scale"), parse_grouping(s.get("rank_groups")),
    )
    table.to_csv(s.out / "access.csv", index=False)
    var = s.get("quantile_variable")
    if var not in table.columns:
        raise ConfigError(f"quantile_variable {var!r} is not an access column")
    k = s.int("quantiles")
    cls = acc.quantile_classes(table[var].to_numpy(), k)
    q = table[["cell_q", "cell_r", var]].copy()
    q["quantile"] = cls
    q["top_quantile"] = (cls == k).astype(int)
    q.to_csv(s.out / "quintiles.csv", index=False)


def stage_estimate(s: Settings) -> None:
    sample = _households(s)
    policy = s.get("elasticity_policy")
    models = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for spec in _specs(s, iv=False):
            models[spec.name] = fit_model(sample, spec, policy)
        stability = {}
        for name in s.list("stability_models"):
            spec = next(m for m in MODEL_SPECS if m.name == name)
            stability[name] = coefficient_stability(sample, list(spec.access), True, policy).to_dict()
    _write_json(
        s.out / "estimates.json",
        {"sample": sample.report(), "models": models, "coefficient_stability": stability},
    )


def stage_iv_estimate(s: Settings) -> None:
    sample = _households(s)
    policy = s.get("elasticity_policy")
    reps = s.int("bootstrap_reps")
    seed = s.int("seed")
    models = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for spec in _specs(s, iv=True):
            models[spec.name] = fit_model(sample, spec, policy, reps, seed)
    _write_json(s.out / "iv_estimates.json", {"sample": sample.report(), "models": models})


def _all_models(s: Settings, require_iv: bool = True) -> dict:
    models = dict(_read_json(s.artifact("estimates.json"))["models"])
    iv_path = s.out / "iv_estimates.json"
    if iv_path.exists() or require_iv:
        models.update(_read_json(s.artifact("iv_estimates.json"))["models"])
    return models


def _fit_from_record(rec: dict) -> TobitFit:
    names = list(rec["coefficients"])
    k = len(names) + 1
    return TobitFit(
        params=np.array([rec["coefficients"][n] for n in names]),
        sigma=float(rec["sigma"]),
        cov=np.full((k, k), np.nan),
        llf=float(rec["log_likelihood"]),
        n=int(rec["n"]),
        n_censored=int(rec["n_censored"]),
        names=names,
        iterations=0,
        grad_norm=math.nan,
        converged=True,
    )


def stage_elasticity(s: Settings) -> None:
    sample = _households(s)
    models = _all_models(s)
    rows = []
    for spec in MODEL_SPECS:
        rec = models.get(spec.name)
        if rec is None:
            continue
        df = sample.data
        if spec.urban_only:
            df = df.loc[df["urban_core"] == 1].reset_index(drop=True)
        X, names = _design(df, spec.access)
        fit = _fit_from_record(rec)
        if sorted(names) != sorted(fit.names):
            raise DataError(f"{spec.name}: household columns do not match the fitted model")
        X = X[:, [names.index(nm) for nm in fit.names]]
        y = df["vmt"].to_numpy(float)
        for policy in ("observed", "predicted"):
            for a in spec.access:
                e = elasticity(fit, X, y, a, df[a].to_numpy(float), policy)
                rows.append({"model": spec.name, **e.to_dict()})
    pd.DataFrame(rows, columns=["model", "variable", "elasticity", "n_used", "policy"]).to_csv(
        s.out / "elasticities.csv", index=False
    )


def stage_scenario(s: Settings) -> None:
    el = pd.read_csv(s.artifact("elasticities.csv"))
    model, var, policy = s.get("scenario_model"), s.get("scenario_variable"), s.get("elasticity_policy")
    row = el[(el.model == model) & (el.variable == var) & (el.policy == policy)]
    if row.empty:
        raise DataError(f"no elasticity for {var} in {model} under policy {policy}")
    r = row.iloc[0]
    e = ElasticityEstimate(var, float(r.elasticity), int(r.n_used), policy)
    out = scenario_vmt_change(e, s.float("scenario_pct"))
    out.update({"model": model, "variable": var, "policy": policy})
    _write_json(s.out / "scenario.json", out)


def _fmt_p(p):
    return None if p is None else float(p)


def stage_report(s: Settings) -> None:
    models = _all_models(s)
    quint = pd.read_csv(s.artifact("quintiles.csv"))
    report = {"models": {}, "sample": _read_json(s.artifact("estimates.json"))["sample"]}
    tables: dict[str, list] = {"table3": [], "table4": [], "table5": []}
    for spec in MODEL_SPECS:
        rec = models.get(spec.name)
        if rec is None:
            continue
        fs = rec.get("first_stage") or []
        entry = {
            "estimator": rec["estimator"],
            "sample": rec["sample"],
            "n": rec["n"],
            "access": {
                e["variable"]: {
                    "coefficient": e["coefficient"],
                    "robust_se": e["se"],
                    "se_type": rec["se_type"],
                    "elasticity": e["elasticity"],
                }
                for e in rec["access_effects"]
            },
            "lr_joint_p": rec["lr_joint"]["p"],
            "sargan_p": _fmt_p(rec["sargan"]["p"]) if rec.get("sargan") else None,
            "first_stage_F": {f["endog"]: f["F"] for f in fs} if fs else None,
            "weak_instruments": any(f["weak_flag"] for f in fs) if fs else None,
            "instruments": rec["instruments"],
        }
        report["models"][spec.name] = entry
        col = {"model": spec.name, "estimator": rec["estimator"], "sample": rec["sample"]}
        for v, d in entry["access"].items():
            col[f"{v}:coefficient"] = d["coefficient"]
            col[f"{v}:robust_se"] = d["robust_se"]
            col[f"{v}:elasticity"] = d["elasticity"]
        col["lr_joint_p"] = entry["lr_joint_p"]
        col["sargan_p"] = entry["sargan_p"]
        col["first_stage_F_min"] = min(entry["first_stage_F"].values()) if fs else None
        col["n"] = entry["n"]
        tables[spec.table].append(col)
    for name, cols in tables.items():
        if cols:
            df = pd.DataFrame(cols).set_index("model").T
            df.index.name = "field"
            df.to_csv(s.out / f"{name}.csv")
    scen = s.out / "scenario.json"
    if scen.exists():
        report["scenario"] = _read_json(scen)
    est = _read_json(s.artifact("estimates.json"))
    report["coefficient_stability"] = est.get("coefficient_stability", {})
    top = quint.loc[quint["top_quantile"] == 1].reset_index(drop=True)
    top.to_csv(s.out / "top_quintile.csv", index=False)
    report["top_quintile"] = {"n_cells": int(len(top)), "file": "top_quintile.csv"}
    _write_json(s.out / "report.json", report)


HANDLERS = {
    "synth": stage_synth,
    "grid": stage_grid,
    "centers": stage_centers,
    "access": stage_access,
    "estimate": stage_estimate,
    "iv-estimate": stage_iv_estimate,
    "elasticity": stage_elasticity,
    "scenario": stage_scenario,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmtaccess", description=__doc__.split("\n")[0])
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("--percentile", type=float)
    parser.add_argument("--min-jobs", type=float, dest="min_jobs")
    parser.add_argument("--bootstrap-reps", type=int, dest="bootstrap_reps")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_subcommand(name: str, settings: Settings) -> int:
    HANDLERS[name](settings)
    settings.echo(name)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = resolve_settings(args)
        return run_subcommand(args.stage, settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
