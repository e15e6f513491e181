"""Seeded synthetic regions and household samples with known ground truth.

Employment is a mix of Gaussian clusters (truncated at 2.5 spreads) and a
uniform background of establishments. Historical amenity layers are laid
out around the cluster anchors so that access to them predicts job access.
Household VMT follows a left-censored linear model whose intercept is tuned
to hit a target censoring share.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .access import AccessVector
from .hexgrid import BBox, HexGrid

# income categories 1..10; category 1 is the remainder
INCOME_SHARES = (0.04, 0.13, 0.09, 0.12, 0.17, 0.15, 0.17, 0.07, 0.03, 0.03)
AMENITY_LAYERS = ("red_car", "yellow_car", "highway")
TRUNCATE_SPREADS = 2.5


class ConfigError(ValueError):
    pass


def _default_controls() -> dict:
    betas = {"vehicles": 12.0, "hh_size": 4.0, "tract_density": -0.3}
    for c in range(2, 11):
        betas[f"income_{c}"] = 1.5 * (c - 1)
    return betas


@dataclass
class SynthConfig:
    seed: int = 20190
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 40.0, 30.0)
    cell_area: float = 1.0
    orientation: str = "pointy"
    n_clusters: int = 6
    cluster_centers: list | None = None
    cluster_jobs: tuple = (600_000, 300_000, 150_000, 90_000, 60_000, 40_000)
    cluster_spread: float = 1.5
    establishment_mean_size: float = 20.0
    background_jobs_per_sqmi: float = 900.0
    n_households: int = 5000
    access_betas: dict = field(
        default_factory=lambda: {"acc_centered": -0.7, "acc_noncentered": -1.3}
    )
    control_betas: dict = field(default_factory=_default_controls)
    sigma: float = 35.0
    censor_target: float = 0.25
    endogeneity: float = -10.0
    confound_share: float = 0.9
    instrument_columns: tuple = ("iv_red_car", "iv_yellow_car", "iv_highway", "iv_plaza")
    amenity_offset: float = 0.8
    stations_per_cluster: int = 6
    urban_core_share: float = 0.7

    def validate(self) -> None:
        BBox(*self.bbox)
        if not self.cluster_spread > 0:
            raise ConfigError(f"cluster_spread must be positive, got {self.cluster_spread}")
        if not 0.0 < self.censor_target < 1.0:
            raise ConfigError(f"censor_target must lie in (0, 1), got {self.censor_target}")
        if self.n_clusters < 0 or self.n_households < 0:
            raise ConfigError("counts must be nonnegative")
        if self.background_jobs_per_sqmi < 0:
            raise ConfigError("background intensity must be nonnegative")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.establishment_mean_size >= 1:
            raise ConfigError("establishment_mean_size must be at least 1")
        if not 0.0 <= self.confound_share <= 1.0:
            raise ConfigError("confound_share must lie in [0, 1]")
        self.jobs_per_cluster()

    def jobs_per_cluster(self) -> list[int]:
        jobs = self.cluster_jobs
        if np.isscalar(jobs):
            return [int(jobs)] * self.n_clusters
        jobs = [int(j) for j in jobs]
        if len(jobs) < self.n_clusters:
            raise ConfigError(f"cluster_jobs lists {len(jobs)} sizes for {self.n_clusters} clusters")
        return jobs[: self.n_clusters]


@dataclass
class Region:
    establishments: pd.DataFrame
    amenities: dict[str, pd.DataFrame]
    anchor: tuple[float, float]
    cluster_centers: np.ndarray


def _allocate(total: int, k: int, rng) -> np.ndarray:
    """Split ``total`` jobs into ``k`` establishments of at least one job."""
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    return 1 + rng.multinomial(total - k, np.full(k, 1.0 / k))


def _cluster_points(center, spread, n, bbox, rng) -> np.ndarray:
    pts = np.empty((0, 2))
    while len(pts) < n:
        draw = rng.normal(size=(2 * (n - len(pts)) + 8, 2)) * spread
        r = np.hypot(draw[:, 0], draw[:, 1])
        draw = draw[r <= TRUNCATE_SPREADS * spread] + center
        inside = (
            (draw[:, 0] >= bbox.xmin) & (draw[:, 0] <= bbox.xmax)
            & (draw[:, 1] >= bbox.ymin) & (draw[:, 1] <= bbox.ymax)
        )
        pts = np.vstack([pts, draw[inside]])
    return pts[:n]


def _segment_points(a, b, step: float = 0.25) -> np.ndarray:
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    m = max(2, int(math.ceil(length / step)) + 1)
    t = np.linspace(0.0, 1.0, m)
    return np.column_stack([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])


def _clip(pts: np.ndarray, bbox: BBox) -> np.ndarray:
    keep = (
        (pts[:, 0] >= bbox.xmin) & (pts[:, 0] <= bbox.xmax)
        & (pts[:, 1] >= bbox.ymin) & (pts[:, 1] <= bbox.ymax)
    )
    return pts[keep]


def _frame(pts: np.ndarray, w=None) -> pd.DataFrame:
    w = np.ones(len(pts)) if w is None else np.asarray(w, dtype=float)
    return pd.DataFrame({"x_mi": pts[:, 0], "y_mi": pts[:, 1], "weight": w})


def gen_region(cfg: SynthConfig) -> Region:
    """Draw establishments and amenity layers.

    Cluster anchors are placed at random (away from the box edge) unless
    ``cluster_centers`` is given. Amenity layers are built from the anchors:

    * ``red_car``: stations scattered around every anchor, shifted by
      ``amenity_offset``;
    * ``yellow_car``: radial lines out of the largest anchor;
    * ``highway``: a chain of segments linking the anchors in size order;

    plus ``anchor``, one historical point near the largest anchor.
    """
    cfg.validate()
    bbox = BBox(*cfg.bbox)
    ss = np.random.SeedSequence(cfg.seed)
    rng_jobs, rng_amen = (np.random.default_rng(s) for s in ss.spawn(2))

    if cfg.cluster_centers is not None:
        centers = np.asarray(cfg.cluster_centers, dtype=float).reshape(-1, 2)[: cfg.n_clusters]
    else:
        margin = min(TRUNCATE_SPREADS * cfg.cluster_spread, 0.25 * min(bbox.width, bbox.height))
        centers = np.column_stack(
            [
                rng_jobs.uniform(bbox.xmin + margin, bbox.xmax - margin, cfg.n_clusters),
                rng_jobs.uniform(bbox.ymin + margin, bbox.ymax - margin, cfg.n_clusters),
            ]
        )

    xs, ys, ws = [], [], []
    for c, jobs in zip(centers, cfg.jobs_per_cluster()):
        k = max(1, int(round(jobs / cfg.establishment_mean_size)))
        k = min(k, jobs)
        pts = _cluster_points(c, cfg.cluster_spread, k, bbox, rng_jobs)
        xs.append(pts[:, 0])
        ys.append(pts[:, 1])
        ws.append(_allocate(jobs, k, rng_jobs))
    area = bbox.width * bbox.height
    n_bg = rng_jobs.poisson(cfg.background_jobs_per_sqmi * area / cfg.establishment_mean_size)
    if n_bg:
        xs.append(rng_jobs.uniform(bbox.xmin, bbox.xmax, n_bg))
        ys.append(rng_jobs.uniform(bbox.ymin, bbox.ymax, n_bg))
        ws.append(rng_jobs.geometric(1.0 / cfg.establishment_mean_size, n_bg))
    if xs:
        est = pd.DataFrame(
            {
                "x_mi": np.concatenate(xs),
                "y_mi": np.concatenate(ys),
                "weight": np.concatenate(ws).astype(float),
            }
        )
    else:
        est = pd.DataFrame({"x_mi": [], "y_mi": [], "weight": []})

    amen = {}
    off = cfg.amenity_offset
    if len(centers):
        main = centers[0]
        phase = rng_amen.uniform(0, 2 * np.pi)
        shift = off * np.array([math.cos(phase), math.sin(phase)])
        st = []
        for c in centers:
            n_st = cfg.stations_per_cluster
            st.append(c + shift + rng_amen.normal(size=(n_st, 2)) * 1.5 * cfg.cluster_spread)
        amen["red_car"] = _frame(_clip(np.vstack(st), bbox))
        lines = []
        for ang in phase + np.arange(4) * np.pi / 2:
            length = rng_amen.uniform(3.0, 6.0)
            end = main + length * np.array([math.cos(ang), math.sin(ang)])
            lines.append(_segment_points(main + shift, end + shift))
        amen["yellow_car"] = _frame(_clip(np.vstack(lines), bbox))
        chain = [_segment_points(a - shift, b - shift) for a, b in zip(centers[:-1], centers[1:])]
        hw = np.vstack(chain) if chain else (main - shift)[None, :]
        amen["highway"] = _frame(_clip(hw, bbox))
        anchor = main + 0.5 * shift
        anchor = (
            float(min(max(anchor[0], bbox.xmin), bbox.xmax)),
            float(min(max(anchor[1], bbox.ymin), bbox.ymax)),
        )
    else:
        for name in AMENITY_LAYERS:
            pts = np.column_stack(
                [rng_amen.uniform(bbox.xmin, bbox.xmax, 10), rng_amen.uniform(bbox.ymin, bbox.ymax, 10)]
            )
            amen[name] = _frame(pts)
        anchor = (0.5 * (bbox.xmin + bbox.xmax), 0.5 * (bbox.ymin + bbox.ymax))
    return Region(est, amen, anchor, centers)


def write_region(region: Region, out_dir: str | Path) -> dict[str, str]:
    out_dir = Path(out_dir)
    paths = {"establishments": "establishments.csv"}
    region.establishments.to_csv(out_dir / "establishments.csv", index=False)
    for name, df in region.amenities.items():
        fn = f"amenity_{name}.csv"
        df.to_csv(out_dir / fn, index=False)
        paths[f"amenity_{name}"] = fn
    pd.DataFrame({"x_mi": [region.anchor[0]], "y_mi": [region.anchor[1]], "weight": [1.0]}).to_csv(
        out_dir / "anchor.csv", index=False
    )
    paths["anchor"] = "anchor.csv"
    return paths


# ---------------------------------------------------------------------------
# households


def _location_weights(grid: HexGrid, centers: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return np.full(grid.n_cells, 1.0 / grid.n_cells)
    d = np.min(
        np.hypot(
            grid.centroids[:, None, 0] - centers[None, :, 0],
            grid.centroids[:, None, 1] - centers[None, :, 1],
        ),
        axis=1,
    )
    w = np.exp(-d / 6.0) + 0.15
    return w / w.sum()


def _weighted_residual(target: np.ndarray, Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Residual of ``target`` after weighted projection on ``[1, Z]``."""
    A = np.column_stack([np.ones(len(target)), Z])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], target * sw, rcond=None)
    return target - A @ coef


def _standardize(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = float(w @ v)
    sd = math.sqrt(float(w @ (v - m) ** 2))
    return (v - m) / sd if sd > 0 else np.zeros_like(v)


def _tune_intercept(base: np.ndarray, target: float, n_iter: int = 200) -> float:
    """Intercept ``b0`` with ``mean(base + b0 <= 0)`` as close to ``target`` as possible.

    Bisection brackets the step of the censoring-share function; the result
    is then moved to the midpoint between the neighbouring order statistics
    so no latent value sits within rounding of the censor point.
    """
    n = len(base)
    if n == 0:
        return 0.0
    lo = -float(base.max()) - 1.0
    hi = -float(base.min()) + 1.0
    # share(b0) falls from 1 at lo to 0 at hi
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        if np.mean(base + mid <= 0) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    k = int(np.sum(base + hi <= 0))
    srt = np.sort(base)
    if 0 < k < n:
        return float(-0.5 * (srt[k - 1] + srt[k]))
    return hi


@dataclass
class HouseholdDraw:
    data: pd.DataFrame
    truth: dict


def gen_households(
    cfg: SynthConfig,
    grid: HexGrid,
    access: Mapping[str, AccessVector | np.ndarray],
    region: Region | None = None,
    tolerance: float = 0.01,
) -> HouseholdDraw:
    """Draw households and their censored VMT.

    Latent VMT is ``b0 + acc'b1 + X'b2 + lambda * u + eps`` with
    ``eps ~ N(0, sigma^2)``; observed VMT is ``max(0, latent)``. ``u`` is a
    cell-level unobservable: a share ``confound_share`` of it is the part of
    residential job access not explained by the instrument columns (so it is
    correlated with access but orthogonal to the instruments), the rest is
    independent noise. ``b0`` is tuned by bisection so that the censoring
    share is within ``tolerance`` of ``censor_target``.
    """
    cfg.validate()
    vecs = {k: np.asarray(v.values if isinstance(v, AccessVector) else v, dtype=float) for k, v in access.items()}
    for name in list(cfg.access_betas) + [c for c in cfg.instrument_columns if c in vecs]:
        if name not in vecs:
            raise ConfigError(f"access vector {name!r} was not supplied")
        if len(vecs[name]) != grid.n_cells:
            raise ConfigError(f"access vector {name!r} does not match the grid")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    centers = region.cluster_centers if region is not None else np.zeros((0, 2))
    loc_w = _location_weights(grid, centers)
    n = cfg.n_households

    # cell-level confounder, orthogonal to the instruments under loc_w
    Zc = np.column_stack([vecs[c] for c in cfg.instrument_columns if c in vecs]) if any(
        c in vecs for c in cfg.instrument_columns
    ) else np.zeros((grid.n_cells, 0))
    resid = np.zeros(grid.n_cells)
    for name in cfg.access_betas:
        resid += _standardize(_weighted_residual(vecs[name], Zc, loc_w), loc_w)
    resid = _standardize(resid, loc_w)
    noise = _standardize(_weighted_residual(rng.normal(size=grid.n_cells), Zc, loc_w), loc_w)
    rho = cfg.confound_share
    u_cell = rho * resid + math.sqrt(1.0 - rho * rho) * noise

    cell = rng.choice(grid.n_cells, size=n, p=loc_w)
    vehicles = np.minimum(rng.poisson(1.85, n), 8)
    income = 1 + rng.choice(10, size=n, p=np.array(INCOME_SHARES) / sum(INCOME_SHARES))
    hh_size = np.minimum(1 + rng.poisson(1.66, n), 8)
    s2 = math.log(1.0 + (8.07 / 8.52) ** 2)
    density = rng.lognormal(math.log(8.52) - 0.5 * s2, math.sqrt(s2), n)
    eps = rng.normal(0.0, cfg.sigma, n)

    df = pd.DataFrame(
        {
            "hh_id": np.arange(1, n + 1),
            "vehicles": vehicles,
            "income_cat": income,
            "hh_size": hh_size,
            "tract_density": density,
            "cell_q": grid.cells[cell, 0],
            "cell_r": grid.cells[cell, 1],
        }
    )
    lin = np.zeros(n)
    for name, b in cfg.access_betas.items():
        lin += b * vecs[name][cell]
    for name, b in cfg.control_betas.items():
        if name.startswith("income_"):
            lin += b * (income == int(name.split("_")[1]))
        else:
            lin += b * df[name].to_numpy(float)
    base = lin + cfg.endogeneity * u_cell[cell] + eps
    b0 = _tune_intercept(base, cfg.censor_target)
    latent = base + b0
    share = float(np.mean(latent <= 0))
    if n and abs(share - cfg.censor_target) > tolerance:
        raise ConfigError(
            f"censoring target {cfg.censor_target} unattainable (closest share {share:.4f})"
        )
    df.insert(1, "vmt", np.maximum(latent, 0.0))

    if len(centers):
        dist = np.hypot(*(grid.centroids[cell] - centers[0]).T)
        radius = np.quantile(dist, cfg.urban_core_share) if n else 0.0
        df["urban_core"] = (dist <= radius).astype(int)
    else:
        df["urban_core"] = 1

    truth = {
        "intercept": b0,
        "access_betas": dict(cfg.access_betas),
        "control_betas": dict(cfg.control_betas),
        "sigma": cfg.sigma,
        "endogeneity": cfg.endogeneity,
        "confound_share": cfg.confound_share,
        "censor_target": cfg.censor_target,
        "censored_share": share,
        "seed": cfg.seed,
        "n_households": n,
    }
    return HouseholdDraw(df, truth)


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["bbox"] = list(cfg.bbox)
    d["cluster_jobs"] = list(cfg.cluster_jobs) if not np.isscalar(cfg.cluster_jobs) else cfg.cluster_jobs
    d["instrument_columns"] = list(cfg.instrument_columns)
    return d


def write_truth(truth: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
