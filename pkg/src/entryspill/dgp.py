"""Synthetic panel generator with known ground truth.

Outcomes follow

    y_ikt = alpha_ik + lambda_t + direct_k * 1{l >= 0} + ant(l)
            + sum_ch satt_ch * E_ch(i,k,t) + eps_ikt

in log space; employment is exp(y), so the log employment outcome
recovers y exactly. Exposures E_ch are computed with the exposure
module itself, so the estimand and the generator agree by construction.
Establishment series are built to fire the configured trigger patterns
exactly at the scheduled quarters, and the never-treated series are
constant and can never fire a trigger.

The default geometry is a 10-column grid of pseudo-municipalities with
10 km spacing, truncated to ``n_munis``, with rook adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .errors import ValidationError
from .events import BALANCED_HORIZON, T1_LOOKBACK, Trigger
from .exposure import CHANNELS, ExposurePanel, compute_exposure
from .panel import PRE_PERIOD_END, TRADABLE_SECTORS, quarter_label
from .spatial import SpatialGraph, WeightsMatrix, build_weights

__all__ = [
    "PlannedEvent",
    "DgpConfig",
    "SimulatedData",
    "simulate",
    "spatial_noise",
    "grid_graph",
]

# balanced mixes of tradable and non-tradable sector codes
_TRADABLE_POOL = (
    "1121", "2111", "3121", "3231", "3311", "4231",
    "4811", "4911", "5112", "5211", "5411", "5511",
)
_NONTRADABLE_POOL = (
    "2361", "4411", "4511", "5311", "5611", "6111",
    "6211", "7111", "7211", "8111",
)


class PlannedEvent(NamedTuple):
    geoid: str
    naics: str
    g: int
    trigger: Trigger


@dataclass
class DgpConfig:
    """Complete specification of one synthetic panel draw."""

    n_munis: int = 78
    n_industries: int = 12
    n_quarters: int = 45
    start: tuple[int, int] = (2014, 1)
    events: list[PlannedEvent] = field(default_factory=list)
    n_random_events: int = 0
    random_g_range: tuple[int, int] = (12, 24)
    random_trigger: Trigger = Trigger.SMALL_TO_LARGE
    direct: float = 0.0
    direct_by_industry: dict[str, float] | None = None
    satt: dict[str, float] = field(default_factory=dict)  # keys same/cross/nall
    anticipation: dict[int, float] | None = None
    noise_sd: float = 0.0
    spatial_range_km: float = 0.0
    unit_sd: float = 0.5
    time_sd: float = 0.2
    base_level: float = 4.0
    spacing_km: float = 10.0
    grid_cols: int = 10
    knn_k: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_munis, self.n_industries, self.n_quarters) <= 0:
            raise ValidationError("all panel dimensions must be positive")
        if self.noise_sd < 0:
            raise ValidationError("noise sd must be nonnegative")
        if self.n_industries > len(_TRADABLE_POOL) + len(_NONTRADABLE_POOL):
            raise ValidationError(
                f"at most {len(_TRADABLE_POOL) + len(_NONTRADABLE_POOL)} industries supported"
            )

    def industries(self) -> list[str]:
        pool = []
        for a, b in zip(_TRADABLE_POOL, _NONTRADABLE_POOL):
            pool.extend([a, b])
        pool.extend(_TRADABLE_POOL[len(_NONTRADABLE_POOL):])
        return pool[: self.n_industries]

    def geoids(self) -> list[str]:
        return ["72" + str(i + 1).zfill(3) for i in range(self.n_munis)]


@dataclass
class SimulatedData:
    """Simulation output: raw inputs, built panel, and ground truth."""

    config: DgpConfig
    graph: SpatialGraph
    weights: WeightsMatrix
    metro_map: dict[str, str]
    raw_employment: pd.DataFrame
    cpi_monthly: pd.DataFrame
    panel: pd.DataFrame
    cohorts: pd.DataFrame
    strata: pd.DataFrame
    exposure: ExposurePanel
    truth: pd.DataFrame
    flags: list[str] = field(default_factory=list)


def grid_graph(n_munis: int, spacing_km: float = 10.0, cols: int = 10) -> SpatialGraph:
    """Rook-adjacent grid of pseudo-municipalities, truncated to n_munis."""
    geoids = ["72" + str(i + 1).zfill(3) for i in range(n_munis)]
    centroids = {}
    edges = []
    for i, gid in enumerate(geoids):
        r, c = divmod(i, cols)
        centroids[gid] = (c * spacing_km * 1000.0, r * spacing_km * 1000.0)
        if c > 0:
            edges.append((geoids[i - 1], gid))
        if r > 0 and i - cols >= 0:
            edges.append((geoids[i - cols], gid))
    return SpatialGraph(nodes=geoids, edges=edges, centroids=centroids)


def spatial_noise(
    centroids: np.ndarray,
    range_km: float,
    sd: float,
    seed: int,
    size: int = 1,
) -> tuple[np.ndarray, bool]:
    """Gaussian draws with covariance sd^2 exp(-d/range_km) over locations.

    range_km = 0 gives i.i.d. draws. Returns (draws of shape (size, n),
    jitter_repaired flag); a non-positive-definite covariance is repaired
    by adding 1e-10 to the diagonal.
    """
    if range_km < 0:
        raise ValidationError(f"range_km must be >= 0, got {range_km}")
    rng = np.random.default_rng(seed)
    pts = np.asarray(centroids, dtype=float)
    n = pts.shape[0]
    z = rng.standard_normal((size, n))
    if range_km == 0 or sd == 0:
        return sd * z, False
    diff = pts[:, None, :] - pts[None, :, :]
    d_km = np.sqrt((diff**2).sum(axis=2)) / 1000.0
    C = sd**2 * np.exp(-d_km / range_km)
    repaired = False
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        C = C + 1e-10 * np.eye(n)
        L = np.linalg.cholesky(C)
        repaired = True
    return z @ L.T, repaired


def _plan_events(config: DgpConfig, rng: np.random.Generator) -> list[PlannedEvent]:
    events = list(config.events)
    if config.n_random_events:
        cells = [
            (gid, k)
            for gid in config.geoids()
            for k in config.industries()
        ]
        taken = {(e.geoid, e.naics) for e in events}
        free = [c for c in cells if c not in taken]
        if config.n_random_events > len(free):
            raise ValidationError("more random events requested than free cells")
        pick = rng.choice(len(free), size=config.n_random_events, replace=False)
        lo, hi = config.random_g_range
        gs = rng.integers(lo, hi + 1, size=config.n_random_events)
        for j, p in enumerate(pick):
            gid, k = free[p]
            events.append(PlannedEvent(gid, k, int(gs[j]), config.random_trigger))
    return events


def _pre_period_end_t(config: DgpConfig) -> int:
    y0, q0 = config.start
    return (PRE_PERIOD_END[0] - y0) * 4 + (PRE_PERIOD_END[1] - q0) + 1


def _establishments(config: DgpConfig, events: list[PlannedEvent]) -> np.ndarray:
    """Per-cell establishment paths that fire exactly the planned triggers."""
    T = config.n_quarters
    geoids, industries = config.geoids(), config.industries()
    gi = {g: i for i, g in enumerate(geoids)}
    ki = {k: j for j, k in enumerate(industries)}
    est = np.full((len(geoids), len(industries), T), 2.0)
    pre_end = _pre_period_end_t(config)
    for ev in events:
        if ev.geoid not in gi or ev.naics not in ki:
            raise ValidationError(f"planned event outside the panel: {ev}")
        if ev.g + 1 > T:
            raise ValidationError(
                f"event at g={ev.g} needs quarter g+1 <= {T}: {ev}"
            )
        path = est[gi[ev.geoid], ki[ev.naics]]
        if ev.trigger == Trigger.NEW_ENTRY:
            if ev.g <= T1_LOOKBACK:
                raise ValidationError(
                    f"new-entry trigger needs {T1_LOOKBACK} leading zero "
                    f"quarters; g={ev.g} is too early: {ev}"
                )
            path[:] = 0.0
            path[ev.g - 1 :] = 1.0
        elif ev.trigger == Trigger.SMALL_TO_LARGE:
            if ev.g < 2:
                raise ValidationError(f"step trigger needs g >= 2: {ev}")
            path[:] = 1.0
            path[ev.g - 1 :] = 2.0
        elif ev.trigger == Trigger.TOP_DECILE_JUMP:
            if ev.g <= pre_end + 1:
                raise ValidationError(
                    f"jump trigger must fire after the threshold pre-period "
                    f"(g > {pre_end + 1}): {ev}"
                )
            path[:] = 3.0
            path[ev.g - 1 :] = 5.0
        else:
            raise ValidationError(f"unknown trigger: {ev.trigger}")
    return est


def simulate(config: DgpConfig) -> SimulatedData:
    """Draw one synthetic panel with full ground-truth bookkeeping."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    geoids, industries = config.geoids(), config.industries()
    T = config.n_quarters
    graph = grid_graph(config.n_munis, config.spacing_km, config.grid_cols)
    weights = build_weights(graph, k=config.knn_k)
    events = _plan_events(config, rng)
    seen = {}
    for ev in events:
        if (ev.geoid, ev.naics) in seen:
            raise ValidationError(f"duplicate event for cell {(ev.geoid, ev.naics)}")
        seen[(ev.geoid, ev.naics)] = ev

    cells = pd.DataFrame(
        [(g, k) for g in geoids for k in industries], columns=["geoid", "naics"]
    ).sort_values(["geoid", "naics"], ignore_index=True)
    g_of = {(e.geoid, e.naics): e.g for e in events}
    trig_of = {(e.geoid, e.naics): e.trigger.value for e in events}
    cohorts = cells.copy()
    cohorts["g"] = [
        g_of.get((r.geoid, r.naics), np.nan) for r in cells.itertuples()
    ]
    cohorts["trigger"] = [
        trig_of.get((r.geoid, r.naics)) for r in cells.itertuples()
    ]
    lo_h, hi_h = BALANCED_HORIZON
    cohorts["balanced_window"] = np.where(
        cohorts["g"].isna(), 1,
        ((cohorts["g"] + lo_h >= 1) & (cohorts["g"] + hi_h <= T)).astype(int),
    )

    exposure = compute_exposure(
        cells.assign(t=1), cohorts, weights, T=T
    )

    n_cells = len(cells)
    alpha = config.base_level + config.unit_sd * rng.standard_normal(n_cells)
    lam = config.time_sd * rng.standard_normal(T)
    flags: list[str] = []

    if config.noise_sd > 0 and config.spatial_range_km > 0:
        coords = graph.coords()
        eps_muni = np.zeros((config.n_munis, T))
        draws, repaired = spatial_noise(
            coords, config.spatial_range_km, config.noise_sd,
            seed=int(rng.integers(0, 2**31)), size=T,
        )
        if repaired:
            flags.append("jitter_repaired_spatial_noise_covariance")
        eps_muni = draws.T  # (n_munis, T)
        muni_pos = {g: i for i, g in enumerate(geoids)}
        eps = np.vstack([
            eps_muni[muni_pos[r.geoid]] for r in cells.itertuples()
        ])
    elif config.noise_sd > 0:
        eps = config.noise_sd * rng.standard_normal((n_cells, T))
    else:
        eps = np.zeros((n_cells, T))

    t_grid = np.arange(1, T + 1)
    direct_comp = np.zeros((n_cells, T))
    ant_comp = np.zeros((n_cells, T))
    for c_idx, row in enumerate(cells.itertuples()):
        g = g_of.get((row.geoid, row.naics))
        if g is None:
            continue
        ell = t_grid - g
        d = config.direct
        if config.direct_by_industry is not None:
            d = config.direct_by_industry.get(row.naics, config.direct)
        direct_comp[c_idx] = d * (ell >= 0)
        if config.anticipation:
            for lead, effect in config.anticipation.items():
                ant_comp[c_idx] += effect * (ell == lead)

    spill = {ch: np.zeros((n_cells, T)) for ch in ("same", "cross", "nall")}
    short = dict(zip(("same", "cross", "nall"), CHANNELS))
    for name, chan in short.items():
        coef = config.satt.get(name, 0.0)
        if coef:
            spill[name] = coef * exposure.any_[chan]

    y0 = alpha[:, None] + lam[None, :]
    y = y0 + direct_comp + ant_comp + sum(spill.values()) + eps

    est = _establishments(config, events)
    ki = {k: j for j, k in enumerate(industries)}
    gi = {g: i for i, g in enumerate(geoids)}
    wage_levels = {
        k: (26000.0 if j % 2 == 0 else 18000.0) for j, k in enumerate(industries)
    }
    wage_eps = config.noise_sd * rng.standard_normal((n_cells, T))

    y0_year, y0_q = config.start
    years = [y0_year + (y0_q - 1 + t) // 4 for t in range(T)]
    quarters = [(y0_q - 1 + t) % 4 + 1 for t in range(T)]

    recs = []
    truth_recs = []
    for c_idx, row in enumerate(cells.itertuples()):
        emp = np.exp(y[c_idx])
        wages = emp * wage_levels[row.naics] * np.exp(wage_eps[c_idx])
        path = est[gi[row.geoid], ki[row.naics]]
        for t in range(T):
            recs.append((
                row.geoid, row.naics, f"Industry {row.naics}",
                years[t], quarters[t],
                path[t], emp[t], wages[t],
            ))
            truth_recs.append((
                row.geoid, row.naics, t + 1, y0[c_idx, t],
                direct_comp[c_idx, t], ant_comp[c_idx, t],
                spill["same"][c_idx, t], spill["cross"][c_idx, t],
                spill["nall"][c_idx, t], eps[c_idx, t], y[c_idx, t],
            ))
    raw = pd.DataFrame(recs, columns=[
        "geoid_raw", "naics", "industry_name", "year", "quarter",
        "establishments", "covered_emp", "total_wages",
    ])
    truth = pd.DataFrame(truth_recs, columns=[
        "geoid", "naics", "t", "y0", "direct", "anticipation",
        "spill_same", "spill_cross", "spill_nall", "noise", "y",
    ])

    months = []
    for yr in sorted(set(years)):
        for m in range(1, 13):
            months.append((yr, m, 100.0))
    cpi = pd.DataFrame(months, columns=["year", "month", "value"])

    metro_map = {
        g: ("metro" if i % 2 == 0 else "nonmetro") for i, g in enumerate(geoids)
    }

    panel = truth[["geoid", "naics", "t"]].copy()
    panel["log_covered_emp"] = truth["y"].to_numpy()
    panel["covered_emp"] = np.exp(truth["y"].to_numpy())
    panel["establishments"] = [
        est[gi[r.geoid], ki[r.naics], r.t - 1] for r in panel.itertuples()
    ]
    wl = panel["naics"].map(wage_levels).to_numpy()
    # CPI is flat at 100, so the real wage bill equals the nominal one
    panel["log_total_wages_real_2020"] = (
        truth["y"].to_numpy() + np.log(wl) + wage_eps.reshape(-1)
    )
    panel["label"] = [
        quarter_label(years[t - 1], quarters[t - 1]) for t in panel["t"]
    ]

    cutoff = float(np.median(sorted(wage_levels.values())))
    strata = cells.copy()
    strata["tradable"] = strata["naics"].str[:2].isin(TRADABLE_SECTORS)
    strata["metro"] = strata["geoid"].map(metro_map)
    strata["wage"] = [
        "high" if wage_levels[k] >= cutoff else "low" for k in strata["naics"]
    ]

    return SimulatedData(
        config=config, graph=graph, weights=weights, metro_map=metro_map,
        raw_employment=raw, cpi_monthly=cpi, panel=panel, cohorts=cohorts,
        strata=strata, exposure=exposure, truth=truth, flags=flags,
    )
