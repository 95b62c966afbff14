"""Exposure mappings: per-quarter channel shares, histories, slices, trimming.

Three channels summarize neighbors' treatment status for a cell (i, k):

same_industry_neighbor      W-weighted share of neighboring municipalities
                            whose industry-k cell is treated.
within_muni_cross_industry  unweighted share of the other industries in
                            municipality i that are treated.
neighbor_all_industries     W-weighted average over neighbors j of the share
                            of j's industries treated (including k).

Each channel has an absorbing any-since-adoption form and an early form
restricted to event times 0 <= l <= 4. Slice sums S add the per-period
any-shares over an event-time window [a, b]; the slice average
S_bar = S / L_s feeds the two-sided epsilon trimming rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError
from .spatial import WeightsMatrix

__all__ = [
    "CHANNELS",
    "EARLY_WINDOW",
    "N_LAGS",
    "DEFAULT_SLICES",
    "DEFAULT_EPSILON",
    "SliceSummary",
    "ExposurePanel",
    "compute_exposure",
    "same_industry_exposure",
    "cross_industry_exposure",
    "neighbor_all_exposure",
    "slice_summaries",
    "build_slice_table",
    "overlap_report",
]

CHANNELS = (
    "same_industry_neighbor",
    "within_muni_cross_industry",
    "neighbor_all_industries",
)
#: short aliases used in estimator parameter names
CHANNEL_ALIASES = {"same": CHANNELS[0], "cross": CHANNELS[1], "nall": CHANNELS[2]}

EARLY_WINDOW = 4  # early post-entry window is 0 <= l <= EARLY_WINDOW
N_LAGS = 4
DEFAULT_SLICES = ((0, 4), (5, 8), (9, 16), (0, 16))
DEFAULT_EPSILON = 0.02
HIST_BINS = 101  # equal bins on [0, 1] for overlap distributions


def slice_label(slice_: tuple[int, int]) -> str:
    return f"{slice_[0]}-{slice_[1]}"


@dataclass
class SliceSummary:
    """Slice sum, average, and trim decision for one (cell, channel, slice)."""

    S: float
    S_bar: float
    keep: bool
    excluded: bool = False
    reason: str | None = None


def slice_summaries(
    values: np.ndarray,
    slice_: tuple[int, int],
    eps: float = DEFAULT_EPSILON,
    balanced: bool = True,
) -> SliceSummary:
    """Summarize per-period exposures over an event-time slice.

    ``values`` holds E(l) for l = a..b in order (NaN = unobserved). In
    balanced mode incomplete coverage excludes the record with a reason
    code; otherwise the sum runs over the available subset. S_bar is
    S / L_s exactly and keep is eps <= S_bar <= 1 - eps.
    """
    a, b = slice_
    L = b - a + 1
    vals = np.asarray(values, dtype=float)
    if vals.size != L:
        raise ValidationError(f"expected {L} values for slice [{a},{b}], got {vals.size}")
    observed = ~np.isnan(vals)
    if not observed.all():
        if balanced:
            return SliceSummary(
                S=np.nan, S_bar=np.nan, keep=False, excluded=True,
                reason="incomplete_window",
            )
        if not observed.any():
            return SliceSummary(
                S=np.nan, S_bar=np.nan, keep=False, excluded=True,
                reason="no_observed_periods",
            )
    S = float(np.nansum(vals))
    s_bar = S / L
    keep = bool(eps <= s_bar <= 1.0 - eps)
    return SliceSummary(S=S, S_bar=s_bar, keep=keep)


@dataclass
class ExposurePanel:
    """Vectorized per-cell exposure series for all channels and flavors.

    Arrays are (n_cells, T) aligned to ``cells`` rows; column t-1 holds
    quarter t. ``any_`` is the absorbing share, ``early`` the
    0 <= l <= 4 window share.
    """

    cells: pd.DataFrame  # geoid, naics, muni_idx, single_industry
    any_: dict[str, np.ndarray]
    early: dict[str, np.ndarray]
    T: int

    def cell_index(self) -> pd.Index:
        return pd.MultiIndex.from_frame(self.cells[["geoid", "naics"]])

    def series(self, channel: str, flavor: str = "any") -> np.ndarray:
        store = self.any_ if flavor == "any" else self.early
        return store[channel]

    def anchored_sums(
        self, channel: str, anchor: int, slice_: tuple[int, int]
    ) -> np.ndarray:
        """Slice sums over calendar window [anchor+a, anchor+b] for all cells.

        Returns NaN when the window leaves the sample.
        """
        a, b = slice_
        lo, hi = anchor + a, anchor + b
        if lo < 1 or hi > self.T:
            return np.full(len(self.cells), np.nan)
        return self.any_[channel][:, lo - 1 : hi].sum(axis=1)

    def trailing_sums(self, channel: str, slice_: tuple[int, int]) -> np.ndarray:
        """Per-quarter slice dose for all cells.

        Column t-1 holds sum over event ages l in [a, b] of the
        absorbing share at calendar quarter t - l, with pre-sample
        quarters treated as unexposed, so every entry lies in
        [0, L_s]. The value at t = g + a + b equals the anchored
        window sum over calendar quarters [g + a, g + b].
        """
        a, b = slice_
        if a < 0:
            raise ValidationError(f"trailing sums need a >= 0, got slice {slice_}")
        arr = self.any_[channel]
        out = np.zeros_like(arr)
        for lag in range(a, b + 1):
            if lag == 0:
                out += arr
            elif lag < self.T:
                out[:, lag:] += arr[:, :-lag]
        return out

    def histories(self, anchor: int, flavor: str = "any") -> np.ndarray:
        """Exposure-history features at an anchor quarter.

        Per channel: the share at the anchor plus its N_LAGS lags, with
        pre-sample lags equal to 0. Shape (n_cells, 3 * (N_LAGS + 1)).
        """
        if flavor not in ("any", "last4"):
            raise ValidationError(f"unknown history flavor: {flavor}")
        store = self.any_ if flavor == "any" else self.early
        cols = []
        for channel in CHANNELS:
            arr = store[channel]
            for lag in range(N_LAGS + 1):
                t = anchor - lag
                if t >= 1:
                    cols.append(arr[:, t - 1])
                else:
                    cols.append(np.zeros(arr.shape[0]))
        return np.column_stack(cols)

    def to_long(self) -> pd.DataFrame:
        """Long-format exposure table with lag columns (exposure_long.csv)."""
        n = len(self.cells)
        frames = []
        for channel in CHANNELS:
            base = pd.DataFrame({
                "geoid": np.repeat(self.cells["geoid"].to_numpy(), self.T),
                "naics": np.repeat(self.cells["naics"].to_numpy(), self.T),
                "t": np.tile(np.arange(1, self.T + 1), n),
                "channel": channel,
            })
            for flavor, store in (("any", self.any_), ("early", self.early)):
                arr = store[channel]
                base[f"share_{flavor}"] = arr.ravel()
                for lag in range(1, N_LAGS + 1):
                    lagged = np.zeros_like(arr)
                    lagged[:, lag:] = arr[:, :-lag]
                    base[f"share_{flavor}_lag{lag}"] = lagged.ravel()
            frames.append(base)
        out = pd.concat(frames, ignore_index=True)
        return out.rename(columns={"share_last4": "share_early"})


def _treatment_matrices(
    cells: pd.DataFrame, cohorts: pd.DataFrame, munis: list[str], T: int
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], np.ndarray]:
    """Per-industry (n_munis, T) treatment indicators, any and early."""
    muni_pos = {m: i for i, m in enumerate(munis)}
    g_map = {
        (r.geoid, r.naics): r.g
        for r in cohorts.itertuples()
        if pd.notna(r.g)
    }
    t_grid = np.arange(1, T + 1)
    a_any: dict[str, np.ndarray] = {}
    a_early: dict[str, np.ndarray] = {}
    industries = sorted(cells["naics"].unique())
    present = np.zeros((len(munis), len(industries)))
    for k_pos, k in enumerate(industries):
        any_mat = np.zeros((len(munis), T))
        early_mat = np.zeros((len(munis), T))
        sub = cells.loc[cells["naics"] == k, "geoid"]
        for geoid in sub:
            i = muni_pos[geoid]
            present[i, k_pos] = 1.0
            g = g_map.get((geoid, k))
            if g is not None and not pd.isna(g):
                ell = t_grid - int(g)
                any_mat[i] = (ell >= 0).astype(float)
                early_mat[i] = ((ell >= 0) & (ell <= EARLY_WINDOW)).astype(float)
        a_any[k] = any_mat
        a_early[k] = early_mat
    return a_any, a_early, present


def compute_exposure(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    weights: WeightsMatrix,
    T: int | None = None,
) -> ExposurePanel:
    """Build all channel exposure series for every cell in the panel."""
    if T is None:
        T = int(panel["t"].max())
    cells = panel[["geoid", "naics"]].drop_duplicates().sort_values(
        ["geoid", "naics"], ignore_index=True
    )
    unknown = set(cells["geoid"]) - set(weights.nodes)
    if unknown:
        raise ValidationError(
            f"panel geoids missing from the weights matrix: {sorted(unknown)[:5]}"
        )
    munis = list(weights.nodes)
    muni_pos = {m: i for i, m in enumerate(munis)}
    industries = sorted(cells["naics"].unique())
    k_pos = {k: i for i, k in enumerate(industries)}
    a_any, a_early, present = _treatment_matrices(cells, cohorts, munis, T)
    n_ind = present.sum(axis=1)  # industries present per municipality

    cells["muni_idx"] = cells["geoid"].map(muni_pos)
    cells["single_industry"] = cells["muni_idx"].map(
        lambda i: bool(n_ind[i] <= 1)
    )
    W = weights.w
    n_cells = len(cells)
    any_out = {c: np.zeros((n_cells, T)) for c in CHANNELS}
    early_out = {c: np.zeros((n_cells, T)) for c in CHANNELS}

    for flavor, mats, out in (("any", a_any, any_out), ("early", a_early, early_out)):
        tot = np.zeros((len(munis), T))
        for k in industries:
            tot += mats[k]
        denom_all = np.where(n_ind > 0, n_ind, 1.0)
        muni_share = tot / denom_all[:, None]
        nall_by_muni = W @ muni_share
        same_by_ind = {k: W @ mats[k] for k in industries}
        denom_cross = np.where(n_ind > 1, n_ind - 1.0, 1.0)
        for c_idx, row in enumerate(cells.itertuples()):
            i, k = row.muni_idx, row.naics
            out[CHANNELS[0]][c_idx] = same_by_ind[k][i]
            if n_ind[i] > 1:
                out[CHANNELS[1]][c_idx] = (tot[i] - mats[k][i]) / denom_cross[i]
            out[CHANNELS[2]][c_idx] = nall_by_muni[i]
    return ExposurePanel(cells=cells, any_=any_out, early=early_out, T=T)


def _point(exposure: ExposurePanel, geoid: str, naics: str, t: int, channel: str,
           flavor: str) -> float:
    mask = (exposure.cells["geoid"] == geoid) & (exposure.cells["naics"] == naics)
    idx = np.flatnonzero(mask.to_numpy())
    if idx.size == 0:
        raise ValidationError(f"cell ({geoid}, {naics}) not in the panel")
    return float(exposure.series(channel, flavor)[idx[0], t - 1])


def same_industry_exposure(
    exposure: ExposurePanel, geoid: str, naics: str, t: int, flavor: str = "any"
) -> float:
    """W-weighted share of same-industry neighbors treated by t."""
    return _point(exposure, geoid, naics, t, CHANNELS[0], flavor)


def cross_industry_exposure(
    exposure: ExposurePanel, geoid: str, naics: str, t: int, flavor: str = "any"
) -> float:
    """Share of the municipality's other industries treated by t.

    Defined as 0 for single-industry municipalities (degenerate; see the
    ``single_industry`` flag on the cell table).
    """
    return _point(exposure, geoid, naics, t, CHANNELS[1], flavor)


def neighbor_all_exposure(
    exposure: ExposurePanel, geoid: str, naics: str, t: int, flavor: str = "any"
) -> float:
    """W-weighted average of neighbors' all-industry treated shares."""
    return _point(exposure, geoid, naics, t, CHANNELS[2], flavor)


def build_slice_table(
    exposure: ExposurePanel,
    cohorts: pd.DataFrame,
    slices: tuple[tuple[int, int], ...] = DEFAULT_SLICES,
    eps: float = DEFAULT_EPSILON,
    balanced: bool = True,
) -> pd.DataFrame:
    """Canonical per-treated-cell slice records (exposure_slices.csv).

    Event-time windows are anchored at each treated cell's own cohort g.
    """
    treated = cohorts.loc[cohorts["g"].notna(), ["geoid", "naics", "g"]]
    cell_lookup = {
        (r.geoid, r.naics): i for i, r in enumerate(exposure.cells.itertuples())
    }
    rows = []
    for rec in treated.itertuples():
        c_idx = cell_lookup.get((rec.geoid, rec.naics))
        if c_idx is None:
            continue
        g = int(rec.g)
        for channel in CHANNELS:
            arr = exposure.any_[channel][c_idx]
            for slc in slices:
                a, b = slc
                lo, hi = g + a, g + b
                window = np.full(b - a + 1, np.nan)
                lo_clip, hi_clip = max(lo, 1), min(hi, exposure.T)
                if lo_clip <= hi_clip:
                    window[lo_clip - lo : hi_clip - lo + 1] = arr[lo_clip - 1 : hi_clip]
                summ = slice_summaries(window, slc, eps=eps, balanced=balanced)
                rows.append((
                    rec.geoid, rec.naics, channel, slice_label(slc),
                    summ.S, summ.S_bar, int(summ.keep), summ.reason,
                ))
    return pd.DataFrame(
        rows,
        columns=["geoid", "naics", "channel", "slice", "S", "S_bar", "keep", "reason"],
    )


def overlap_report(slice_table: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Trimming coverage per channel and slice, plus S_bar distributions.

    Returns (summary, distributions): the summary has raw and kept counts,
    percent trimmed, and distinct municipalities retained; the
    distributions carry histogram counts over HIST_BINS equal bins on
    [0, 1] and the ECDF at the right bin edges.
    """
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    summaries, dists = [], []
    for (channel, slc), grp in slice_table.groupby(["channel", "slice"], sort=True):
        valid = grp.loc[grp["S_bar"].notna()]
        raw = len(valid)
        kept = int(valid["keep"].sum())
        pct_trimmed = 100.0 * (raw - kept) / raw if raw else np.nan
        munis_kept = valid.loc[valid["keep"] == 1, "geoid"].nunique()
        summaries.append((slc, channel, raw, kept, pct_trimmed, munis_kept))
        sbar = valid["S_bar"].to_numpy(dtype=float)
        hist, _ = np.histogram(sbar, bins=edges)
        ecdf = (
            np.searchsorted(np.sort(sbar), edges[1:], side="right") / raw
            if raw else np.full(HIST_BINS, np.nan)
        )
        dists.append(pd.DataFrame({
            "channel": channel,
            "slice": slc,
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "count": hist,
            "ecdf": ecdf,
        }))
    summary = pd.DataFrame(
        summaries,
        columns=["slice", "channel", "raw", "kept", "pct_trimmed", "munis_kept"],
    )
    distributions = (
        pd.concat(dists, ignore_index=True) if dists
        else pd.DataFrame(columns=["channel", "slice", "bin_lo", "bin_hi", "count", "ecdf"])
    )
    return summary, distributions
