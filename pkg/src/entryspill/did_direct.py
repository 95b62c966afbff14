"""Staggered event-study estimators for direct entry effects.

Two estimation paths share one event-time grid and one banding
convention. The group-time path builds long differences against a
pre-anticipation base period and contrasts treated cohorts with
never-treated plus not-yet-treated cells of the same industry. The
imputation path fits unit and quarter effects on untreated observations
only, then averages observed-minus-fitted outcomes over treated cells.

Inference clusters at the municipality level throughout: a Rademacher
multiplier bootstrap on influence sums for the group-time path, and a
municipality cluster bootstrap with refitting for the imputation path.
Uniform sup-t bands cover the post-entry horizons together with the
pre-anticipation leads; anticipation periods and the reference lead are
reported but never enter the band calibration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import NumericalError, ValidationError
from .events import BALANCED_HORIZON
from .exposure import DEFAULT_SLICES, slice_label

__all__ = [
    "DEFAULT_ANTICIPATION",
    "EventStudyResult",
    "cs_event_study",
    "bjs_event_study",
    "sa_iw_event_study",
    "two_way_fit",
    "connected_components",
]

DEFAULT_ANTICIPATION = 2
MAX_TWFE_ITER = 5000


@dataclass
class EventStudyResult:
    """Event-study path with uniform band and cumulative slice effects."""

    outcome: str
    estimator: str
    ells: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    in_band_set: np.ndarray
    crit: float
    alpha: float
    ref: int
    n_treated: np.ndarray
    cumulative: pd.DataFrame
    warnings: list[str] = field(default_factory=list)
    path_cov: np.ndarray | None = field(default=None, repr=False)

    def event_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "outcome": self.outcome,
            "estimator": self.estimator,
            "ell": self.ells,
            "estimate": self.estimate,
            "se": self.se,
            "band_lo": self.band_lo,
            "band_hi": self.band_hi,
            "in_band_set": self.in_band_set.astype(int),
            "n_treated": self.n_treated,
        })


def _wide_outcome(
    panel: pd.DataFrame, cohorts: pd.DataFrame, outcome: str
) -> tuple[pd.DataFrame, np.ndarray, int]:
    """Pivot one outcome to a (cell x quarter) matrix with cohort metadata."""
    if outcome not in panel.columns:
        raise ValidationError(f"outcome column not in panel: {outcome}")
    T = int(panel["t"].max())
    wide = panel.pivot(index=["naics", "geoid"], columns="t", values=outcome)
    wide = wide.reindex(columns=range(1, T + 1))
    meta = wide.index.to_frame(index=False)
    key = cohorts.set_index(["naics", "geoid"])
    meta["g"] = key["g"].reindex(wide.index).to_numpy()
    meta["balanced_window"] = (
        key["balanced_window"].reindex(wide.index).fillna(0).to_numpy()
    )
    return meta, wide.to_numpy(dtype=float), T


def _event_grid(
    meta: pd.DataFrame, T: int, balanced: bool, ell_range: tuple[int, int] | None
) -> np.ndarray:
    if ell_range is not None:
        return np.arange(ell_range[0], ell_range[1] + 1)
    if balanced:
        return np.arange(BALANCED_HORIZON[0], BALANCED_HORIZON[1] + 1)
    gs = meta.loc[meta["g"].notna(), "g"].astype(int)
    if gs.empty:
        raise ValidationError("no treated cohorts in the estimation sample")
    return np.arange(int(1 - gs.max()), int(T - gs.min()) + 1)


def _band_mask(ells: np.ndarray, delta: int) -> np.ndarray:
    post = (ells >= 0) & (ells <= BALANCED_HORIZON[1])
    leads = ells <= -(delta + 2)
    return post | leads


def _included_cohorts(meta: pd.DataFrame, balanced: bool) -> pd.Series:
    g = meta["g"]
    if balanced:
        return g.where(meta["balanced_window"].astype(bool))
    return g


def cs_event_study(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    outcome: str,
    *,
    delta: int = DEFAULT_ANTICIPATION,
    balanced: bool = True,
    alpha: float = 0.05,
    n_boot: int = 999,
    seed: int = 0,
    slices: tuple[tuple[int, int], ...] = DEFAULT_SLICES,
    ell_range: tuple[int, int] | None = None,
) -> EventStudyResult:
    """Group-time ATT event study with a multiplier bootstrap band.

    ATT(g, t) compares long differences Y_t - Y_{g-(delta+1)} between the
    treated cohort and same-industry controls that are never treated or
    not yet treated at t (adoption after t + delta). Event-time paths
    aggregate cohorts with cell-count weights. Pointwise standard errors
    equal the exact Rademacher standard deviation of the municipality
    influence sums; the sup-t critical value is the empirical quantile of
    the bootstrap max statistic. A (g, t) comparison with one treated or
    one control cell has no internal dispersion on that side, so its
    variance share is imputed from the opposite group's spread.
    """
    meta, Y, T = _wide_outcome(panel, cohorts, outcome)
    ells = _event_grid(
        meta.assign(g=_included_cohorts(meta, balanced)), T, balanced, ell_range
    )
    ref = -(delta + 1)
    g_eff = _included_cohorts(meta, balanced).to_numpy(dtype=float)
    g_all = meta["g"].to_numpy(dtype=float)
    n_cells = len(meta)
    L = len(ells)
    ell_pos = {int(e): j for j, e in enumerate(ells)}
    psi = np.zeros((n_cells, L))
    att_sum = np.zeros(L)
    wt_sum = np.zeros(L)
    n_treat = np.zeros(L, dtype=int)
    warns: list[str] = []

    for k, idx in meta.groupby("naics").indices.items():
        gk = g_eff[idx]
        gk_all = g_all[idx]
        Yk = Y[idx]
        for g in sorted(set(gk[np.isfinite(gk)])):
            g = int(g)
            base = g + ref
            if base < 1:
                warns.append(f"cohort ({k}, g={g}) has no pre-anticipation base period")
                continue
            for ell in ells:
                t = g + int(ell)
                if t < 1 or t > T:
                    continue
                ok = np.isfinite(Yk[:, t - 1]) & np.isfinite(Yk[:, base - 1])
                treated = (gk_all == g) & ok
                # controls must be untreated (past anticipation) at both
                # endpoints of the long difference; for deep leads the
                # base period is the later one
                not_yet = np.isnan(gk_all) | (gk_all > max(t, base) + delta)
                control = not_yet & (gk_all != g) & ok
                n_T, n_C = int(treated.sum()), int(control.sum())
                if n_T == 0 or n_C == 0:
                    warns.append(
                        f"ATT(g={g}, t={t}) in industry {k} skipped: "
                        f"{n_T} treated, {n_C} controls"
                    )
                    continue
                d = Yk[:, t - 1] - Yk[:, base - 1]
                att = float(d[treated].mean() - d[control].mean())
                j = ell_pos[int(ell)]
                att_sum[j] += n_T * att
                wt_sum[j] += n_T
                n_treat[j] += n_T
                # group terms scaled so sum(phi^2) is the ddof=1 variance
                # of each group mean; a singleton group has no internal
                # dispersion, so its side is imputed from the other group
                phi = np.zeros(len(idx))
                if n_T >= 2:
                    phi[treated] = (
                        d[treated] - d[treated].mean()
                    ) / np.sqrt(n_T * (n_T - 1))
                elif n_C >= 2:
                    phi[treated] = d[control].std(ddof=1)
                if n_C >= 2:
                    phi[control] = -(
                        d[control] - d[control].mean()
                    ) / np.sqrt(n_C * (n_C - 1))
                elif n_T >= 2:
                    phi[control] = -d[treated].std(ddof=1)
                psi[idx, j] += n_T * phi

    estimate = np.where(wt_sum > 0, att_sum / np.maximum(wt_sum, 1.0), np.nan)
    with np.errstate(invalid="ignore"):
        psi = psi / np.where(wt_sum > 0, wt_sum, np.nan)

    munis, muni_idx = np.unique(meta["geoid"].to_numpy(), return_inverse=True)
    psi_m = np.zeros((len(munis), L))
    np.add.at(psi_m, muni_idx, np.nan_to_num(psi))
    se = np.sqrt((psi_m**2).sum(axis=0))
    se[wt_sum == 0] = np.nan

    rng = np.random.default_rng(seed)
    V = rng.integers(0, 2, size=(n_boot, len(munis))) * 2.0 - 1.0
    dev = V @ psi_m  # bootstrap deviations theta* - theta_hat

    band = _band_mask(ells, delta) & np.isfinite(estimate)
    degenerate = band & ~(se > 0)
    if degenerate.any():
        warns.append(
            "degenerate bootstrap SE at event times "
            f"{[int(e) for e in ells[degenerate]]}; excluded from the band set"
        )
    band &= se > 0
    if band.any():
        stats = np.abs(dev[:, band]) / se[band]
        crit = float(np.quantile(stats.max(axis=1), 1.0 - alpha))
    else:
        crit = 0.0
    half = np.where(np.isfinite(se), crit * se, 0.0)
    cumulative = _cumulative_from_draws(
        ells, estimate, dev, psi_m, slices, alpha, warns
    )
    return EventStudyResult(
        outcome=outcome, estimator="cs", ells=ells, estimate=estimate, se=se,
        band_lo=estimate - half, band_hi=estimate + half, in_band_set=band,
        crit=crit, alpha=alpha, ref=ref, n_treated=n_treat,
        cumulative=cumulative, warnings=warns, path_cov=psi_m.T @ psi_m,
    )


def _cumulative_from_draws(
    ells: np.ndarray,
    estimate: np.ndarray,
    dev: np.ndarray,
    psi_m: np.ndarray,
    slices: tuple[tuple[int, int], ...],
    alpha: float,
    warns: list[str],
) -> pd.DataFrame:
    rows = []
    for a, b in slices:
        cols = np.flatnonzero((ells >= a) & (ells <= b))
        if cols.size != b - a + 1 or not np.isfinite(estimate[cols]).all():
            warns.append(f"cumulative slice [{a},{b}] not fully covered by the grid")
            rows.append((slice_label((a, b)), np.nan, np.nan, np.nan, np.nan))
            continue
        est = float(estimate[cols].sum())
        psi_cum = psi_m[:, cols].sum(axis=1)
        se = float(np.sqrt((psi_cum**2).sum()))
        dcum = dev[:, cols].sum(axis=1)
        lo, hi = np.quantile(dcum, [alpha / 2, 1.0 - alpha / 2])
        rows.append((slice_label((a, b)), est, se, est + lo, est + hi))
    return pd.DataFrame(rows, columns=["slice", "estimate", "se", "ci_lo", "ci_hi"])


def connected_components(mask: np.ndarray) -> list[dict[str, list[int]]]:
    """Connected components of the bipartite unit/time incidence graph.

    Units and times with no observations are ignored. Each component is
    reported as row and column index lists.
    """
    n, T = mask.shape
    parent = list(range(n + T))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    rows, cols = np.nonzero(mask)
    for i, t in zip(rows, cols):
        ri, rt = find(i), find(n + t)
        if ri != rt:
            parent[rt] = ri
    comps: dict[int, dict[str, list[int]]] = {}
    for i in np.unique(rows):
        comps.setdefault(find(int(i)), {"units": [], "times": []})["units"].append(int(i))
    for t in np.unique(cols):
        comps.setdefault(find(n + int(t)), {"units": [], "times": []})["times"].append(int(t))
    return list(comps.values())


def two_way_fit(
    Y: np.ndarray,
    mask: np.ndarray,
    row_weights: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = MAX_TWFE_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted two-way means fit by alternating projections.

    Solves min sum w_i mask_it (Y_it - a_i - l_t)^2. ``row_weights`` may
    be (n,) or batched (B, n); returns (alpha, lam) with matching batch
    shape. Quarter effects are normalized to mean zero over identified
    columns. Rows or columns with no (weighted) observations come back
    NaN.
    """
    Y = np.asarray(Y, dtype=float)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(Y)
    n, T = Y.shape
    if row_weights is None:
        row_weights = np.ones(n)
    w = np.atleast_2d(np.asarray(row_weights, dtype=float))
    B = w.shape[0]
    Ym = np.where(mask, Y, 0.0)
    maskf = mask.astype(float)
    row_cnt = maskf.sum(axis=1)
    row_sum = Ym.sum(axis=1)
    col_w = w @ maskf  # (B, T)
    wy_col = w @ Ym
    lam = np.zeros((B, T))
    alpha = np.zeros((B, n))
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN batch rows
        for _ in range(max_iter):
            alpha_new = (row_sum[None, :] - lam @ maskf.T) / row_cnt[None, :]
            alpha_new = np.where(row_cnt[None, :] > 0, alpha_new, np.nan)
            num = wy_col - np.nan_to_num(w * alpha_new) @ maskf
            lam_new = np.where(col_w > 0, num / np.where(col_w > 0, col_w, 1.0), np.nan)
            center = np.nanmean(lam_new, axis=1, keepdims=True)
            lam_new = lam_new - center
            alpha_new = alpha_new + center
            shift = max(
                np.nanmax(np.abs(lam_new - lam), initial=0.0),
                np.nanmax(np.abs(alpha_new - alpha), initial=0.0),
            )
            lam, alpha = lam_new, alpha_new
            if shift < tol:
                break
        else:
            raise NumericalError(
                f"two-way fit did not converge within {max_iter} iterations"
            )
    if B == 1 and np.ndim(row_weights) == 1:
        return alpha[0], lam[0]
    return alpha, lam


def bjs_event_study(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    outcome: str,
    *,
    delta: int = DEFAULT_ANTICIPATION,
    balanced: bool = True,
    alpha: float = 0.05,
    n_boot: int = 999,
    seed: int = 0,
    slices: tuple[tuple[int, int], ...] = DEFAULT_SLICES,
    ell_range: tuple[int, int] | None = None,
    tol: float = 1e-10,
) -> EventStudyResult:
    """Imputation event study with a municipality cluster bootstrap.

    Unit and quarter effects are fit per industry on untreated
    observations (never-treated rows plus eventually-treated rows at
    t <= g - (delta+1)); treatment effects are observed minus fitted
    outcomes on treated rows, averaged with equal cell weight per event
    time, and the whole path is normalized at the reference lead. The
    bootstrap resamples municipalities with replacement and refits.
    """
    meta, Y, T = _wide_outcome(panel, cohorts, outcome)
    ells = _event_grid(
        meta.assign(g=_included_cohorts(meta, balanced)), T, balanced, ell_range
    )
    ref = -(delta + 1)
    if ref not in set(int(e) for e in ells):
        raise ValidationError(
            f"event grid must contain the reference lead {ref} for normalization"
        )
    g_eff = _included_cohorts(meta, balanced).to_numpy(dtype=float)
    g_all = meta["g"].to_numpy(dtype=float)
    warns: list[str] = []
    munis, muni_idx = np.unique(meta["geoid"].to_numpy(), return_inverse=True)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(munis), size=(n_boot, len(munis)))
    w_boot = np.zeros((n_boot, len(munis)))
    for b in range(n_boot):
        np.add.at(w_boot[b], draws[b], 1.0)

    # per-ell accumulators over (point estimate, bootstrap draws)
    L = len(ells)
    num = np.zeros((n_boot + 1, L))
    den = np.zeros((n_boot + 1, L))
    n_treat = np.zeros(L, dtype=int)
    ell_pos = {int(e): j for j, e in enumerate(ells)}

    for k, idx in meta.groupby("naics").indices.items():
        Yk = Y[idx]
        gk_all = g_all[idx]
        gk_eff = g_eff[idx]
        never = np.isnan(gk_all)
        tgrid = np.arange(1, T + 1)
        pre = np.zeros_like(Yk, dtype=bool)
        with np.errstate(invalid="ignore"):
            pre[~never] = tgrid[None, :] <= (gk_all[~never, None] + ref)
        fit_mask = (never[:, None] | pre) & np.isfinite(Yk)
        has_fit = fit_mask.any(axis=1)
        if not has_fit.all():
            dropped = meta.iloc[idx[~has_fit]]
            warns.append(
                f"industry {k}: {len(dropped)} treated cells with no untreated "
                "rows excluded from the imputation fit"
            )
        comps = connected_components(fit_mask)
        if len(comps) > 1:
            summary = "; ".join(
                f"component {c_i}: {len(c['units'])} units, {len(c['times'])} quarters"
                for c_i, c in enumerate(comps)
            )
            raise NumericalError(
                f"untreated observations in industry {k} are disconnected: {summary}"
            )
        wk = np.vstack([np.ones(len(idx)), w_boot[:, muni_idx[idx]]])
        a, l = two_way_fit(Yk, fit_mask, wk, tol=tol)
        eff = Yk[None, :, :] - a[:, :, None] - l[:, None, :]
        treated_rows = np.flatnonzero(np.isfinite(gk_eff) & has_fit)
        for i in treated_rows:
            g = int(gk_all[i])
            for t in range(1, T + 1):
                ell = t - g
                j = ell_pos.get(ell)
                if j is None or not np.isfinite(Yk[i, t - 1]):
                    continue
                vals = eff[:, i, t - 1]
                wrow = wk[:, i]
                good = np.isfinite(vals)
                num[good, j] += (vals * wrow)[good]
                den[good, j] += wrow[good]
                n_treat[j] += 1

    with np.errstate(invalid="ignore"):
        theta = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    ref_col = ell_pos[ref]
    theta = theta - theta[:, [ref_col]]
    estimate, boot = theta[0], theta[1:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN event times
        se = np.nanstd(boot, axis=0, ddof=1)
    se[~np.isfinite(estimate)] = np.nan

    band = _band_mask(ells, delta) & np.isfinite(estimate)
    degenerate = band & ~(se > 0)
    if degenerate.any():
        warns.append(
            "degenerate bootstrap SE at event times "
            f"{[int(e) for e in ells[degenerate]]}; excluded from the band set"
        )
    band &= se > 0
    if band.any():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            stats = np.nanmax(
                np.abs(boot[:, band] - estimate[band]) / se[band], axis=1
            )
        crit = float(np.nanquantile(stats, 1.0 - alpha))
    else:
        crit = 0.0
    half = np.where(np.isfinite(se), crit * se, 0.0)

    rows = []
    for a_, b_ in slices:
        cols = np.flatnonzero((ells >= a_) & (ells <= b_))
        if cols.size != b_ - a_ + 1 or not np.isfinite(estimate[cols]).all():
            warns.append(f"cumulative slice [{a_},{b_}] not fully covered by the grid")
            rows.append((slice_label((a_, b_)), np.nan, np.nan, np.nan, np.nan))
            continue
        est = float(estimate[cols].sum())
        sums = boot[:, cols].sum(axis=1)
        se_cum = float(np.nanstd(sums, ddof=1))
        lo, hi = np.nanquantile(sums, [alpha / 2, 1.0 - alpha / 2])
        rows.append((slice_label((a_, b_)), est, se_cum, float(lo), float(hi)))
    cumulative = pd.DataFrame(rows, columns=["slice", "estimate", "se", "ci_lo", "ci_hi"])

    return EventStudyResult(
        outcome=outcome, estimator="bjs", ells=ells, estimate=estimate, se=se,
        band_lo=estimate - half, band_hi=estimate + half, in_band_set=band,
        crit=crit, alpha=alpha, ref=ref, n_treated=n_treat,
        cumulative=cumulative, warnings=warns,
        path_cov=pd.DataFrame(boot).cov(ddof=1).to_numpy(),
    )


def sa_iw_event_study(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    outcome: str,
    *,
    balanced: bool = True,
    ell_range: tuple[int, int] | None = None,
) -> pd.DataFrame:
    """Interaction-weighted event study against never-treated controls.

    Cohort-specific effects CATT(g, l) difference Y_{g+l} - Y_{g-1}
    between a cohort and the never-treated cells of its industry, then
    aggregate with cohort-share weights per event time. The reference
    lead is l = -1. Standard errors use the two-sample approximation
    per cohort cell. Intended as a heterogeneity-robustness diagnostic
    next to the main paths.
    """
    meta, Y, T = _wide_outcome(panel, cohorts, outcome)
    ells = _event_grid(
        meta.assign(g=_included_cohorts(meta, balanced)), T, balanced, ell_range
    )
    g_eff = _included_cohorts(meta, balanced).to_numpy(dtype=float)
    g_all = meta["g"].to_numpy(dtype=float)
    rows = []
    for ell in ells:
        ell = int(ell)
        if ell == -1:
            rows.append((-1, 0.0, 0.0, 0))
            continue
        catts, variances, weights = [], [], []
        for k, idx in meta.groupby("naics").indices.items():
            gk_all, gk_eff, Yk = g_all[idx], g_eff[idx], Y[idx]
            never = np.isnan(gk_all)
            for g in sorted(set(gk_eff[np.isfinite(gk_eff)])):
                g = int(g)
                t, base = g + ell, g - 1
                if t < 1 or t > T or base < 1:
                    continue
                d = Yk[:, t - 1] - Yk[:, base - 1]
                tr = (gk_all == g) & np.isfinite(d)
                ct = never & np.isfinite(d)
                n_T, n_C = int(tr.sum()), int(ct.sum())
                if n_T == 0 or n_C < 2 or n_T + n_C < 3:
                    continue
                catts.append(float(d[tr].mean() - d[ct].mean()))
                var_t = float(d[tr].var(ddof=1)) / n_T if n_T > 1 else 0.0
                variances.append(var_t + float(d[ct].var(ddof=1)) / n_C)
                weights.append(n_T)
        if not weights:
            rows.append((ell, np.nan, np.nan, 0))
            continue
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        est = float(np.dot(w, catts))
        se = float(np.sqrt(np.dot(w**2, variances)))
        rows.append((ell, est, se, int(sum(weights))))
    return pd.DataFrame(rows, columns=["ell", "estimate", "se", "n_treated"])
