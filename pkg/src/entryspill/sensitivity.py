"""Sensitivity layer: smoothness bounds, stratum heterogeneity, and the
spatial-diagnostic gate for inference selection.

``honest_sd_bounds`` bounds a linear combination of post-entry effects
under violations of parallel trends whose second differences are capped
at M, extrapolating from the pre-anticipation leads by linear
programming. ``heterogeneity_twfe`` interacts the slice treatment
indicator and the same-industry trailing slice sum with stratum
indicators on cell-quarter rows with cell and quarter fixed effects.
``moran_gate`` aggregates model residuals to
municipality means per quarter, runs a pooled multivariate spatial
autocorrelation test, and selects the inference method accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .drdid import two_way_demean
from .errors import NumericalError, ValidationError
from .exposure import CHANNELS, ExposurePanel, slice_label
from .inference import cluster_se, fdr_adjust
from .spatial import WeightsMatrix, morans_perm_test, multivariate_morans_i

__all__ = [
    "DEFAULT_M_GRID",
    "HonestBounds",
    "MoranTrigger",
    "honest_sd_bounds",
    "heterogeneity_twfe",
    "moran_gate",
]

DEFAULT_M_GRID = (0.0, 0.01, 0.02, 0.05, 0.10)
STRATUM_LEVELS = {
    "tradable": ("tradable", "nontradable"),
    "metro": ("metro", "nonmetro"),
    "wage": ("high", "low"),
}


@dataclass
class HonestBounds:
    """Identified-set bounds per M, widened by the sampling band."""

    target: str
    alpha: float
    target_estimate: float
    target_se: float
    baseline_ci: tuple[float, float]
    bounds: pd.DataFrame  # columns M, lo, hi

    def frame(self) -> pd.DataFrame:
        out = self.bounds.copy()
        out.insert(0, "target", self.target)
        return out


def _sd_extreme(
    ells: np.ndarray,
    pinned: dict[int, float],
    w: np.ndarray,
    M: float,
    sense: float,
) -> float:
    """Extremal w'delta over SD(M)-feasible trend paths (sense=+1 max)."""
    free_idx = [j for j, e in enumerate(ells) if int(e) not in pinned]
    pos = {int(e): j for j, e in enumerate(ells)}
    n_free = len(free_idx)
    col_of = {j: c for c, j in enumerate(free_idx)}
    rows_A, rows_b = [], []
    for mid in range(1, len(ells) - 1):
        coefs = {mid - 1: 1.0, mid: -2.0, mid + 1: 1.0}
        row = np.zeros(n_free)
        const = 0.0
        for j, c in coefs.items():
            e = int(ells[j])
            if e in pinned:
                const += c * pinned[e]
            else:
                row[col_of[j]] = c
        for sign in (1.0, -1.0):
            rows_A.append(sign * row)
            rows_b.append(M - sign * const)
    c_obj = np.zeros(n_free)
    const_obj = 0.0
    for j, e in enumerate(ells):
        e = int(e)
        if e in pinned:
            const_obj += w[j] * pinned[e]
        elif w[j] != 0.0:
            c_obj[col_of[j]] = w[j]
    if n_free == 0:
        return const_obj
    res = optimize.linprog(
        -sense * c_obj,
        A_ub=np.vstack(rows_A) if rows_A else None,
        b_ub=np.asarray(rows_b) if rows_A else None,
        bounds=[(None, None)] * n_free,
        method="highs",
    )
    if res.status != 0:
        raise NumericalError(
            f"SD(M={M}) linear program failed (status {res.status}): {res.message}"
        )
    return const_obj + float(c_obj @ res.x)


def honest_sd_bounds(
    ells: np.ndarray,
    estimates: np.ndarray,
    cov: np.ndarray,
    *,
    target_weights: np.ndarray | None = None,
    m_grid: tuple[float, ...] = DEFAULT_M_GRID,
    alpha: float = 0.05,
    anticipation: int = 2,
    target_name: str = "cumulative_post",
) -> HonestBounds:
    """Smoothness-restriction bounds on a post-period target.

    A linear pre-trend is fitted to the pre-anticipation leads and
    anchored at zero at the reference lead; candidate trend paths delta
    are pinned to that line over the pre-anticipation leads, left free at
    anticipation leads and post horizons, and constrained to second
    differences bounded by M on the contiguous event-time grid. For each
    M the identified set of w'(beta - delta) is computed by LP and
    widened by the alpha-level sampling band of w'beta. The default
    target is the cumulative 0-16 sum. M = 0 extrapolates the fitted
    pre-trend linearly, so with a flat pre-path the bounds collapse to
    the baseline sampling CI.
    """
    ells = np.asarray(ells, dtype=int)
    beta = np.asarray(estimates, dtype=float)
    V = np.asarray(cov, dtype=float)
    if ells.size != beta.size or V.shape != (beta.size, beta.size):
        raise ValidationError("event grid, estimates, and covariance are misaligned")
    if np.any(np.diff(ells) != 1):
        raise ValidationError("event-time grid must be contiguous")
    if np.linalg.eigvalsh((V + V.T) / 2).min() < -1e-8:
        raise ValidationError("path covariance is not positive semidefinite")
    ref = -(anticipation + 1)
    pre_set = ells[ells <= ref]
    if pre_set.size < 3:
        raise ValidationError(
            f"need >= 3 pre-anticipation leads, got {pre_set.size}"
        )
    if target_weights is None:
        w = ((ells >= 0) & (ells <= 16)).astype(float)
    else:
        w = np.asarray(target_weights, dtype=float)
        if w.size != ells.size:
            raise ValidationError("target weights must align with the event grid")
    if not (w[ells >= 0].any()):
        raise ValidationError("target places no weight on post horizons")

    pre = ells <= ref
    if not np.isfinite(beta[pre]).all():
        raise ValidationError("pre-anticipation path estimates must be finite")
    # trend slope fitted to the pre-anticipation leads only, anchored so
    # the trend passes through zero at the reference lead
    slope = float(np.polyfit(ells[pre], beta[pre], 1)[0])
    pinned = {int(e): slope * (int(e) - ref) for e in ells[pre]}
    target_hat = float(w @ beta)
    se = float(np.sqrt(w @ V @ w))
    z = float(stats.norm.ppf(1.0 - alpha / 2))
    rows = []
    for M in m_grid:
        if M < 0:
            raise ValidationError(f"M must be nonnegative, got {M}")
        hi_dev = _sd_extreme(ells, pinned, w, M, sense=+1.0)
        lo_dev = _sd_extreme(ells, pinned, w, M, sense=-1.0)
        rows.append((M, target_hat - hi_dev - z * se, target_hat - lo_dev + z * se))
    bounds = pd.DataFrame(rows, columns=["M", "lo", "hi"])
    return HonestBounds(
        target=target_name, alpha=alpha, target_estimate=target_hat,
        target_se=se, baseline_ci=(target_hat - z * se, target_hat + z * se),
        bounds=bounds,
    )


def _heterogeneity_rows(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    exposure: ExposurePanel,
    outcome: str,
    slice_: tuple[int, int],
    delta: int,
    balanced: bool,
) -> pd.DataFrame:
    """Cell-quarter estimation rows for the auxiliary TWFE model.

    The sample holds never-treated cell-quarters, treated cells' clean
    pre quarters (t <= g - delta - 1), and the slice-window quarters
    t - g in [a, b] of eligible treated cells. Treated post quarters
    outside the window are dropped so effects from other horizons do
    not leak into the fixed effects.
    """
    a, b = slice_
    T = exposure.T
    wide = panel.pivot(index=["geoid", "naics"], columns="t", values=outcome)
    wide = wide.reindex(columns=range(1, T + 1)).reindex(exposure.cell_index())
    Y = wide.to_numpy(dtype=float)
    key = cohorts.set_index(["geoid", "naics"])
    g_all = key["g"].reindex(wide.index).to_numpy(dtype=float)
    bal = key["balanced_window"].reindex(wide.index).fillna(0).to_numpy(dtype=float)

    t_grid = np.arange(1, T + 1)
    ell = t_grid[None, :] - g_all[:, None]  # NaN rows for never-treated
    never = np.isnan(g_all)[:, None]
    clean_pre = ell <= -(delta + 1)
    eligible = np.isfinite(g_all) & ((bal > 0) if balanced else (g_all + b <= T))
    in_window = eligible[:, None] & (ell >= a) & (ell <= b)
    use = (never | clean_pre | in_window) & np.isfinite(Y)

    S = exposure.trailing_sums(CHANNELS[0], slice_)
    e_cross = exposure.any_[CHANNELS[1]]
    e_nall = exposure.any_[CHANNELS[2]]
    c_idx, t_idx = np.nonzero(use)
    return pd.DataFrame({
        "geoid": exposure.cells["geoid"].to_numpy()[c_idx],
        "naics": exposure.cells["naics"].to_numpy()[c_idx],
        "t": t_idx + 1,
        "y": Y[c_idx, t_idx],
        "D": in_window[c_idx, t_idx].astype(float),
        "S_same": S[c_idx, t_idx],
        "e_cross": e_cross[c_idx, t_idx],
        "e_nall": e_nall[c_idx, t_idx],
    })


def heterogeneity_twfe(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    exposure: ExposurePanel,
    strata: pd.DataFrame,
    outcome: str,
    slices: tuple[tuple[int, int], ...],
    *,
    delta: int = 2,
    alpha: float = 0.05,
    balanced: bool = True,
) -> pd.DataFrame:
    """Stratum-specific direct and same-industry spillover effects.

    Auxiliary cell-quarter TWFE model per (outcome, slice): the slice
    treatment indicator and the same-industry trailing slice sum are
    fully interacted with the two stratum levels (wage stratum: unknown
    cells excluded), the other two channels' current shares enter
    additively as exposure-history controls, and every column is
    within-demeaned by cell and quarter before OLS with
    municipality-clustered SEs. There is no exposure trimming and no
    cross-fitting in this model. FDR q-values are computed over the 12
    interaction coefficients per (outcome, slice); constructed TATT rows
    carry no q-values.
    """
    strata_idx = strata.set_index(["geoid", "naics"])
    all_rows = []
    for slc in slices:
        rows = _heterogeneity_rows(
            panel, cohorts, exposure, outcome, slc, delta, balanced
        )
        cell_key = pd.MultiIndex.from_frame(rows[["geoid", "naics"]])
        rows["s_tradable"] = np.where(
            strata_idx["tradable"].reindex(cell_key).to_numpy().astype(bool),
            "tradable", "nontradable",
        )
        rows["s_metro"] = strata_idx["metro"].reindex(cell_key).to_numpy()
        rows["s_wage"] = strata_idx["wage"].reindex(cell_key).to_numpy()

        core, extra = [], []
        for var, levels in STRATUM_LEVELS.items():
            col = f"s_{var}"
            sub = rows.loc[rows[col].isin(levels)].reset_index(drop=True)
            avail = [lv for lv in levels if (sub[col] == lv).any()]
            for lv in levels:
                if lv in avail:
                    continue
                for p in ("DATT", "SATT_same", "TATT"):
                    # empty stratum cell: coefficients marked unavailable
                    core_or_extra = extra if p == "TATT" else core
                    core_or_extra.append(
                        (var, lv, p, np.nan, np.nan, np.nan, np.nan, np.nan, True)
                    )
            if len(avail) == 0 or sub.empty:
                continue
            units = sub["geoid"].astype(str) + "|" + sub["naics"].astype(str)
            quarters = sub["t"].to_numpy()
            cols, names = [], []
            for lv in avail:
                ind = (sub[col] == lv).to_numpy(dtype=float)
                cols.append(sub["D"].to_numpy() * ind)
                names.append(("DATT", lv))
            for lv in avail:
                ind = (sub[col] == lv).to_numpy(dtype=float)
                cols.append(sub["S_same"].to_numpy() * ind)
                names.append(("SATT_same", lv))
            for ctrl in ("e_cross", "e_nall"):
                cols.append(sub[ctrl].to_numpy(dtype=float))
                names.append(("control", ctrl))
            y_dd = two_way_demean(sub["y"].to_numpy(), units, quarters)
            X_dd = np.column_stack([
                two_way_demean(c, units, quarters) for c in cols
            ])
            keep_cols = X_dd.std(axis=0) > 1e-12
            if not keep_cols.all():
                for j in np.flatnonzero(~keep_cols):
                    p, lv = names[j]
                    if p != "control":
                        core.append(
                            (var, lv, p, np.nan, np.nan, np.nan, np.nan, np.nan, True)
                        )
            Xu = X_dd[:, keep_cols]
            used = [names[j] for j in np.flatnonzero(keep_cols)]
            beta, *_ = np.linalg.lstsq(Xu, y_dd, rcond=None)
            u = y_dd - Xu @ beta
            var_est = cluster_se(Xu, u, sub["geoid"].to_numpy())
            pos = {nm: j for j, nm in enumerate(used)}
            z = float(stats.norm.ppf(1 - alpha / 2))
            for lv in avail:
                comps = {}
                for p in ("DATT", "SATT_same"):
                    j = pos.get((p, lv))
                    if j is None:
                        continue
                    est, s = float(beta[j]), float(var_est.se[j])
                    pval = 2 * float(stats.norm.sf(abs(est / s))) if s > 0 else np.nan
                    core.append((var, lv, p, est, s, est - z * s, est + z * s, pval, False))
                    comps[p] = (j, est)
                if len(comps) == 2:
                    c = np.zeros(len(used))
                    c[comps["DATT"][0]] = 1.0
                    c[comps["SATT_same"][0]] = 1.0
                    est = comps["DATT"][1] + comps["SATT_same"][1]
                    s = float(np.sqrt(c @ var_est.V @ c))
                    pval = 2 * float(stats.norm.sf(abs(est / s))) if s > 0 else np.nan
                    extra.append((var, lv, "TATT", est, s, est - z * s, est + z * s, pval, False))

        cols_out = [
            "stratum_var", "stratum", "parameter", "estimate", "se",
            "ci_lo", "ci_hi", "p", "unavailable",
        ]
        both = pd.DataFrame(core + extra, columns=cols_out)
        both["q_bh"] = np.nan
        both["q_by"] = np.nan
        # constructed TATT rows sit outside the FDR family
        in_family = (both["parameter"] != "TATT") & both["p"].notna()
        if in_family.any():
            fdr = fdr_adjust(
                both.loc[in_family, "p"].to_numpy(),
                family=f"{outcome}|{slice_label(slc)}",
            )
            both.loc[in_family, "q_bh"] = fdr.q_bh
            both.loc[in_family, "q_by"] = fdr.q_by
        both.insert(0, "slice", slice_label(slc))
        both.insert(0, "outcome", outcome)
        all_rows.append(both)
    return pd.concat(all_rows, ignore_index=True)


@dataclass
class MoranTrigger:
    """Spatial-diagnostic gate output and the inference method it selects."""

    model_id: str
    statistic: float
    p_value: float
    triggered: bool
    selected_method: str
    share_significant_quarters: float
    n_permutations: int
    seed: int
    flags: list[str] = field(default_factory=list)


def moran_gate(
    residuals: pd.DataFrame,
    weights: WeightsMatrix,
    *,
    model_id: str = "",
    n_perm: int = 999,
    seed: int = 0,
    threshold: float = 0.05,
) -> MoranTrigger:
    """Pooled spatial autocorrelation test on municipality mean residuals.

    ``residuals`` must have columns geoid, t, resid. Residuals are
    averaged to municipality level per quarter; quarters that are
    constant across municipalities are dropped (flagged). The pooled
    statistic is the multivariate Moran over the quarters-as-columns
    matrix with joint row permutations; a pooled p-value below the
    threshold selects spatial inference (scpc), otherwise cluster.
    """
    need = {"geoid", "t", "resid"}
    if not need.issubset(residuals.columns):
        raise ValidationError(f"residual frame must have columns {sorted(need)}")
    means = residuals.groupby(["geoid", "t"])["resid"].mean().unstack("t")
    means = means.reindex(index=weights.nodes)
    flags: list[str] = []
    if means.isna().any().any():
        flags.append("missing municipality-quarter residuals filled with quarter means")
        means = means.apply(lambda c: c.fillna(c.mean()), axis=0)
    Z = means.to_numpy(dtype=float)
    # same constant notion as the Moran statistic itself, or quarters that
    # are constant up to float dust slip past the screen and fail later
    dev = Z - Z.mean(axis=0, keepdims=True)
    keep = ~np.isclose(dev, 0.0).all(axis=0)
    if not keep.all():
        dropped = [int(c) for c in means.columns[~keep]]
        flags.append(f"constant-residual quarters dropped: {dropped}")
        Z = Z[:, keep]
    if Z.shape[1] == 0:
        raise NumericalError("all quarters have constant residuals; Moran undefined")
    cols = means.columns[keep]

    pooled = multivariate_morans_i(Z, weights, n_perm=n_perm, seed=seed)

    sig = 0
    for j in range(Z.shape[1]):
        res = morans_perm_test(Z[:, j], weights, n_perm=n_perm, seed=seed + 1 + j)
        if res.p_value < threshold:
            sig += 1
    share = sig / len(cols)

    triggered = bool(pooled.p_value < threshold)
    return MoranTrigger(
        model_id=model_id, statistic=float(pooled.statistic),
        p_value=float(pooled.p_value),
        triggered=triggered,
        selected_method="scpc" if triggered else "cluster",
        share_significant_quarters=float(share),
        n_permutations=n_perm, seed=seed, flags=flags,
    )
