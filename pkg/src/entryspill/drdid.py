"""Cross-fitted doubly robust slice regression for direct and spillover
effects.

Estimation rows stack treated and comparison cells over cohort anchors:
for each anchor quarter g the treated cohort contributes its own cells,
and cells that are never treated or not yet treated through the slice
window contribute comparison rows. The row outcome is the within-window
mean of long differences Y_{g+l} - Y_{g-(delta+1)}; the regressors are
the own-treatment indicator and the three channel slice sums, so the
D coefficient is a per-period direct effect and each channel coefficient
is a per-unit-of-slice-sum spillover effect.

The pipeline residualizes the outcome and every regressor one at a time
with cross-fitted learners (ridge on exposure histories, strata
indicators, and anchor indicators for continuous targets; logistic
propensity on histories and strata for the treatment indicator),
two-way demeans all residuals by municipality and anchor quarter, and
runs a single OLS with municipality-clustered inference. The long
difference nets out cell-level effects on its own, so the demeaning
handles the remaining municipality and calendar-anchor structure.
Folds are defined at the municipality level so no municipality informs
its own nuisance predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .errors import NumericalError, ValidationError
from .exposure import CHANNELS, DEFAULT_EPSILON, ExposurePanel, slice_label
from .inference import VarianceEstimate, cluster_se

__all__ = [
    "PARAM_NAMES",
    "DEFAULT_MIN_N",
    "FoldAssignment",
    "SliceEstimate",
    "make_folds",
    "crossfit_residualize",
    "two_way_demean",
    "build_slice_rows",
    "estimate_slice",
    "estimate_all_slices",
]

PARAM_NAMES = ("DATT", "SATT_same", "SATT_cross", "SATT_nall")
DEFAULT_MIN_N = 50
DEFAULT_RIDGE_PENALTY = 1.0
COND_LIMIT = 1e10


@dataclass
class FoldAssignment:
    """Municipality-level fold partition for cross-fitting."""

    mapping: dict[str, int]
    K: int
    seed: int

    def for_rows(self, geoids: pd.Series) -> np.ndarray:
        folds = geoids.map(self.mapping)
        if folds.isna().any():
            missing = sorted(set(geoids[folds.isna()]))[:5]
            raise ValidationError(f"rows with unassigned municipalities: {missing}")
        return folds.to_numpy(dtype=int)


def make_folds(geoids, K: int, seed: int) -> FoldAssignment:
    """Deterministic municipality partition with sizes differing by <= 1."""
    uniq = sorted(set(geoids))
    n = len(uniq)
    if K < 2 or K > n:
        raise ValidationError(f"fold count K={K} out of range for {n} municipalities")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, rem = divmod(n, K)
    mapping: dict[str, int] = {}
    pos = 0
    for f in range(K):
        size = base + (1 if f < rem else 0)
        for j in perm[pos : pos + size]:
            mapping[uniq[j]] = f
        pos += size
    return FoldAssignment(mapping=mapping, K=K, seed=seed)


def crossfit_residualize(
    values: np.ndarray,
    features: np.ndarray,
    learner: str,
    folds: np.ndarray,
    penalty: float = DEFAULT_RIDGE_PENALTY,
    max_iter: int = 1000,
    tol: float = 1e-8,
) -> np.ndarray:
    """Out-of-fold residuals of ``values`` against ``features``.

    Ridge fits standardized features with an unpenalized intercept; the
    logistic learner returns values minus predicted probabilities. Each
    fold is predicted by a model trained on all other folds only.
    """
    v = np.asarray(values, dtype=float)
    X = np.asarray(features, dtype=float)
    if not np.isfinite(X).all():
        raise ValidationError("nuisance features must be finite")
    if X.ndim != 2 or X.shape[0] != v.size:
        raise ValidationError("features and values are misaligned")
    out = np.empty_like(v)
    for f in np.unique(folds):
        test = folds == f
        train = ~test
        if not train.any():
            raise ValidationError(f"fold {f} leaves an empty training set")
        if learner == "ridge":
            model = make_pipeline(StandardScaler(), Ridge(alpha=penalty))
            model.fit(X[train], v[train])
            out[test] = v[test] - model.predict(X[test])
        elif learner == "logistic":
            classes = np.unique(v[train])
            if classes.size < 2:
                raise NumericalError(
                    "propensity separation guard: training folds contain a "
                    f"single treatment class ({classes.tolist()})"
                )
            model = make_pipeline(
                StandardScaler(),
                LogisticRegression(penalty=None, max_iter=max_iter, tol=tol),
            )
            model.fit(X[train], v[train])
            clf = model.named_steps["logisticregression"]
            n_iter = int(np.max(clf.n_iter_))
            if n_iter >= max_iter:
                raise NumericalError(
                    f"logistic propensity did not converge ({n_iter} iterations)"
                )
            col = int(np.flatnonzero(clf.classes_ == 1)[0])
            out[test] = v[test] - model.predict_proba(X[test])[:, col]
        else:
            raise ValidationError(f"unknown learner: {learner}")
    return out


def two_way_demean(
    values: np.ndarray,
    unit_ids,
    time_ids,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> np.ndarray:
    """Alternating unit/time demeaning until every group mean is < tol."""
    v = np.asarray(values, dtype=float).copy()
    _, u_codes = np.unique(np.asarray(unit_ids), return_inverse=True)
    _, t_codes = np.unique(np.asarray(time_ids), return_inverse=True)
    u_cnt = np.bincount(u_codes).astype(float)
    t_cnt = np.bincount(t_codes).astype(float)
    gap = np.inf
    for _ in range(max_iter):
        u_mean = np.bincount(u_codes, weights=v) / u_cnt
        v -= u_mean[u_codes]
        t_mean = np.bincount(t_codes, weights=v) / t_cnt
        v -= t_mean[t_codes]
        gap = max(
            np.abs(np.bincount(u_codes, weights=v) / u_cnt).max(),
            np.abs(np.bincount(t_codes, weights=v) / t_cnt).max(),
        )
        if gap < tol:
            return v
    raise NumericalError(
        f"two-way demeaning did not reach tol={tol} in {max_iter} iterations "
        f"(achieved {gap:.3e})"
    )


def _strata_features(strata: pd.DataFrame) -> pd.DataFrame:
    feats = pd.DataFrame(index=strata.index)
    feats["tradable"] = strata["tradable"].astype(float)
    feats["metro"] = (strata["metro"] == "metro").astype(float)
    feats["wage_high"] = (strata["wage"] == "high").astype(float)
    feats["wage_unknown"] = (strata["wage"] == "unknown").astype(float)
    return feats


def build_slice_rows(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    exposure: ExposurePanel,
    strata: pd.DataFrame,
    outcome: str,
    slice_: tuple[int, int],
    *,
    delta: int = 2,
    history_flavor: str = "any",
    balanced: bool = True,
    eps: float = DEFAULT_EPSILON,
) -> pd.DataFrame:
    """Stacked cohort-anchor estimation rows for one slice.

    Columns: identifiers (geoid, naics, anchor), outcome y, treatment D,
    channel slice sums S_same/S_cross/S_nall, interior-support flag keep,
    nuisance feature columns prefixed ``f_``, and anchor-quarter
    indicator features prefixed ``fa_``. The indicators let the nuisance
    projections absorb calendar shocks shared by an anchor's rows, which
    the later demeaning cannot take back out of the residuals.
    """
    a, b = slice_
    T = int(panel["t"].max())
    wide = panel.pivot(index=["geoid", "naics"], columns="t", values=outcome)
    wide = wide.reindex(columns=range(1, T + 1))
    wide = wide.reindex(exposure.cell_index())
    Y = wide.to_numpy(dtype=float)
    key = cohorts.set_index(["geoid", "naics"])
    g_all = key["g"].reindex(wide.index).to_numpy(dtype=float)
    bal = key["balanced_window"].reindex(wide.index).fillna(0).to_numpy(dtype=float)
    strata_feats = (
        _strata_features(strata.set_index(["geoid", "naics"]))
        .reindex(wide.index)
        .fillna(0.0)
        .to_numpy()
    )
    cohort_ok = np.isfinite(g_all) & (bal.astype(bool) if balanced else True)
    anchors = sorted(set(g_all[cohort_ok].astype(int)))
    short = {"same": CHANNELS[0], "cross": CHANNELS[1], "nall": CHANNELS[2]}
    frames = []
    for g in anchors:
        base = g - (delta + 1)
        lo, hi = g + a, g + b
        if base < 1 or lo < 1 or hi > T:
            continue
        window = Y[:, lo - 1 : hi] - Y[:, base - 1][:, None]
        y = window.mean(axis=1)
        complete = np.isfinite(window).all(axis=1)
        treated = cohort_ok & (g_all == g)
        control = np.isnan(g_all) | (g_all > g + b + delta)
        use = (treated | control) & complete
        if not use.any():
            continue
        sums = {
            name: exposure.anchored_sums(chan, g, slice_)
            for name, chan in short.items()
        }
        hist = exposure.histories(base, history_flavor)
        idx = np.flatnonzero(use)
        frame = pd.DataFrame({
            "geoid": exposure.cells["geoid"].to_numpy()[idx],
            "naics": exposure.cells["naics"].to_numpy()[idx],
            "anchor": g,
            "y": y[idx],
            "D": treated[idx].astype(float),
            "S_same": sums["same"][idx],
            "S_cross": sums["cross"][idx],
            "S_nall": sums["nall"][idx],
        })
        feats = np.column_stack([hist[idx], strata_feats[idx]])
        for j in range(feats.shape[1]):
            frame[f"f_{j}"] = feats[:, j]
        frames.append(frame)
    if not frames:
        raise ValidationError(
            f"no estimation rows for slice [{a},{b}]: no usable anchors"
        )
    rows = pd.concat(frames, ignore_index=True)
    for g in sorted(rows["anchor"].unique()):
        rows[f"fa_{g}"] = (rows["anchor"] == g).astype(float)
    L = b - a + 1
    interior = np.ones(len(rows), dtype=bool)
    for col in ("S_same", "S_cross", "S_nall"):
        s_bar = rows[col].to_numpy() / L
        rows[f"keep_{col}"] = (s_bar >= eps) & (s_bar <= 1.0 - eps)
        interior &= rows[f"keep_{col}"].to_numpy()
    rows["keep"] = interior
    return rows


@dataclass
class SliceEstimate:
    """DR slice regression output with exact aggregation identities."""

    outcome: str
    slice: tuple[int, int]
    estimates: dict[str, float]
    ses: dict[str, float]
    variance: VarianceEstimate
    n_raw: int
    n_after_trim: int
    history_flavor: str
    epsilon: float
    min_n: int
    design: np.ndarray = field(repr=False, default=None)
    resid: np.ndarray = field(repr=False, default=None)
    cluster_ids: np.ndarray = field(repr=False, default=None)
    time_ids: np.ndarray = field(repr=False, default=None)
    extra_variances: dict[str, VarianceEstimate] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for p in list(PARAM_NAMES) + ["SATT", "TATT"]:
            rows.append((
                self.outcome, slice_label(self.slice), p,
                self.estimates[p], self.ses[p], self.n_after_trim,
                self.history_flavor, self.epsilon, self.min_n,
            ))
        return pd.DataFrame(rows, columns=[
            "outcome", "slice", "parameter", "estimate", "se_cluster",
            "n", "history_flavor", "epsilon", "min_n",
        ])


def _combo_se(V: np.ndarray, c: np.ndarray) -> float:
    return float(np.sqrt(c @ V @ c))


def _name_collinear_pair(Xr: np.ndarray) -> str:
    names = ("D", "S_same", "S_cross", "S_nall")
    sd = Xr.std(axis=0)
    dead = [names[j] for j in range(Xr.shape[1]) if sd[j] < 1e-14]
    if dead:
        return f"no residual variation in {', '.join(dead)}"
    corr = np.corrcoef(Xr, rowvar=False)
    np.fill_diagonal(corr, 0.0)
    i, j = np.unravel_index(np.nanargmax(np.abs(corr)), corr.shape)
    return (
        f"residualized {names[i]} and {names[j]} are collinear "
        f"(|corr| = {abs(corr[i, j]):.6f})"
    )


def estimate_slice(
    rows: pd.DataFrame,
    outcome: str,
    slice_: tuple[int, int],
    *,
    K: int = 5,
    seed: int = 0,
    min_n: int = DEFAULT_MIN_N,
    ridge_penalty_y: float = DEFAULT_RIDGE_PENALTY,
    ridge_penalty_s: float = DEFAULT_RIDGE_PENALTY,
    epsilon: float = DEFAULT_EPSILON,
    history_flavor: str = "any",
    demean_tol: float = 1e-10,
) -> SliceEstimate:
    """Run the full DR pipeline on prepared slice rows.

    Residualize, demean, regress; abort when fewer than ``min_n`` rows
    survive the interior-support trim, reporting per-channel counts.
    """
    n_raw = len(rows)
    kept = rows.loc[rows["keep"]].reset_index(drop=True)
    n = len(kept)
    if n < min_n:
        counts = {
            col: int(rows[f"keep_{col}"].sum())
            for col in ("S_same", "S_cross", "S_nall")
        }
        raise ValidationError(
            f"slice {slice_label(slice_)} has {n} rows after trimming "
            f"(min_n={min_n}); interior counts per channel: {counts}"
        )
    anchor_cols = [c for c in kept.columns if c.startswith("fa_")]
    feat_cols = [
        c for c in kept.columns if c.startswith("f_") and c not in anchor_cols
    ]
    X_feat = kept[feat_cols].to_numpy(dtype=float)
    # ridge targets also see the anchor indicators; the propensity does
    # not, since sparse anchors would let it separate
    X_ridge = kept[feat_cols + anchor_cols].to_numpy(dtype=float)
    folds = make_folds(kept["geoid"], K, seed).for_rows(kept["geoid"])

    resids = {}
    resids["y"] = crossfit_residualize(
        kept["y"].to_numpy(), X_ridge, "ridge", folds, penalty=ridge_penalty_y
    )
    resids["D"] = crossfit_residualize(
        kept["D"].to_numpy(), X_feat, "logistic", folds
    )
    for col in ("S_same", "S_cross", "S_nall"):
        resids[col] = crossfit_residualize(
            kept[col].to_numpy(), X_ridge, "ridge", folds, penalty=ridge_penalty_s
        )

    # the long-difference outcome already nets out cell effects, so the
    # two remaining dimensions are municipality and anchor quarter
    munis = kept["geoid"].to_numpy()
    times = kept["anchor"].to_numpy()
    dd = {
        k: two_way_demean(v, munis, times, tol=demean_tol)
        for k, v in resids.items()
    }
    Xr = np.column_stack([dd["D"], dd["S_same"], dd["S_cross"], dd["S_nall"]])
    svals = np.linalg.svd(Xr, compute_uv=False)
    cond = np.inf if svals[-1] <= 0 else svals[0] / svals[-1]
    if cond > COND_LIMIT:
        raise NumericalError(
            f"ill-conditioned slice regression (cond={cond:.3e}): "
            + _name_collinear_pair(Xr)
        )
    beta, *_ = np.linalg.lstsq(Xr, dd["y"], rcond=None)
    u = dd["y"] - Xr @ beta
    var = cluster_se(Xr, u, kept["geoid"].to_numpy())

    est = {p: float(beta[j]) for j, p in enumerate(PARAM_NAMES)}
    est["SATT"] = est["SATT_same"] + est["SATT_cross"] + est["SATT_nall"]
    est["TATT"] = est["DATT"] + est["SATT"]
    ses = {p: float(var.se[j]) for j, p in enumerate(PARAM_NAMES)}
    ses["SATT"] = _combo_se(var.V, np.array([0.0, 1.0, 1.0, 1.0]))
    ses["TATT"] = _combo_se(var.V, np.array([1.0, 1.0, 1.0, 1.0]))
    return SliceEstimate(
        outcome=outcome, slice=slice_, estimates=est, ses=ses, variance=var,
        n_raw=n_raw, n_after_trim=n, history_flavor=history_flavor,
        epsilon=epsilon, min_n=min_n, design=Xr, resid=u,
        cluster_ids=kept["geoid"].to_numpy(), time_ids=times,
    )


def estimate_all_slices(
    panel: pd.DataFrame,
    cohorts: pd.DataFrame,
    exposure: ExposurePanel,
    strata: pd.DataFrame,
    outcome: str,
    slices: tuple[tuple[int, int], ...],
    *,
    delta: int = 2,
    K: int = 5,
    seed: int = 0,
    min_n: int = DEFAULT_MIN_N,
    history_flavor: str = "any",
    balanced: bool = True,
    eps: float = DEFAULT_EPSILON,
) -> dict[tuple[int, int], SliceEstimate]:
    out = {}
    for slc in slices:
        rows = build_slice_rows(
            panel, cohorts, exposure, strata, outcome, slc,
            delta=delta, history_flavor=history_flavor, balanced=balanced,
            eps=eps,
        )
        out[slc] = estimate_slice(
            rows, outcome, slc, K=K, seed=seed, min_n=min_n,
            history_flavor=history_flavor, epsilon=eps,
        )
    return out
