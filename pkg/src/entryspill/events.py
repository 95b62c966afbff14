"""Entry-event detection: triggers T1-T3, cohort assignment, balanced flags.

A cell's first sizable entry is the earliest quarter satisfying any of
three establishment-count triggers, evaluated in the fixed priority order
T1 > T2 > T3 within a quarter:

T1 (new entry)        zero establishments in all eight preceding quarters,
                      then at least one at t and t+1.
T2 (small to large)   at most one establishment at t-1, then at least two
                      at t and again at t+1.
T3 (top-decile jump)  quarter-over-quarter increase of at least
                      max(industry pre-period p90 of changes, 1) at t, with
                      a non-decreasing count at t+1.

Missing values never satisfy a clause, and persistence cannot be verified
when t+1 is beyond the sample.
"""

from __future__ import annotations

import enum

import numpy as np
import pandas as pd

from .errors import ValidationError

__all__ = [
    "Trigger",
    "T1_LOOKBACK",
    "BALANCED_HORIZON",
    "compute_t3_thresholds",
    "detect_event",
    "assign_cohorts",
]

T1_LOOKBACK = 8
BALANCED_HORIZON = (-8, 16)


class Trigger(str, enum.Enum):
    NEW_ENTRY = "T1"
    SMALL_TO_LARGE = "T2"
    TOP_DECILE_JUMP = "T3"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


#: evaluation order within a quarter
TRIGGER_PRIORITY = (Trigger.NEW_ENTRY, Trigger.SMALL_TO_LARGE, Trigger.TOP_DECILE_JUMP)


def compute_t3_thresholds(
    panel: pd.DataFrame, pre_period_end_t: int
) -> dict[str, float | None]:
    """Per-industry p90 of quarter-over-quarter establishment changes.

    Changes are pooled over all cells and pre-period quarters where both t
    and t-1 are observed; the percentile interpolates linearly between
    order statistics. Industries with no valid differences map to None and
    can never fire T3.
    """
    if pre_period_end_t < 2:
        raise ValidationError("pre-period must contain at least 2 quarters")
    sub = panel.loc[panel["t"] <= pre_period_end_t, ["geoid", "naics", "t", "establishments"]]
    sub = sub.sort_values(["geoid", "naics", "t"])
    grp = sub.groupby(["geoid", "naics"], sort=False)
    sub = sub.assign(delta=grp["establishments"].diff(), prev_t=grp["t"].shift())
    # a difference is valid only against the immediately preceding quarter
    valid = sub["delta"].notna() & (sub["prev_t"] == sub["t"] - 1)
    pooled = sub.loc[valid, ["naics", "delta"]]
    thresholds: dict[str, float | None] = {}
    for naics in panel["naics"].unique():
        vals = pooled.loc[pooled["naics"] == naics, "delta"].to_numpy(dtype=float)
        thresholds[str(naics)] = float(np.percentile(vals, 90)) if vals.size else None
    return thresholds


def detect_event(
    series: np.ndarray, threshold: float | None
) -> tuple[int, Trigger] | None:
    """First (t, trigger) firing on an establishment series, or None.

    ``series`` is aligned to t = 1..T at index t-1; NaN marks missing
    quarters. Quarters are scanned in order and within a quarter triggers
    are checked in priority order T1 > T2 > T3.
    """
    est = np.asarray(series, dtype=float)
    T = est.size
    obs = ~np.isnan(est)
    # persistence at t+1 (0-based index i -> quarter t = i+1)
    has_next = np.zeros(T, dtype=bool)
    has_next[:-1] = obs[1:]
    nxt = np.full(T, np.nan)
    nxt[:-1] = est[1:]

    zero = obs & (est == 0)
    # T1: all of the 8 preceding quarters observed zeros
    run = np.zeros(T + 1, dtype=int)  # run[i+1] = zero-run length ending at index i
    for i in range(T):
        run[i + 1] = run[i] + 1 if zero[i] else 0
    prev_zeros = run[:-1]  # zero-run length immediately before each index
    t1 = (
        (np.arange(T) >= T1_LOOKBACK)
        & (prev_zeros >= T1_LOOKBACK)
        & obs
        & (est >= 1)
        & has_next
        & (nxt >= 1)
    )
    prev = np.full(T, np.nan)
    prev[1:] = est[:-1]
    prev_obs = np.zeros(T, dtype=bool)
    prev_obs[1:] = obs[:-1]
    t2 = prev_obs & (prev <= 1) & obs & (est >= 2) & has_next & (nxt >= 2)
    if threshold is None:
        t3 = np.zeros(T, dtype=bool)
    else:
        delta = est - prev
        t3 = (
            prev_obs
            & obs
            & (delta >= max(threshold, 1.0))
            & has_next
            & (nxt >= est)
        )
    for i in range(T):
        for trig, mask in zip(TRIGGER_PRIORITY, (t1, t2, t3)):
            if mask[i]:
                return i + 1, trig
    return None


def assign_cohorts(
    panel: pd.DataFrame,
    thresholds: dict[str, float | None],
    horizon: tuple[int, int] = BALANCED_HORIZON,
) -> pd.DataFrame:
    """Cohort table per cell: g, trigger, balanced_window.

    Never-treated cells carry g = NaN, no trigger, and balanced_window = 1
    (they are always usable as controls). Treated cells are balanced iff
    the full event-time range ``horizon`` around g lies inside the sample.
    """
    T = int(panel["t"].max())
    lo, hi = horizon
    wide = panel.pivot_table(
        index=["geoid", "naics"], columns="t", values="establishments", dropna=False
    )
    wide = wide.reindex(columns=range(1, T + 1))
    rows = []
    for (geoid, naics), est in wide.iterrows():
        hit = detect_event(est.to_numpy(dtype=float), thresholds.get(str(naics)))
        if hit is None:
            rows.append((geoid, naics, np.nan, None, 1))
        else:
            g, trig = hit
            balanced = int(g + lo >= 1 and g + hi <= T)
            rows.append((geoid, naics, float(g), trig.value, balanced))
    out = pd.DataFrame(
        rows, columns=["geoid", "naics", "g", "trigger", "balanced_window"]
    )
    labels = panel[["t", "label"]].drop_duplicates().set_index("t")["label"]
    out["g_label"] = out["g"].map(lambda g: labels.get(int(g)) if pd.notna(g) else None)
    return out
