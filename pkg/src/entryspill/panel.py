"""Panel construction: quarter index, exclusions, deflation, skeleton, strata.

Raw records are one row per (municipality, industry, year, quarter) with
establishment counts, covered employment, and nominal total wages. This
module turns them into a balanced cell-by-quarter panel with real-2020
wages, log outcomes, and time-invariant strata labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError

__all__ = [
    "DEFAULT_START",
    "DEFAULT_END",
    "TRADABLE_SECTORS",
    "EXCLUDED_MUNI_CODES",
    "EXCLUDED_NAICS_PREFIXES",
    "PRE_PERIOD_END",
    "quarter_label",
    "parse_quarter_label",
    "build_quarter_index",
    "quarterly_cpi",
    "apply_exclusions",
    "deflate_and_log",
    "build_skeleton",
    "assign_strata",
    "build_panel",
]

DEFAULT_START = (2014, 1)
DEFAULT_END = (2025, 1)

# 2-digit sectors treated as tradable; everything else (including unmapped
# codes) is nontradable.
TRADABLE_SECTORS = frozenset(
    {"11", "21", "31", "32", "33", "42", "48", "49", "51", "52", "54", "55"}
)

EXCLUDED_MUNI_CODES = frozenset({"995", "999"})
EXCLUDED_NAICS_PREFIXES = ("99", "10")

# Last pre-program quarter (2019Q3) expressed against the default index.
PRE_PERIOD_END = (2019, 3)

OUTCOME_LEVELS = {
    "establishments": "log_establishments",
    "covered_emp": "log_covered_emp",
    "total_wages": "log_total_wages",
    "total_wages_real_2020": "log_total_wages_real_2020",
}


def quarter_label(year: int, quarter: int) -> str:
    return f"{year}Q{quarter}"


def parse_quarter_label(label: str) -> tuple[int, int]:
    year, _, q = label.partition("Q")
    return int(year), int(q)


def build_quarter_index(
    start: tuple[int, int] = DEFAULT_START,
    end: tuple[int, int] = DEFAULT_END,
) -> pd.DataFrame:
    """Contiguous quarter index with t = 1 at ``start``.

    Returns a frame with columns t, year, quarter, label.
    """
    sy, sq = start
    ey, eq = end
    for q in (sq, eq):
        if q not in (1, 2, 3, 4):
            raise ValidationError(f"quarter out of range: {q}")
    n = (ey - sy) * 4 + (eq - sq) + 1
    if n < 1:
        raise ValidationError(
            f"invalid quarter range: {quarter_label(sy, sq)} > {quarter_label(ey, eq)}"
        )
    rows = []
    year, quarter = sy, sq
    for t in range(1, n + 1):
        rows.append((t, year, quarter, quarter_label(year, quarter)))
        quarter += 1
        if quarter == 5:
            year, quarter = year + 1, 1
    return pd.DataFrame(rows, columns=["t", "year", "quarter", "label"])


def quarterly_cpi(cpi_monthly: pd.DataFrame, base_year: int = 2020) -> pd.DataFrame:
    """Quarterly CPI means rebased so the ``base_year`` average is 100.

    ``cpi_monthly`` has columns year, month, value. Each quarter must have
    all three months; the rebasing divisor is the mean of the base year's
    four quarterly means.
    """
    cpi = cpi_monthly.copy()
    cpi["quarter"] = (cpi["month"].astype(int) - 1) // 3 + 1
    grouped = cpi.groupby(["year", "quarter"])["value"]
    counts = grouped.count()
    short = counts[counts != 3]
    if len(short):
        y, q = short.index[0]
        raise ValidationError(
            f"CPI quarter {quarter_label(int(y), int(q))} has {int(short.iloc[0])} "
            "months; all three are required"
        )
    out = grouped.mean().reset_index(name="cpi")
    base = out.loc[out["year"] == base_year, "cpi"]
    if len(base) != 4:
        raise ValidationError(
            f"CPI must cover all four quarters of {base_year} to rebase; found {len(base)}"
        )
    out["cpi"] = out["cpi"] * (100.0 / base.mean())
    return out


def _normalize_geoid(raw) -> str:
    code = str(raw).strip()
    return "72" + code[-3:].zfill(3)


def apply_exclusions(raw: pd.DataFrame) -> pd.DataFrame:
    """Drop excluded municipality and industry codes; normalize geoids.

    Municipality codes 995/999 (aggregates) and NAICS codes with 2-digit
    prefix 99 or 10 (unclassified / all-industry totals) are removed.
    """
    out = raw.copy()
    muni = out["geoid_raw"].astype(str).str.strip()
    naics = out["naics"].astype(str).str.strip()
    keep = ~muni.str[-3:].isin(EXCLUDED_MUNI_CODES)
    keep &= ~naics.str[:2].isin(EXCLUDED_NAICS_PREFIXES)
    out = out.loc[keep].copy()
    out["geoid"] = out["geoid_raw"].map(_normalize_geoid)
    out["naics"] = out["naics"].astype(str).str.strip()
    return out.drop(columns=["geoid_raw"])


def deflate_and_log(rows: pd.DataFrame, cpi_quarterly: pd.DataFrame) -> pd.DataFrame:
    """Attach real-2020 wages, log outcomes, and average wage levels.

    Log fields are present iff the level is strictly positive; the average
    wage is present iff covered employment is strictly positive. Every
    (year, quarter) in ``rows`` must appear in ``cpi_quarterly``.
    """
    merged = rows.merge(cpi_quarterly, on=["year", "quarter"], how="left")
    missing = merged["cpi"].isna()
    if missing.any():
        bad = merged.loc[missing, ["year", "quarter"]].iloc[0]
        raise ValidationError(
            "no CPI value for quarter "
            f"{quarter_label(int(bad['year']), int(bad['quarter']))}"
        )
    merged["total_wages_real_2020"] = merged["total_wages"] / (merged["cpi"] / 100.0)
    for level, log_col in OUTCOME_LEVELS.items():
        vals = merged[level].astype(float)
        merged[log_col] = np.where(vals > 0, np.log(np.where(vals > 0, vals, 1.0)), np.nan)
    emp = merged["covered_emp"].astype(float)
    merged["avg_wage_level_real_2020"] = np.where(
        emp > 0, merged["total_wages_real_2020"] / np.where(emp > 0, emp, 1.0), np.nan
    )
    return merged.drop(columns=["cpi"])


def _stable_name(labels: pd.Series):
    """Most frequent label, ties broken lexicographically."""
    counts = labels.dropna().astype(str).value_counts()
    if len(counts) == 0:
        return np.nan
    best = counts[counts == counts.max()].index
    return sorted(best)[0]


def build_skeleton(rows: pd.DataFrame, qindex: pd.DataFrame) -> pd.DataFrame:
    """Cross all observed (geoid, naics) cells with the full quarter index.

    Absent observations become rows with missing outcomes. When the input
    carries an ``industry_name`` column, the most frequent label per naics
    is retained (ties broken lexicographically).
    """
    if len(qindex) == 0:
        raise ValidationError("quarter index is empty")
    cells = rows[["geoid", "naics"]].drop_duplicates()
    if len(cells) == 0:
        out = rows.head(0).copy()
        for col in ("t", "label"):
            if col not in out.columns:
                out[col] = pd.Series(dtype=qindex[col].dtype)
        return out
    skeleton = cells.merge(qindex, how="cross")
    name_col = None
    if "industry_name" in rows.columns:
        name_col = (
            rows.groupby("naics")["industry_name"]
            .agg(_stable_name)
            .rename("industry_name")
        )
    data_cols = [
        c for c in rows.columns
        if c not in ("geoid", "naics", "year", "quarter", "industry_name")
    ]
    out = skeleton.merge(
        rows[["geoid", "naics", "year", "quarter"] + data_cols],
        on=["geoid", "naics", "year", "quarter"],
        how="left",
    )
    dupes = out.duplicated(["geoid", "naics", "t"])
    if dupes.any():
        row = out.loc[dupes, ["geoid", "naics", "t"]].iloc[0]
        raise ValidationError(
            f"duplicate raw rows for cell ({row['geoid']}, {row['naics']}) at t={row['t']}"
        )
    if name_col is not None:
        out = out.merge(name_col, on="naics", how="left")
    return out.sort_values(["geoid", "naics", "t"], ignore_index=True)


def _pre_period_mask(panel: pd.DataFrame, pre_period_end: tuple[int, int]) -> pd.Series:
    ey, eq = pre_period_end
    return (panel["year"] * 4 + panel["quarter"]) <= (ey * 4 + eq)


def assign_strata(
    panel: pd.DataFrame,
    metro_table: pd.DataFrame,
    pre_period_end: tuple[int, int] = PRE_PERIOD_END,
) -> pd.DataFrame:
    """Time-invariant strata per cell: tradable, metro, wage stratum.

    Tradable depends only on the 2-digit sector; metro comes from the
    lookup table (absent geoids are nonmetro); the wage stratum is high iff
    the industry's pre-period median of the real average wage is at least
    the cross-industry median of those medians, and unknown when the
    industry has no pre-period wage data.
    """
    cells = panel[["geoid", "naics"]].drop_duplicates().copy()
    cells["tradable"] = cells["naics"].str[:2].isin(TRADABLE_SECTORS)
    metro = metro_table.copy()
    metro["geoid"] = metro["geoid"].astype(str)
    metro_map = dict(zip(metro["geoid"], metro["metro"].astype(int)))
    cells["metro"] = np.where(
        cells["geoid"].map(metro_map).fillna(0).astype(int) == 1, "metro", "nonmetro"
    )
    pre = panel.loc[_pre_period_mask(panel, pre_period_end)]
    medians = pre.groupby("naics")["avg_wage_level_real_2020"].median().dropna()
    if len(medians):
        cutoff = medians.median()
        wage = medians.map(lambda m: "high" if m >= cutoff else "low")
        cells["wage"] = cells["naics"].map(wage).fillna("unknown")
    else:
        cells["wage"] = "unknown"
    return cells.reset_index(drop=True)


@dataclass
class BuiltPanel:
    """Balanced panel plus the strata table and the quarter index used."""

    panel: pd.DataFrame
    strata: pd.DataFrame
    qindex: pd.DataFrame

    @property
    def n_quarters(self) -> int:
        return len(self.qindex)


def build_panel(
    raw: pd.DataFrame,
    cpi_monthly: pd.DataFrame,
    metro_table: pd.DataFrame,
    start: tuple[int, int] = DEFAULT_START,
    end: tuple[int, int] = DEFAULT_END,
    pre_period_end: tuple[int, int] = PRE_PERIOD_END,
) -> BuiltPanel:
    """Full ingestion chain: exclusions, deflation, skeleton, strata."""
    qindex = build_quarter_index(start, end)
    filtered = apply_exclusions(raw)
    in_range = filtered.merge(qindex[["year", "quarter"]], on=["year", "quarter"])
    cpi_q = quarterly_cpi(cpi_monthly)
    deflated = deflate_and_log(in_range, cpi_q)
    skeleton = build_skeleton(deflated, qindex)
    strata = assign_strata(skeleton, metro_table, pre_period_end)
    merged = skeleton.merge(strata, on=["geoid", "naics"], how="left")
    return BuiltPanel(panel=merged, strata=strata, qindex=qindex)
