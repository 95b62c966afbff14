"""Event-study estimators: exact recovery, banding, and diagnostics."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from entryspill.did_direct import (
    bjs_event_study,
    connected_components,
    cs_event_study,
    sa_iw_event_study,
    two_way_fit,
)
from entryspill.dgp import DgpConfig, PlannedEvent, simulate
from entryspill.drdid import two_way_demean
from entryspill.errors import NumericalError
from entryspill.events import Trigger


def _flat_truth(ells: np.ndarray, level: float) -> np.ndarray:
    return level * (ells >= 0)


class TestGroupTimePath:
    def test_recovers_flat_direct_effect_exactly(self, sparse_sim):
        res = cs_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp", n_boot=199
        )
        np.testing.assert_array_equal(res.ells, np.arange(-8, 17))
        np.testing.assert_allclose(
            res.estimate, _flat_truth(res.ells, 0.30), atol=1e-8
        )
        # the base-period contrast is identically zero, not just small
        assert res.estimate[res.ells == res.ref][0] == 0.0
        assert res.ref == -3
        post = res.ells >= 0
        assert (res.n_treated[post] == 16).all()

    def test_imputation_path_agrees_at_zero_noise(self, sparse_sim):
        cs = cs_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp", n_boot=99
        )
        bjs = bjs_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp", n_boot=99
        )
        np.testing.assert_allclose(bjs.estimate, cs.estimate, atol=1e-7)
        assert bjs.estimate[bjs.ells == bjs.ref][0] == 0.0
        assert bjs.estimator == "bjs" and cs.estimator == "cs"

    def test_constant_outcome_band_is_degenerate_and_flagged(self):
        # identically-zero influence sums leave nothing to calibrate on
        rows = [
            (gid, "5411", t, 4.0)
            for gid in ("72001", "72002", "72003", "72004")
            for t in range(1, 11)
        ]
        panel = pd.DataFrame(rows, columns=["geoid", "naics", "t", "y"])
        cohorts = pd.DataFrame({
            "geoid": ["72001", "72002", "72003", "72004"],
            "naics": "5411",
            "g": [5.0, np.nan, np.nan, np.nan],
            "balanced_window": 1,
        })
        res = cs_event_study(
            panel, cohorts, "y", balanced=False, ell_range=(-2, 2), n_boot=49
        )
        assert not res.in_band_set.any()
        assert any("degenerate" in w for w in res.warnings)
        assert res.crit == 0.0

    def test_cumulative_slices_partition_and_match_path_sums(self, sparse_sim):
        res = cs_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp", n_boot=199
        )
        cum = res.cumulative.set_index("slice")["estimate"]
        assert cum["0-4"] == pytest.approx(5 * 0.30, abs=1e-8)
        assert cum["0-4"] + cum["5-8"] + cum["9-16"] == pytest.approx(
            cum["0-16"], abs=1e-10
        )
        want = res.estimate[(res.ells >= 0) & (res.ells <= 16)].sum()
        assert cum["0-16"] == pytest.approx(want, abs=1e-12)

    def test_unit_and_quarter_shifts_leave_the_path_unchanged(self, sparse_sim):
        base = cs_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp", n_boot=99
        )
        panel = sparse_sim.panel.copy()
        muni_shift = {
            g: 0.1 * i for i, g in enumerate(sorted(panel["geoid"].unique()))
        }
        panel["log_covered_emp"] = (
            panel["log_covered_emp"]
            + panel["geoid"].map(muni_shift)
            + 0.03 * panel["t"]
        )
        shifted = cs_event_study(
            panel, sparse_sim.cohorts, "log_covered_emp", n_boot=99
        )
        np.testing.assert_allclose(shifted.estimate, base.estimate, atol=1e-8)

    def test_same_seed_reproduces_the_band(self, noisy_sim):
        kw = dict(n_boot=199, seed=42)
        a = cs_event_study(
            noisy_sim.panel, noisy_sim.cohorts, "log_covered_emp", **kw
        )
        b = cs_event_study(
            noisy_sim.panel, noisy_sim.cohorts, "log_covered_emp", **kw
        )
        assert a.crit == b.crit
        np.testing.assert_array_equal(a.band_lo, b.band_lo)
        np.testing.assert_array_equal(a.band_hi, b.band_hi)


class TestBanding:
    def test_band_set_and_width_on_noisy_data(self, noisy_sim):
        for fn in (cs_event_study, bjs_event_study):
            res = fn(
                noisy_sim.panel, noisy_sim.cohorts, "log_covered_emp",
                n_boot=299, seed=3,
            )
            ells = res.ells
            # anticipation leads and the reference never enter the band set
            assert not res.in_band_set[(ells == -1) | (ells == -2)].any()
            assert not res.in_band_set[ells == res.ref].any()
            assert res.in_band_set[(ells >= 0) | (ells <= -4)].all()
            assert res.crit > 0
            inside = res.in_band_set
            assert (res.band_lo[inside] <= res.estimate[inside]).all()
            assert (res.band_hi[inside] >= res.estimate[inside]).all()
            # sup-t half-widths scale a common critical value by each se
            np.testing.assert_allclose(
                res.band_hi[inside] - res.estimate[inside],
                res.crit * res.se[inside],
                rtol=1e-12,
            )

    def test_path_covariance_shape_matches_grid(self, noisy_sim):
        res = cs_event_study(
            noisy_sim.panel, noisy_sim.cohorts, "log_covered_emp", n_boot=99
        )
        L = len(res.ells)
        assert res.path_cov.shape == (L, L)
        # diagonal reproduces the pointwise variances
        np.testing.assert_allclose(
            np.sqrt(np.diag(res.path_cov)), np.nan_to_num(res.se), atol=1e-10
        )


class TestTwoWayFit:
    def test_exact_absorption_of_additive_structure(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=12)
        l = rng.normal(size=9)
        Y = a[:, None] + l[None, :]
        mask = np.ones_like(Y, dtype=bool)
        alpha, lam = two_way_fit(Y, mask)
        np.testing.assert_allclose(
            alpha[:, None] + lam[None, :], Y, atol=1e-9
        )
        assert abs(np.nanmean(lam)) < 1e-9

    def test_weighted_and_batched_fits(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=8)
        l = rng.normal(size=6)
        Y = a[:, None] + l[None, :]
        mask = rng.uniform(size=Y.shape) > 0.2
        mask[:, 0] = True  # keep every row and column identified
        mask[0, :] = True
        w = rng.uniform(0.5, 2.0, size=(4, 8))
        alpha, lam = two_way_fit(Y, mask, w)
        assert alpha.shape == (4, 8) and lam.shape == (4, 6)
        for b in range(4):
            fit = alpha[b][:, None] + lam[b][None, :]
            np.testing.assert_allclose(fit[mask], Y[mask], atol=1e-8)

    def test_empty_rows_come_back_nan(self):
        Y = np.arange(12.0).reshape(3, 4)
        mask = np.ones_like(Y, dtype=bool)
        mask[1] = False
        alpha, lam = two_way_fit(Y, mask)
        assert np.isnan(alpha[1])
        assert np.isfinite(alpha[[0, 2]]).all() and np.isfinite(lam).all()


class TestConnectivity:
    def test_block_diagonal_mask_splits_into_components(self):
        mask = np.array([
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
        ], dtype=bool)
        comps = connected_components(mask)
        assert len(comps) == 2
        got = sorted(
            (sorted(c["units"]), sorted(c["times"])) for c in comps
        )
        assert got == [([0, 1], [0, 1]), ([2], [2, 3])]

    def test_bridged_mask_is_one_component(self):
        mask = np.array([
            [1, 1, 0],
            [0, 1, 1],
        ], dtype=bool)
        comps = connected_components(mask)
        assert len(comps) == 1
        assert sorted(comps[0]["units"]) == [0, 1]

    def test_imputation_rejects_disconnected_untreated_design(self):
        # two municipality blocks observed on disjoint quarter ranges
        rows = []
        for gid, ts in (
            ("72001", range(1, 4)), ("72002", range(1, 4)),
            ("72003", range(4, 7)), ("72004", range(4, 7)),
        ):
            for t in ts:
                rows.append((gid, "5411", t, 1.0 + 0.1 * t))
        panel = pd.DataFrame(rows, columns=["geoid", "naics", "t", "y"])
        cohorts = pd.DataFrame({
            "geoid": ["72001", "72002", "72003", "72004"],
            "naics": "5411",
            "g": [np.nan] * 4,
            "balanced_window": 1,
        })
        with pytest.raises(NumericalError, match="disconnected"):
            bjs_event_study(
                panel, cohorts, "y",
                balanced=False, ell_range=(-3, 1), n_boot=9,
            )

    def test_imputation_flags_treated_cells_without_untreated_rows(self):
        # 72001 adopts at t=1: no pre rows, so it cannot be imputed
        rows = []
        for gid in ("72001", "72002", "72003"):
            for t in range(1, 7):
                rows.append((gid, "5411", t, 2.0 + 0.1 * t))
        panel = pd.DataFrame(rows, columns=["geoid", "naics", "t", "y"])
        cohorts = pd.DataFrame({
            "geoid": ["72001", "72002", "72003"],
            "naics": "5411",
            "g": [1.0, np.nan, np.nan],
            "balanced_window": 1,
        })
        res = bjs_event_study(
            panel, cohorts, "y",
            delta=0, balanced=False, ell_range=(-1, 3), n_boot=19,
        )
        assert any("no untreated rows" in w for w in res.warnings)


class TestInteractionWeightedDiagnostic:
    def test_exact_on_homogeneous_effects(self, sparse_sim):
        sa = sa_iw_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp"
        )
        ells = sa["ell"].to_numpy()
        np.testing.assert_allclose(
            sa["estimate"].to_numpy(), _flat_truth(ells, 0.30), atol=1e-8
        )
        ref = sa.loc[sa["ell"] == -1].iloc[0]
        assert ref["estimate"] == 0.0 and ref["se"] == 0.0
        assert ref["n_treated"] == 0

    def test_unbiased_where_pooled_event_study_is_contaminated(self):
        # two cohorts with opposite effects: +1 at g=10, -1 at g=20
        events = [
            PlannedEvent(f"720{i:02d}", "1121", 10, Trigger.SMALL_TO_LARGE)
            for i in (1, 4, 7, 10, 13, 16)
        ] + [
            PlannedEvent(f"720{i:02d}", "2361", 20, Trigger.SMALL_TO_LARGE)
            for i in (2, 5, 8, 11, 14, 17)
        ]
        sim = simulate(DgpConfig(
            n_munis=18, n_industries=2, events=events,
            direct_by_industry={"1121": 1.0, "2361": -1.0},
            noise_sd=0.0, grid_cols=6, seed=2,
        ))
        sa = sa_iw_event_study(sim.panel, sim.cohorts, "log_covered_emp")
        post = sa.loc[sa["ell"] >= 0]
        # cohort shares are equal, so the share-weighted truth is exactly 0
        np.testing.assert_allclose(post["estimate"].to_numpy(), 0.0, atol=1e-8)

        naive = _pooled_event_study(sim.panel, sim.cohorts)
        overlap = [l for l in naive if 0 <= l <= 16]
        worst = max(abs(naive[l]) for l in overlap)
        assert worst > 0.05

    def test_reference_lead_requires_base_period(self, sparse_sim):
        sa = sa_iw_event_study(
            sparse_sim.panel, sparse_sim.cohorts, "log_covered_emp",
            balanced=False, ell_range=(-30, 0),
        )
        deep = sa.loc[sa["ell"] < -23]
        assert deep["estimate"].isna().all()


def _pooled_event_study(panel: pd.DataFrame, cohorts: pd.DataFrame) -> dict[int, float]:
    """Pooled TWFE event-study coefficients with a -1 reference."""
    df = panel.merge(cohorts[["geoid", "naics", "g"]], on=["geoid", "naics"])
    ell = (df["t"] - df["g"]).to_numpy()
    grid = [l for l in range(-8, 17) if l != -1]
    X = np.column_stack([(ell == l).astype(float) for l in grid])
    unit = (df["geoid"] + ":" + df["naics"]).to_numpy()
    y = two_way_demean(df["log_covered_emp"].to_numpy(), unit, df["t"].to_numpy())
    Xd = np.column_stack([
        two_way_demean(X[:, j], unit, df["t"].to_numpy())
        for j in range(X.shape[1])
    ])
    beta, *_ = np.linalg.lstsq(Xd, y, rcond=None)
    return dict(zip(grid, beta))
