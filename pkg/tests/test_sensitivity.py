"""Smoothness-bound, heterogeneity, and spatial-gate tests."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from entryspill.dgp import DgpConfig, grid_graph, simulate, spatial_noise
from entryspill.errors import NumericalError, ValidationError
from entryspill.sensitivity import (
    DEFAULT_M_GRID,
    heterogeneity_twfe,
    honest_sd_bounds,
    moran_gate,
)
from entryspill.spatial import build_weights


def _path(ells, pre_slope=0.0, post=0.3, noise=None):
    """Event-study path: linear pre trend, constant post effect."""
    ells = np.asarray(ells)
    beta = np.where(ells < 0, pre_slope * (ells + 3.0), post)
    if noise is not None:
        beta = beta + noise
    return beta.astype(float)


class TestHonestBounds:
    def test_m0_flat_pre_collapses_to_baseline_ci(self):
        ells = np.arange(-8, 17)
        beta = _path(ells, pre_slope=0.0, post=0.25)
        V = 0.01**2 * np.eye(ells.size)
        hb = honest_sd_bounds(ells, beta, V, m_grid=(0.0,))
        row = hb.bounds.iloc[0]
        assert row["M"] == 0.0
        assert row["lo"] == pytest.approx(hb.baseline_ci[0], abs=1e-8)
        assert row["hi"] == pytest.approx(hb.baseline_ci[1], abs=1e-8)

    def test_m0_linear_pretrend_shifts_by_extrapolated_trend(self):
        # with slope s fitted on the pre leads, M = 0 forces delta to the
        # extrapolated line, so the 0..16 target shifts by s * sum(e + 3)
        ells = np.arange(-8, 17)
        s = 0.004
        beta = _path(ells, pre_slope=s, post=0.25)
        V = 0.02**2 * np.eye(ells.size)
        hb = honest_sd_bounds(ells, beta, V, m_grid=(0.0,))
        shift = s * sum(e + 3 for e in range(0, 17))
        z = stats.norm.ppf(0.975)
        row = hb.bounds.iloc[0]
        mid = 0.5 * (row["lo"] + row["hi"])
        assert mid == pytest.approx(hb.target_estimate - shift, abs=1e-8)
        assert row["hi"] - row["lo"] == pytest.approx(
            2 * z * hb.target_se, abs=1e-8
        )

    def test_bounds_nest_as_m_grows(self):
        ells = np.arange(-8, 17)
        rng = np.random.default_rng(3)
        beta = _path(ells, pre_slope=0.002, post=0.2,
                     noise=0.01 * rng.standard_normal(ells.size))
        V = 0.02**2 * np.eye(ells.size)
        hb = honest_sd_bounds(ells, beta, V, m_grid=DEFAULT_M_GRID)
        lo = hb.bounds["lo"].to_numpy()
        hi = hb.bounds["hi"].to_numpy()
        assert np.all(np.diff(lo) <= 1e-9)
        assert np.all(np.diff(hi) >= -1e-9)

    def test_tiny_grid_matches_hand_lp_solution(self):
        # ells -3..1 with no anticipation: pinned delta = (-2s, -s, 0),
        # free (d0, d1) with |d0 - s| <= M and |d1 - 2 d0| <= M, so
        # d0 + d1 ranges over [3s - 4M, 3s + 4M]
        ells = np.array([-3, -2, -1, 0, 1])
        s = 0.02
        beta = np.array([-2 * s, -s, 0.0, 0.30, 0.35])
        sigma = 0.01
        V = sigma**2 * np.eye(5)
        w = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
        hb = honest_sd_bounds(
            ells, beta, V, target_weights=w, m_grid=(0.0, 0.05, 0.1),
            anticipation=0, target_name="both_posts",
        )
        target = 0.30 + 0.35
        se = np.sqrt(2) * sigma
        z = stats.norm.ppf(0.975)
        assert hb.target_estimate == pytest.approx(target, abs=1e-12)
        assert hb.target_se == pytest.approx(se, rel=1e-12)
        for _, row in hb.bounds.iterrows():
            M = row["M"]
            assert row["lo"] == pytest.approx(
                target - (3 * s + 4 * M) - z * se, abs=1e-6
            )
            assert row["hi"] == pytest.approx(
                target - (3 * s - 4 * M) + z * se, abs=1e-6
            )

    def test_frame_carries_target_label(self):
        ells = np.arange(-8, 17)
        beta = _path(ells, post=0.1)
        V = np.eye(ells.size) * 1e-4
        hb = honest_sd_bounds(ells, beta, V, target_name="cum_0_16")
        frame = hb.frame()
        assert (frame["target"] == "cum_0_16").all()
        assert list(frame.columns[:1]) == ["target"]
        assert len(frame) == len(DEFAULT_M_GRID)

    def test_validation_errors(self):
        ells = np.arange(-8, 17)
        beta = _path(ells, post=0.1)
        V = np.eye(ells.size) * 1e-4
        with pytest.raises(ValidationError, match="misaligned"):
            honest_sd_bounds(ells, beta[:-1], V)
        with pytest.raises(ValidationError, match="contiguous"):
            honest_sd_bounds(
                np.concatenate([[-10], ells[1:]]), beta, V
            )
        bad_V = V.copy()
        bad_V[0, 0] = -1.0
        with pytest.raises(ValidationError, match="positive semidefinite"):
            honest_sd_bounds(ells, beta, bad_V)
        short = np.arange(-4, 17)  # only two leads at or before -3
        with pytest.raises(ValidationError, match="pre-anticipation leads"):
            honest_sd_bounds(short, beta[: short.size],
                             V[: short.size, : short.size])
        with pytest.raises(ValidationError, match="nonnegative"):
            honest_sd_bounds(ells, beta, V, m_grid=(0.0, -0.01))
        with pytest.raises(ValidationError, match="align with the event grid"):
            honest_sd_bounds(ells, beta, V, target_weights=np.ones(3))
        with pytest.raises(ValidationError, match="no weight on post"):
            honest_sd_bounds(ells, beta, V,
                             target_weights=np.zeros(ells.size))
        nan_beta = beta.copy()
        nan_beta[0] = np.nan
        with pytest.raises(ValidationError, match="finite"):
            honest_sd_bounds(ells, nan_beta, V)


@pytest.fixture(scope="module")
def het_sim():
    """Direct effect differs by tradability: 0.2 tradable, 0.05 not."""
    cfg = DgpConfig(
        n_munis=18, n_industries=4, n_random_events=30,
        random_g_range=(12, 24),
        direct_by_industry={"1121": 0.2, "2111": 0.2,
                            "2361": 0.05, "4411": 0.05},
        noise_sd=0.02, grid_cols=6, seed=21,
    )
    return simulate(cfg)


@pytest.fixture(scope="module")
def het_table(het_sim):
    return heterogeneity_twfe(
        het_sim.panel, het_sim.cohorts, het_sim.exposure, het_sim.strata,
        "log_covered_emp", slices=((0, 4),),
    )


class TestHeterogeneity:
    def test_row_layout(self, het_table):
        t = het_table
        assert list(t.columns) == [
            "outcome", "slice", "stratum_var", "stratum", "parameter",
            "estimate", "se", "ci_lo", "ci_hi", "p", "unavailable",
            "q_bh", "q_by",
        ]
        assert (t["outcome"] == "log_covered_emp").all()
        assert (t["slice"] == "0-4").all()
        core = t[t["parameter"] != "TATT"]
        assert len(core) == 12  # 3 stratum vars x 2 levels x 2 params
        assert len(t[t["parameter"] == "TATT"]) == 6
        assert not t["unavailable"].any()

    def test_tatt_rows_sit_outside_fdr_family(self, het_table):
        tatt = het_table[het_table["parameter"] == "TATT"]
        core = het_table[het_table["parameter"] != "TATT"]
        assert tatt["q_bh"].isna().all()
        assert tatt["q_by"].isna().all()
        assert core["q_bh"].notna().all()
        assert (core["q_by"] >= core["q_bh"] - 1e-12).all()

    def test_tatt_is_sum_of_components(self, het_table):
        t = het_table.set_index(["stratum_var", "stratum", "parameter"])
        for var, lv in [("tradable", "tradable"), ("metro", "nonmetro"),
                        ("wage", "low")]:
            total = t.loc[(var, lv, "TATT"), "estimate"]
            datt = t.loc[(var, lv, "DATT"), "estimate"]
            satt = t.loc[(var, lv, "SATT_same"), "estimate"]
            assert total == datt + satt

    def test_recovers_planted_stratum_contrast(self, het_table):
        t = het_table.set_index(["stratum_var", "stratum", "parameter"])
        # tradable industries carry 0.2, nontradable 0.05; the wage-high
        # stratum coincides with tradable in this design
        for var, hi_lv, lo_lv in [("tradable", "tradable", "nontradable"),
                                  ("wage", "high", "low")]:
            assert t.loc[(var, hi_lv, "DATT"), "estimate"] == pytest.approx(
                0.2, abs=0.02
            )
            assert t.loc[(var, lo_lv, "DATT"), "estimate"] == pytest.approx(
                0.05, abs=0.02
            )
        # metro mixes both industry groups, so both levels land between
        for lv in ("metro", "nonmetro"):
            est = t.loc[("metro", lv, "DATT"), "estimate"]
            assert 0.03 < est < 0.22
        satt = t.xs("SATT_same", level="parameter")["estimate"]
        assert satt.abs().max() < 0.02  # no spillover was planted

    def test_missing_wage_level_is_flagged_unavailable(self, het_sim):
        strata = het_sim.strata.copy()
        strata.loc[strata["wage"] == "low", "wage"] = "unknown"
        t = heterogeneity_twfe(
            het_sim.panel, het_sim.cohorts, het_sim.exposure, strata,
            "log_covered_emp", slices=((0, 4),),
        )
        low = t[(t["stratum_var"] == "wage") & (t["stratum"] == "low")]
        assert set(low["parameter"]) == {"DATT", "SATT_same", "TATT"}
        assert low["unavailable"].all()
        assert low["estimate"].isna().all()
        hi = t[(t["stratum_var"] == "wage") & (t["stratum"] == "high")
               & (t["parameter"] == "DATT")]
        assert hi["estimate"].iloc[0] == pytest.approx(0.2, abs=0.02)

    def test_multiple_slices_stack(self, het_sim, het_table):
        t = heterogeneity_twfe(
            het_sim.panel, het_sim.cohorts, het_sim.exposure, het_sim.strata,
            "log_covered_emp", slices=((0, 4), (5, 8)),
        )
        assert set(t["slice"]) == {"0-4", "5-8"}
        assert len(t) == 2 * len(het_table)
        first = t[t["slice"] == "0-4"].reset_index(drop=True)
        pd.testing.assert_frame_equal(first, het_table)


@pytest.fixture(scope="module")
def gate_graph():
    return grid_graph(25, spacing_km=10.0, cols=5)


@pytest.fixture(scope="module")
def gate_weights(gate_graph):
    return build_weights(gate_graph, k=3)


def _resid_frame(weights, draws):
    """Stack a (T, n_munis) array into a geoid/t/resid frame."""
    rows = []
    for t in range(draws.shape[0]):
        for j, gid in enumerate(weights.nodes):
            rows.append((gid, t + 1, draws[t, j]))
    return pd.DataFrame(rows, columns=["geoid", "t", "resid"])


class TestMoranGate:
    def test_spatially_correlated_residuals_trigger_scpc(
        self, gate_graph, gate_weights
    ):
        coords = np.array(
            [gate_graph.centroids[g] for g in gate_weights.nodes]
        )
        draws, _ = spatial_noise(coords, range_km=50.0, sd=1.0, seed=3, size=8)
        gate = moran_gate(
            _resid_frame(gate_weights, draws), gate_weights,
            model_id="direct|emp", n_perm=499, seed=12,
        )
        assert gate.triggered
        assert gate.selected_method == "scpc"
        assert gate.p_value < 0.05
        assert gate.model_id == "direct|emp"
        assert gate.n_permutations == 499
        assert 0.0 <= gate.share_significant_quarters <= 1.0

    def test_iid_residuals_keep_cluster_inference(self, gate_weights):
        rng = np.random.default_rng(4)
        gate = moran_gate(
            _resid_frame(gate_weights, rng.standard_normal((8, 25))),
            gate_weights, n_perm=499, seed=12,
        )
        assert not gate.triggered
        assert gate.selected_method == "cluster"
        assert gate.p_value >= 0.05

    def test_same_seed_reproduces(self, gate_weights):
        rng = np.random.default_rng(8)
        frame = _resid_frame(gate_weights, rng.standard_normal((6, 25)))
        a = moran_gate(frame, gate_weights, n_perm=199, seed=5)
        b = moran_gate(frame, gate_weights, n_perm=199, seed=5)
        assert a.p_value == b.p_value
        assert a.statistic == b.statistic
        assert a.share_significant_quarters == b.share_significant_quarters

    def test_constant_quarter_is_dropped_with_flag(self, gate_weights):
        rng = np.random.default_rng(9)
        draws = rng.standard_normal((6, 25))
        draws[2, :] = 0.7
        gate = moran_gate(
            _resid_frame(gate_weights, draws), gate_weights,
            n_perm=199, seed=5,
        )
        assert any("constant-residual quarters dropped: [3]" in f
                   for f in gate.flags)
        assert np.isfinite(gate.p_value)

    def test_all_constant_quarters_raise(self, gate_weights):
        draws = np.full((4, 25), 1.25)
        with pytest.raises(NumericalError, match="constant residuals"):
            moran_gate(_resid_frame(gate_weights, draws), gate_weights,
                       n_perm=99)

    def test_missing_municipality_is_mean_filled_with_flag(self, gate_weights):
        rng = np.random.default_rng(10)
        frame = _resid_frame(gate_weights, rng.standard_normal((6, 25)))
        frame = frame[frame["geoid"] != "72013"]
        gate = moran_gate(frame, gate_weights, n_perm=99, seed=2)
        assert any("filled with quarter means" in f for f in gate.flags)

    def test_missing_columns_raise(self, gate_weights):
        bad = pd.DataFrame({"geoid": ["72001"], "resid": [0.1]})
        with pytest.raises(ValidationError, match="columns"):
            moran_gate(bad, gate_weights)
