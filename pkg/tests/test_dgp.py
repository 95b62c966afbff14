"""Synthetic panel generator: determinism, bookkeeping, planted triggers."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from entryspill.dgp import (
    DgpConfig,
    PlannedEvent,
    grid_graph,
    simulate,
    spatial_noise,
)
from entryspill.errors import ValidationError
from entryspill.events import Trigger, assign_cohorts, compute_t3_thresholds
from entryspill.exposure import CHANNELS
from entryspill.panel import TRADABLE_SECTORS, build_panel


@pytest.fixture(scope="module")
def small_sim():
    cfg = DgpConfig(
        n_munis=12, n_industries=4, n_random_events=10,
        random_g_range=(12, 24), direct=0.15,
        satt={"same": 0.05, "cross": 0.02, "nall": 0.01},
        anticipation={-1: 0.04, -2: 0.01},
        noise_sd=0.03, grid_cols=4, seed=17,
    )
    return simulate(cfg)


class TestDeterminism:
    def test_same_seed_reproduces_everything(self, small_sim):
        again = simulate(small_sim.config)
        pd.testing.assert_frame_equal(small_sim.panel, again.panel)
        pd.testing.assert_frame_equal(small_sim.truth, again.truth)
        pd.testing.assert_frame_equal(small_sim.cohorts, again.cohorts)
        pd.testing.assert_frame_equal(
            small_sim.raw_employment, again.raw_employment
        )
        assert np.array_equal(
            small_sim.exposure.any_[CHANNELS[0]],
            again.exposure.any_[CHANNELS[0]],
        )

    def test_different_seed_changes_the_draw(self, small_sim):
        cfg = DgpConfig(**{**small_sim.config.__dict__, "seed": 18})
        other = simulate(cfg)
        assert not np.allclose(
            small_sim.panel["log_covered_emp"], other.panel["log_covered_emp"]
        )


class TestTruthBookkeeping:
    def test_outcome_decomposes_into_stored_components(self, small_sim):
        t = small_sim.truth
        parts = (
            t["y0"] + t["direct"] + t["anticipation"]
            + (t["spill_same"] + t["spill_cross"] + t["spill_nall"])
            + t["noise"]
        )
        np.testing.assert_allclose(parts, t["y"], rtol=0, atol=1e-12)

    def test_panel_outcomes_match_truth(self, small_sim):
        assert np.array_equal(
            small_sim.panel["log_covered_emp"].to_numpy(),
            small_sim.truth["y"].to_numpy(),
        )
        np.testing.assert_allclose(
            small_sim.panel["covered_emp"],
            np.exp(small_sim.truth["y"]),
            rtol=1e-12,
        )

    def test_direct_component_is_a_post_step(self, small_sim):
        t = small_sim.truth.merge(
            small_sim.cohorts[["geoid", "naics", "g"]], on=["geoid", "naics"]
        )
        ell = t["t"] - t["g"]
        post = ell >= 0
        treated = t["g"].notna()
        np.testing.assert_allclose(
            t.loc[treated & post, "direct"], 0.15, atol=1e-12
        )
        assert (t.loc[~(treated & post), "direct"] == 0).all()

    def test_anticipation_sits_at_the_configured_leads(self, small_sim):
        t = small_sim.truth.merge(
            small_sim.cohorts[["geoid", "naics", "g"]], on=["geoid", "naics"]
        )
        ell = t["t"] - t["g"]
        np.testing.assert_allclose(t.loc[ell == -1, "anticipation"], 0.04)
        np.testing.assert_allclose(t.loc[ell == -2, "anticipation"], 0.01)
        other = t["g"].isna() | (~ell.isin([-1, -2]))
        assert (t.loc[other, "anticipation"] == 0).all()

    def test_spillovers_scale_the_exposure_shares(self, small_sim):
        exp_same = small_sim.exposure.any_[CHANNELS[0]].reshape(-1)
        np.testing.assert_allclose(
            small_sim.truth["spill_same"], 0.05 * exp_same, atol=1e-12
        )
        exp_nall = small_sim.exposure.any_[CHANNELS[2]].reshape(-1)
        np.testing.assert_allclose(
            small_sim.truth["spill_nall"], 0.01 * exp_nall, atol=1e-12
        )

    def test_strata_follow_the_wage_and_sector_design(self, small_sim):
        strata = small_sim.strata
        expect_tradable = strata["naics"].str[:2].isin(TRADABLE_SECTORS)
        assert (strata["tradable"] == expect_tradable).all()
        # industries alternate tradable/nontradable, and wage levels
        # alternate high/low on the same index, so the two coincide here
        inds = small_sim.config.industries()
        high = {k for j, k in enumerate(inds) if j % 2 == 0}
        assert (
            strata["wage"] == np.where(strata["naics"].isin(high), "high", "low")
        ).all()
        metro = pd.Series(small_sim.metro_map)
        geoids = small_sim.config.geoids()
        assert (metro[geoids[::2]] == "metro").all()
        assert (metro[geoids[1::2]] == "nonmetro").all()

    def test_flat_cpi_makes_real_equal_nominal_wages(self):
        cfg = DgpConfig(n_munis=4, n_industries=2, noise_sd=0.0,
                        grid_cols=2, seed=1)
        sim = simulate(cfg)
        level = np.exp(
            sim.panel["log_total_wages_real_2020"]
            - sim.panel["log_covered_emp"]
        )
        by_ind = level.groupby(sim.panel["naics"]).agg(["min", "max"])
        np.testing.assert_allclose(by_ind["min"], by_ind["max"], rtol=1e-9)
        assert set(np.round(by_ind["min"], 6)) == {18000.0, 26000.0}
        assert (sim.cpi_monthly["value"] == 100.0).all()


@pytest.fixture(scope="module")
def planted():
    events = [
        PlannedEvent("72001", "1121", 12, Trigger.NEW_ENTRY),
        PlannedEvent("72002", "2361", 15, Trigger.SMALL_TO_LARGE),
        PlannedEvent("72003", "1121", 30, Trigger.TOP_DECILE_JUMP),
    ]
    cfg = DgpConfig(n_munis=6, n_industries=2, events=events,
                    noise_sd=0.05, grid_cols=3, seed=7)
    sim = simulate(cfg)
    metro_table = pd.DataFrame({
        "geoid": list(sim.metro_map),
        "metro": [int(v == "metro") for v in sim.metro_map.values()],
    })
    built = build_panel(sim.raw_employment, sim.cpi_monthly, metro_table)
    return sim, built


class TestPlantedFidelity:
    """The detection chain run on raw output recovers the planted events."""

    def test_detection_recovers_each_trigger(self, planted):
        sim, built = planted
        pre_t = 23
        thresholds = compute_t3_thresholds(built.panel, pre_t)
        found = assign_cohorts(built.panel, thresholds)
        found = found.set_index(["geoid", "naics"])
        for ev in sim.config.events:
            row = found.loc[(ev.geoid, ev.naics)]
            assert row["g"] == ev.g
            assert row["trigger"] == ev.trigger.value
        treated = found[found["g"].notna()]
        assert len(treated) == 3

    def test_detected_cohorts_match_simulated_table(self, planted):
        sim, built = planted
        thresholds = compute_t3_thresholds(built.panel, 23)
        found = assign_cohorts(built.panel, thresholds)
        cols = ["geoid", "naics", "g", "trigger", "balanced_window"]
        a = found[cols].sort_values(["geoid", "naics"]).reset_index(drop=True)
        b = (
            sim.cohorts[cols].sort_values(["geoid", "naics"])
            .reset_index(drop=True)
        )
        pd.testing.assert_frame_equal(a, b, check_dtype=False)
        # g=30 leaves no room for horizon +16 inside 45 quarters
        assert b.set_index(["geoid", "naics"]).loc[
            ("72003", "1121"), "balanced_window"
        ] == 0

    def test_ingestion_round_trips_the_outcome(self, planted):
        sim, built = planted
        merged = built.panel.merge(
            sim.panel[["geoid", "naics", "t", "log_covered_emp"]],
            on=["geoid", "naics", "t"], suffixes=("", "_sim"),
        )
        assert len(merged) == len(sim.panel)
        np.testing.assert_allclose(
            merged["log_covered_emp"], merged["log_covered_emp_sim"],
            rtol=0, atol=1e-12,
        )


class TestValidation:
    def test_new_entry_needs_a_lookback_window(self):
        ev = [PlannedEvent("72001", "1121", 8, Trigger.NEW_ENTRY)]
        with pytest.raises(ValidationError, match="leading zero"):
            simulate(DgpConfig(n_munis=4, n_industries=2, events=ev,
                               grid_cols=2))

    def test_jump_must_fire_after_the_threshold_window(self):
        ev = [PlannedEvent("72001", "1121", 24, Trigger.TOP_DECILE_JUMP)]
        with pytest.raises(ValidationError, match="jump trigger"):
            simulate(DgpConfig(n_munis=4, n_industries=2, events=ev,
                               grid_cols=2))

    def test_event_needs_a_following_quarter(self):
        ev = [PlannedEvent("72001", "1121", 45, Trigger.SMALL_TO_LARGE)]
        with pytest.raises(ValidationError, match="g\\+1"):
            simulate(DgpConfig(n_munis=4, n_industries=2, events=ev,
                               grid_cols=2))

    def test_duplicate_cell_events_raise(self):
        ev = [
            PlannedEvent("72001", "1121", 12, Trigger.SMALL_TO_LARGE),
            PlannedEvent("72001", "1121", 20, Trigger.SMALL_TO_LARGE),
        ]
        with pytest.raises(ValidationError, match="duplicate event"):
            simulate(DgpConfig(n_munis=4, n_industries=2, events=ev,
                               grid_cols=2))

    def test_event_outside_the_panel_raises(self):
        ev = [PlannedEvent("72099", "1121", 12, Trigger.SMALL_TO_LARGE)]
        with pytest.raises(ValidationError, match="outside the panel"):
            simulate(DgpConfig(n_munis=4, n_industries=2, events=ev,
                               grid_cols=2))

    def test_too_many_random_events_raise(self):
        with pytest.raises(ValidationError, match="free cells"):
            simulate(DgpConfig(n_munis=4, n_industries=2,
                               n_random_events=9, grid_cols=2))

    def test_config_bounds(self):
        with pytest.raises(ValidationError, match="positive"):
            DgpConfig(n_munis=0).validate()
        with pytest.raises(ValidationError, match="nonnegative"):
            DgpConfig(noise_sd=-0.1).validate()
        with pytest.raises(ValidationError, match="at most"):
            DgpConfig(n_industries=99).validate()


class TestSpatialNoise:
    def test_range_zero_is_iid_with_the_seed_stream(self):
        pts = np.array([[0.0, 0.0], [10_000.0, 0.0], [0.0, 20_000.0]])
        draws, repaired = spatial_noise(pts, range_km=0.0, sd=0.5,
                                        seed=11, size=4)
        z = np.random.default_rng(11).standard_normal((4, 3))
        assert np.array_equal(draws, 0.5 * z)
        assert not repaired
        assert draws.shape == (4, 3)

    def test_zero_sd_returns_zeros(self):
        pts = np.zeros((3, 2))
        draws, repaired = spatial_noise(pts, range_km=50.0, sd=0.0, seed=1)
        assert np.array_equal(draws, np.zeros((1, 3)))
        assert not repaired

    def test_correlation_decays_with_distance(self):
        pts = np.array([[0.0, 0.0], [10_000.0, 0.0], [10_000_000.0, 0.0]])
        draws, _ = spatial_noise(pts, range_km=100.0, sd=1.0,
                                 seed=11, size=4000)
        corr = np.corrcoef(draws.T)
        # cov is exp(-d_km / range): 10 km apart -> 0.905, far -> ~0
        assert corr[0, 1] == pytest.approx(np.exp(-0.1), abs=0.03)
        assert abs(corr[0, 2]) < 0.05
        sd = draws.std(axis=0)
        np.testing.assert_allclose(sd, 1.0, atol=0.05)

    def test_same_seed_reproduces(self):
        pts = np.array([[0.0, 0.0], [5_000.0, 5_000.0]])
        a, _ = spatial_noise(pts, range_km=30.0, sd=1.0, seed=6, size=5)
        b, _ = spatial_noise(pts, range_km=30.0, sd=1.0, seed=6, size=5)
        assert np.array_equal(a, b)

    def test_negative_range_raises(self):
        with pytest.raises(ValidationError, match=">= 0"):
            spatial_noise(np.zeros((2, 2)), range_km=-1.0, sd=1.0, seed=0)


class TestGridGraph:
    def test_rook_adjacency_and_meter_coordinates(self):
        g = grid_graph(6, spacing_km=10.0, cols=3)
        assert g.nodes == [f"72{i:03d}" for i in range(1, 7)]
        assert g.centroids["72001"] == (0.0, 0.0)
        assert g.centroids["72002"] == (10_000.0, 0.0)
        assert g.centroids["72004"] == (0.0, 10_000.0)
        edges = {frozenset(e) for e in g.edges}
        expected = {
            frozenset(p) for p in [
                ("72001", "72002"), ("72002", "72003"),
                ("72004", "72005"), ("72005", "72006"),
                ("72001", "72004"), ("72002", "72005"),
                ("72003", "72006"),
            ]
        }
        assert edges == expected

    def test_truncated_last_row(self):
        g = grid_graph(5, spacing_km=10.0, cols=3)
        assert len(g.nodes) == 5
        assert g.centroids["72005"] == (10_000.0, 10_000.0)
        edges = {frozenset(e) for e in g.edges}
        assert frozenset(("72004", "72005")) in edges
        assert not any("72006" in e for e in g.edges)
