"""Shared fixtures: planted simulations reused across test modules."""

from __future__ import annotations

import pytest

from entryspill.dgp import DgpConfig, simulate


@pytest.fixture(scope="session")
def sparse_sim():
    """Balanced planted cohorts, homogeneous direct effect, zero noise."""
    cfg = DgpConfig(
        n_munis=24,
        n_industries=4,
        n_random_events=16,
        random_g_range=(12, 24),
        direct=0.30,
        noise_sd=0.0,
        grid_cols=6,
        seed=5,
    )
    return simulate(cfg)


@pytest.fixture(scope="session")
def noisy_sim():
    """Moderate-noise draw for banding and inference behavior."""
    cfg = DgpConfig(
        n_munis=24, n_industries=4, n_random_events=16,
        random_g_range=(12, 24), direct=0.30, noise_sd=0.05,
        grid_cols=6, seed=9,
    )
    return simulate(cfg)


@pytest.fixture(scope="session")
def dense_sim():
    """Dense treatment so every exposure channel has interior support.

    About a third of the cells are treated, which keeps treated rows
    inside the two-sided trimming interval on all three channels.
    """
    cfg = DgpConfig(
        n_munis=40,
        n_industries=8,
        n_random_events=120,
        random_g_range=(12, 24),
        direct=0.10,
        satt={"same": 0.05, "cross": 0.02, "nall": 0.03},
        noise_sd=0.0,
        grid_cols=8,
        seed=11,
    )
    return simulate(cfg)
