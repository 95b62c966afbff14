"""Staged command-line pipeline with hashed artifact manifests.

Each stage reads the artifacts of earlier stages from a run directory,
writes its own output files, and records a manifest (seed, resolved
configuration, SHA-256 of every input and output). Outputs are plain CSV
and JSON with no timestamps, so rerunning a stage with the same inputs
and seed reproduces byte-identical files. Exit codes: 0 success,
2 validation error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse

from . import __version__
from .config import RunConfig
from .dgp import DgpConfig, PlannedEvent, simulate
from .did_direct import bjs_event_study, cs_event_study, sa_iw_event_study
from .drdid import PARAM_NAMES, estimate_all_slices
from .errors import (
    EntrySpillError,
    MissingArtifactError,
    NumericalError,
    ValidationError,
)
from .events import Trigger, assign_cohorts, compute_t3_thresholds
from .exposure import build_slice_table, compute_exposure, overlap_report
from .inference import scpc_se, shac_se, twoway_cluster_se, twoway_serial_se
from .panel import PRE_PERIOD_END, build_panel
from .sensitivity import heterogeneity_twfe, honest_sd_bounds, moran_gate
from .spatial import SpatialGraph, WeightsMatrix, build_weights

STR_COLS = {"geoid": str, "naics": str, "geoid_raw": str, "node": str,
            "node_a": str, "node_b": str}

# where each shared artifact is produced, for missing-dependency messages
_PRODUCERS = {
    "employment.csv": "simulate",
    "cpi.csv": "simulate",
    "metro.csv": "simulate",
    "centroids.csv": "simulate",
    "adjacency.csv": "simulate",
    "panel.csv": "ingest",
    "strata.csv": "ingest",
    "qindex.csv": "ingest",
    "weights_nodes.csv": "weights",
    "weights_edges.csv": "weights",
    "weights_meta.json": "weights",
    "cohorts.csv": "events",
    "t3_thresholds.csv": "events",
    "exposure_long.csv": "exposure",
    "exposure_slices.csv": "exposure",
    "overlap.csv": "exposure",
    "overlap_dist.csv": "exposure",
    "event_study.csv": "direct",
    "cumulative.csv": "direct",
    "sa_iw.csv": "direct",
    "path_cov.csv": "direct",
    "drdid_slices.csv": "drdid",
    "heterogeneity.csv": "heterogeneity",
    "inference.csv": "diagnose",
    "diagnostics.csv": "diagnose",
    "honest_bounds.csv": "diagnose",
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact(out_dir: Path, name: str) -> Path:
    path = out_dir / name
    if not path.exists():
        hint = _PRODUCERS.get(name)
        extra = f"; run the '{hint}' stage first" if hint else ""
        raise MissingArtifactError(f"missing artifact '{name}' in {out_dir}{extra}")
    return path


def _input_path(cfg: RunConfig, args, key: str, out_dir: Path) -> Path:
    """Resolve an external input: CLI flag, then config, then run dir."""
    val = getattr(args, key, None) or cfg.inputs.get(key)
    if val:
        path = Path(val)
        if not path.exists():
            raise MissingArtifactError(f"missing input file '{path}' for --{key}")
        return path
    return _artifact(out_dir, f"{key}.csv")


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False)
    return path


def _read_csv(path: Path) -> pd.DataFrame:
    cols = pd.read_csv(path, nrows=0).columns
    dtypes = {c: STR_COLS[c] for c in cols if c in STR_COLS}
    return pd.read_csv(path, dtype=dtypes)


def _warn_stale(inputs: dict[str, Path], out_dir: Path) -> None:
    recorded: dict[str, tuple[str, str]] = {}
    for mp in sorted(out_dir.glob("manifest_*.json")):
        try:
            man = json.loads(mp.read_text())
        except json.JSONDecodeError:
            continue
        for name, digest in man.get("outputs", {}).items():
            recorded[name] = (digest, man.get("stage", "?"))
    for path in inputs.values():
        hit = recorded.get(path.name)
        if hit is not None and _sha256(path) != hit[0]:
            print(
                f"warning: stale artifact '{path.name}': content changed since "
                f"the '{hit[1]}' stage wrote it",
                file=sys.stderr,
            )


def _write_manifest(
    stage: str, cfg: RunConfig, out_dir: Path,
    inputs: dict[str, Path], outputs: list[Path],
) -> Path:
    man = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed_for(stage),
        "config": cfg.to_dict(),
        "inputs": {p.name: _sha256(p) for p in inputs.values()},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out_dir / f"manifest_{stage}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _print_warnings(stage: str, warns: list[str]) -> None:
    for w in warns:
        print(f"[{stage}] warning: {w}", file=sys.stderr)


# ---------------------------------------------------------------- stages


def _dgp_from_config(cfg: RunConfig) -> DgpConfig:
    spec = dict(cfg.dgp)
    events = [
        PlannedEvent(
            str(e["geoid"]), str(e["naics"]), int(e["g"]),
            Trigger(str(e.get("trigger", "T2"))),
        )
        for e in spec.pop("events", [])
    ]
    if "random_trigger" in spec:
        spec["random_trigger"] = Trigger(str(spec["random_trigger"]))
    if spec.get("anticipation"):
        spec["anticipation"] = {
            int(k): float(v) for k, v in spec["anticipation"].items()
        }
    for key in ("start", "random_g_range"):
        if key in spec:
            spec[key] = tuple(spec[key])
    spec.setdefault("seed", cfg.seed_for("simulate"))
    try:
        return DgpConfig(events=events, **spec)
    except TypeError as exc:
        raise ValidationError(f"invalid dgp configuration: {exc}") from exc


def _stage_simulate(cfg: RunConfig, out_dir: Path, args):
    dgp_cfg = _dgp_from_config(cfg)
    sim = simulate(dgp_cfg)
    _print_warnings("simulate", sim.flags)

    centroids = pd.DataFrame(
        [(n, x, y) for n, (x, y) in sorted(sim.graph.centroids.items())],
        columns=["node", "x_m", "y_m"],
    )
    adjacency = pd.DataFrame(sim.graph.edges, columns=["node_a", "node_b"])
    metro = pd.DataFrame({
        "geoid": list(sim.metro_map),
        "metro": [int(v == "metro") for v in sim.metro_map.values()],
    })
    dgp_json = asdict(dgp_cfg)
    dgp_json["events"] = [
        {"geoid": e.geoid, "naics": e.naics, "g": e.g, "trigger": e.trigger.value}
        for e in dgp_cfg.events
    ]
    dgp_json["random_trigger"] = dgp_cfg.random_trigger.value
    cfg_path = out_dir / "dgp_config.json"
    cfg_path.write_text(json.dumps(dgp_json, indent=2, sort_keys=True) + "\n")

    outputs = [
        _write_csv(sim.raw_employment, out_dir / "employment.csv"),
        _write_csv(sim.cpi_monthly, out_dir / "cpi.csv"),
        _write_csv(centroids, out_dir / "centroids.csv"),
        _write_csv(adjacency, out_dir / "adjacency.csv"),
        _write_csv(metro, out_dir / "metro.csv"),
        _write_csv(sim.truth, out_dir / "truth.csv"),
        _write_csv(sim.cohorts, out_dir / "planned_cohorts.csv"),
        cfg_path,
    ]
    return {}, outputs


def _stage_ingest(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "employment": _input_path(cfg, args, "employment", out_dir),
        "cpi": _input_path(cfg, args, "cpi", out_dir),
        "metro": _input_path(cfg, args, "metro", out_dir),
    }
    raw = _read_csv(inputs["employment"])
    cpi = _read_csv(inputs["cpi"])
    metro = _read_csv(inputs["metro"])
    built = build_panel(raw, cpi, metro)
    outputs = [
        _write_csv(built.panel, out_dir / "panel.csv"),
        _write_csv(built.strata, out_dir / "strata.csv"),
        _write_csv(built.qindex, out_dir / "qindex.csv"),
    ]
    return inputs, outputs


def _stage_weights(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "centroids": _input_path(cfg, args, "centroids", out_dir),
        "adjacency": _input_path(cfg, args, "adjacency", out_dir),
    }
    cent = _read_csv(inputs["centroids"])
    adj = _read_csv(inputs["adjacency"])
    graph = SpatialGraph(
        nodes=cent["node"].tolist(),
        edges=[(a, b) for a, b in zip(adj["node_a"], adj["node_b"])],
        centroids={
            r.node: (float(r.x_m), float(r.y_m)) for r in cent.itertuples()
        },
    )
    wm = build_weights(graph, k=cfg.knn_k)
    coo = wm.w.tocoo()
    edges = pd.DataFrame({"row": coo.row, "col": coo.col, "weight": coo.data})
    nodes = pd.DataFrame({"order": range(wm.n), "node": wm.nodes})
    meta = {
        "n": wm.n,
        "s0": wm.s0,
        "k": cfg.knn_k,
        "repair_edges": [list(e) for e in wm.repair_edges],
    }
    meta_path = out_dir / "weights_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    outputs = [
        _write_csv(nodes, out_dir / "weights_nodes.csv"),
        _write_csv(edges, out_dir / "weights_edges.csv"),
        meta_path,
    ]
    return inputs, outputs


def _load_weights(out_dir: Path) -> WeightsMatrix:
    nodes_p = _artifact(out_dir, "weights_nodes.csv")
    edges_p = _artifact(out_dir, "weights_edges.csv")
    meta_p = _artifact(out_dir, "weights_meta.json")
    nodes = _read_csv(nodes_p).sort_values("order")["node"].tolist()
    e = _read_csv(edges_p)
    w = sparse.csr_matrix(
        (e["weight"].to_numpy(), (e["row"].to_numpy(), e["col"].to_numpy())),
        shape=(len(nodes), len(nodes)),
    )
    meta = json.loads(meta_p.read_text())
    repair = [tuple(x) for x in meta.get("repair_edges", [])]
    return WeightsMatrix(nodes=nodes, w=w, repair_edges=repair)


def _pre_period_end_t(qindex: pd.DataFrame) -> int:
    py, pq = PRE_PERIOD_END
    mask = (qindex["year"] < py) | (
        (qindex["year"] == py) & (qindex["quarter"] <= pq)
    )
    if not mask.any():
        raise ValidationError(
            f"quarter index has no quarters at or before {py}Q{pq}"
        )
    return int(qindex.loc[mask, "t"].max())


def _stage_events(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "panel": _artifact(out_dir, "panel.csv"),
        "qindex": _artifact(out_dir, "qindex.csv"),
    }
    panel = _read_csv(inputs["panel"])
    qindex = _read_csv(inputs["qindex"])
    thresholds = compute_t3_thresholds(panel, _pre_period_end_t(qindex))
    cohorts = assign_cohorts(panel, thresholds)
    thr = pd.DataFrame(
        sorted(thresholds.items()), columns=["naics", "threshold"]
    )
    outputs = [
        _write_csv(cohorts, out_dir / "cohorts.csv"),
        _write_csv(thr, out_dir / "t3_thresholds.csv"),
    ]
    return inputs, outputs


def _stage_exposure(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "panel": _artifact(out_dir, "panel.csv"),
        "cohorts": _artifact(out_dir, "cohorts.csv"),
        "weights_nodes": _artifact(out_dir, "weights_nodes.csv"),
        "weights_edges": _artifact(out_dir, "weights_edges.csv"),
    }
    panel = _read_csv(inputs["panel"])
    cohorts = _read_csv(inputs["cohorts"])
    wm = _load_weights(out_dir)
    exposure = compute_exposure(panel, cohorts, wm)
    slices = build_slice_table(
        exposure, cohorts, slices=cfg.slices, eps=cfg.epsilon,
        balanced=cfg.balanced,
    )
    summary, dists = overlap_report(slices)
    outputs = [
        _write_csv(exposure.to_long(), out_dir / "exposure_long.csv"),
        _write_csv(slices, out_dir / "exposure_slices.csv"),
        _write_csv(summary, out_dir / "overlap.csv"),
        _write_csv(dists, out_dir / "overlap_dist.csv"),
    ]
    return inputs, outputs


def _stage_direct(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "panel": _artifact(out_dir, "panel.csv"),
        "cohorts": _artifact(out_dir, "cohorts.csv"),
    }
    panel = _read_csv(inputs["panel"])
    cohorts = _read_csv(inputs["cohorts"])
    seed = cfg.seed_for("direct")
    paths, cumulatives, sa_frames, cov_rows = [], [], [], []
    for outcome in cfg.outcomes:
        for fit in (cs_event_study, bjs_event_study):
            res = fit(
                panel, cohorts, outcome, delta=cfg.delta,
                balanced=cfg.balanced, alpha=cfg.alpha, n_boot=cfg.n_boot,
                seed=seed, slices=cfg.slices,
            )
            _print_warnings("direct", res.warnings)
            paths.append(res.event_frame())
            cumulatives.append(
                res.cumulative.assign(outcome=outcome, estimator=res.estimator)
            )
            if res.path_cov is not None:
                L = len(res.ells)
                cov_rows.append(pd.DataFrame({
                    "outcome": outcome,
                    "estimator": res.estimator,
                    "ell_row": np.repeat(res.ells, L),
                    "ell_col": np.tile(res.ells, L),
                    "cov": res.path_cov.ravel(),
                }))
        sa = sa_iw_event_study(panel, cohorts, outcome, balanced=cfg.balanced)
        sa_frames.append(sa.assign(outcome=outcome))

    front = ["outcome", "estimator"]
    cum = pd.concat(cumulatives, ignore_index=True)
    cum = cum[front + [c for c in cum.columns if c not in front]]
    outputs = [
        _write_csv(pd.concat(paths, ignore_index=True), out_dir / "event_study.csv"),
        _write_csv(cum, out_dir / "cumulative.csv"),
        _write_csv(pd.concat(sa_frames, ignore_index=True), out_dir / "sa_iw.csv"),
        _write_csv(pd.concat(cov_rows, ignore_index=True), out_dir / "path_cov.csv"),
    ]
    return inputs, outputs


def _load_estimation_inputs(cfg: RunConfig, out_dir: Path):
    inputs = {
        "panel": _artifact(out_dir, "panel.csv"),
        "cohorts": _artifact(out_dir, "cohorts.csv"),
        "strata": _artifact(out_dir, "strata.csv"),
        "exposure_slices": _artifact(out_dir, "exposure_slices.csv"),
        "weights_nodes": _artifact(out_dir, "weights_nodes.csv"),
        "weights_edges": _artifact(out_dir, "weights_edges.csv"),
    }
    panel = _read_csv(inputs["panel"])
    cohorts = _read_csv(inputs["cohorts"])
    strata = _read_csv(inputs["strata"])
    wm = _load_weights(out_dir)
    exposure = compute_exposure(panel, cohorts, wm)
    return inputs, panel, cohorts, strata, wm, exposure


def _stage_drdid(cfg: RunConfig, out_dir: Path, args):
    inputs, panel, cohorts, strata, _, exposure = _load_estimation_inputs(
        cfg, out_dir
    )
    frames = []
    for outcome in cfg.outcomes:
        fits = estimate_all_slices(
            panel, cohorts, exposure, strata, outcome, cfg.slices,
            delta=cfg.delta, K=cfg.k_folds, seed=cfg.seed_for("drdid"),
            min_n=cfg.min_n, history_flavor=cfg.history_flavor,
            balanced=cfg.balanced, eps=cfg.epsilon,
        )
        frames.extend(est.to_frame() for est in fits.values())
    outputs = [
        _write_csv(pd.concat(frames, ignore_index=True), out_dir / "drdid_slices.csv"),
    ]
    return inputs, outputs


def _stage_heterogeneity(cfg: RunConfig, out_dir: Path, args):
    inputs, panel, cohorts, strata, _, exposure = _load_estimation_inputs(
        cfg, out_dir
    )
    frames = []
    for outcome in cfg.outcomes:
        frames.append(heterogeneity_twfe(
            panel, cohorts, exposure, strata, outcome, cfg.slices,
            delta=cfg.delta, alpha=cfg.alpha, balanced=cfg.balanced,
        ))
    outputs = [
        _write_csv(pd.concat(frames, ignore_index=True), out_dir / "heterogeneity.csv"),
    ]
    return inputs, outputs


def _honest_frames(cfg: RunConfig, out_dir: Path) -> pd.DataFrame:
    es = _read_csv(_artifact(out_dir, "event_study.csv"))
    pc = _read_csv(_artifact(out_dir, "path_cov.csv"))
    frames = []
    for outcome in cfg.outcomes:
        sub = es.loc[
            (es["outcome"] == outcome) & (es["estimator"] == "cs")
        ].sort_values("ell")
        sub = sub.loc[np.isfinite(sub["estimate"])]
        if sub.empty:
            continue
        ells = sub["ell"].to_numpy(dtype=int)
        cov_long = pc.loc[(pc["outcome"] == outcome) & (pc["estimator"] == "cs")]
        cov = (
            cov_long.pivot(index="ell_row", columns="ell_col", values="cov")
            .reindex(index=ells, columns=ells)
            .to_numpy(dtype=float)
        )
        try:
            hb = honest_sd_bounds(
                ells, sub["estimate"].to_numpy(dtype=float), cov,
                alpha=cfg.alpha, anticipation=cfg.delta,
            )
        except (ValidationError, NumericalError) as exc:
            _print_warnings("diagnose", [f"honest bounds for {outcome}: {exc}"])
            continue
        frame = hb.frame()
        frame.insert(0, "outcome", outcome)
        frame["alpha"] = hb.alpha
        frame["target_estimate"] = hb.target_estimate
        frame["target_se"] = hb.target_se
        frame["baseline_lo"], frame["baseline_hi"] = hb.baseline_ci
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=[
            "outcome", "target", "M", "lo", "hi", "alpha",
            "target_estimate", "target_se", "baseline_lo", "baseline_hi",
        ])
    return pd.concat(frames, ignore_index=True)


def _stage_diagnose(cfg: RunConfig, out_dir: Path, args):
    inputs, panel, cohorts, strata, wm, exposure = _load_estimation_inputs(
        cfg, out_dir
    )
    inputs["event_study"] = _artifact(out_dir, "event_study.csv")
    inputs["path_cov"] = _artifact(out_dir, "path_cov.csv")
    inputs["centroids"] = _artifact(out_dir, "centroids.csv")

    cent = _read_csv(inputs["centroids"]).set_index("node")
    coord_map = {
        n: (float(r.x_m) / 1000.0, float(r.y_m) / 1000.0)
        for n, r in cent.iterrows()
    }

    honest = _honest_frames(cfg, out_dir)

    gate_slice = (0, 16) if (0, 16) in cfg.slices else cfg.slices[-1]
    seed = cfg.seed_for("diagnose")
    infer_rows, gate_rows = [], []
    for outcome in cfg.outcomes:
        fits = estimate_all_slices(
            panel, cohorts, exposure, strata, outcome, cfg.slices,
            delta=cfg.delta, K=cfg.k_folds, seed=cfg.seed_for("drdid"),
            min_n=cfg.min_n, history_flavor=cfg.history_flavor,
            balanced=cfg.balanced, eps=cfg.epsilon,
        )
        for slc, est in fits.items():
            X, u = est.design, est.resid
            munis, anchors = est.cluster_ids, est.time_ids
            coords = np.asarray([coord_map[g] for g in munis])
            attempts = {
                "cluster": lambda: est.variance,
                "twoway": lambda: twoway_cluster_se(X, u, munis, anchors),
                "twoway_serial": lambda: twoway_serial_se(X, u, munis, anchors),
                "shac": lambda: shac_se(
                    X, u, coords, anchors, cutoff_km=cfg.shac_cutoff_km
                ),
                "scpc": lambda: scpc_se(
                    X, u, munis, coords, rho_bar=cfg.rho_bar, alpha=cfg.alpha
                ),
            }
            for method, run in attempts.items():
                try:
                    var = run()
                    ses = var.se[: len(PARAM_NAMES)]
                    flags = ";".join(var.flags)
                    params = json.dumps(var.params, sort_keys=True)
                    dof = str(var.dof)
                except EntrySpillError as exc:
                    ses = [np.nan] * len(PARAM_NAMES)
                    flags, params, dof = f"error: {exc}", "{}", ""
                for j, name in enumerate(PARAM_NAMES):
                    infer_rows.append((
                        outcome, f"{slc[0]}-{slc[1]}", name,
                        est.estimates[name], method, float(ses[j]),
                        dof, params, flags,
                    ))
            if slc == gate_slice:
                resid_frame = pd.DataFrame({
                    "geoid": munis, "t": anchors, "resid": u,
                })
                gate = moran_gate(
                    resid_frame, wm,
                    model_id=f"{outcome}:{slc[0]}-{slc[1]}",
                    n_perm=cfg.n_perm, seed=seed,
                )
                gate_rows.append((
                    gate.model_id, gate.statistic, gate.p_value,
                    int(gate.triggered), gate.selected_method,
                    gate.share_significant_quarters, gate.n_permutations,
                    gate.seed, ";".join(gate.flags),
                ))

    inference = pd.DataFrame(infer_rows, columns=[
        "outcome", "slice", "parameter", "estimate", "method", "se",
        "dof", "params", "flags",
    ])
    diagnostics = pd.DataFrame(gate_rows, columns=[
        "model_id", "statistic", "p_value", "triggered", "selected_method",
        "share_significant_quarters", "n_permutations", "seed", "flags",
    ])
    outputs = [
        _write_csv(inference, out_dir / "inference.csv"),
        _write_csv(diagnostics, out_dir / "diagnostics.csv"),
        _write_csv(honest, out_dir / "honest_bounds.csv"),
    ]
    return inputs, outputs


# ----------------------------------------------------------------- report


def _fmt_cell(est: float, se: float) -> str:
    if not np.isfinite(est):
        return "NA"
    if not np.isfinite(se):
        return f"{est:.3f}"
    return f"{est:.3f} ({se:.3f})"


def _md_table(headers: list[str], rows: list[list]) -> str:
    lines = [
        "| " + " | ".join(str(h) for h in headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    for row in rows:
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def _report_event_paths(es: pd.DataFrame) -> list[str]:
    parts = []
    for outcome in es["outcome"].unique():
        sub = es.loc[es["outcome"] == outcome]
        wide = {}
        for estimator in sub["estimator"].unique():
            block = sub.loc[sub["estimator"] == estimator].set_index("ell")
            wide[estimator] = block
        ells = sorted(sub["ell"].unique())
        headers = ["event time"] + list(wide)
        rows = []
        for ell in ells:
            row = [ell]
            for estimator, block in wide.items():
                if ell in block.index:
                    row.append(
                        _fmt_cell(block.at[ell, "estimate"], block.at[ell, "se"])
                    )
                else:
                    row.append("NA")
            rows.append(row)
        parts.append(f"### {outcome}\n\n" + _md_table(headers, rows))
    return parts


def _report_cumulative(cum: pd.DataFrame) -> str:
    combos = cum[["outcome", "estimator"]].drop_duplicates()
    headers = ["window"] + [
        f"{r.outcome} ({r.estimator})" for r in combos.itertuples()
    ]
    rows = []
    for slc in cum["slice"].unique():
        row = [slc]
        for r in combos.itertuples():
            hit = cum.loc[
                (cum["slice"] == slc) & (cum["outcome"] == r.outcome)
                & (cum["estimator"] == r.estimator)
            ]
            row.append(
                _fmt_cell(hit["estimate"].iloc[0], hit["se"].iloc[0])
                if len(hit) else "NA"
            )
        rows.append(row)
    return _md_table(headers, rows)


def _report_drdid(dr: pd.DataFrame) -> str:
    params = list(PARAM_NAMES) + ["SATT", "TATT"]
    headers = ["outcome", "window"] + params
    rows = []
    for (outcome, slc), grp in dr.groupby(["outcome", "slice"], sort=False):
        by_param = grp.set_index("parameter")
        row = [outcome, slc]
        for p in params:
            if p in by_param.index:
                row.append(_fmt_cell(
                    by_param.at[p, "estimate"], by_param.at[p, "se_cluster"]
                ))
            else:
                row.append("NA")
        rows.append(row)
    return _md_table(headers, rows)


def _report_overlap(ov: pd.DataFrame) -> str:
    headers = ["window", "channel", "raw", "trimmed", "% trimmed", "munis kept"]
    rows = []
    for r in ov.itertuples():
        trimmed = int(r.raw - r.kept)
        pct = f"{r.pct_trimmed:.1f}" if np.isfinite(r.pct_trimmed) else "NA"
        rows.append([r.slice, r.channel, int(r.raw), trimmed, pct, int(r.munis_kept)])
    return _md_table(headers, rows)


def _report_heterogeneity(het: pd.DataFrame) -> str:
    headers = [
        "outcome", "window", "stratum", "level", "parameter",
        "estimate (se)", "q (BH)",
    ]
    rows = []
    for r in het.itertuples():
        q = f"{r.q_bh:.3f}" if np.isfinite(r.q_bh) else "NA"
        rows.append([
            r.outcome, r.slice, r.stratum_var, r.stratum, r.parameter,
            _fmt_cell(r.estimate, r.se), q,
        ])
    return _md_table(headers, rows)


def _report_inference(inf: pd.DataFrame) -> str:
    methods = list(inf["method"].unique())
    headers = ["outcome", "window", "parameter", "estimate"] + [
        f"se ({m})" for m in methods
    ]
    rows = []
    grouped = inf.groupby(["outcome", "slice", "parameter"], sort=False)
    for (outcome, slc, param), grp in grouped:
        by_m = grp.set_index("method")
        row = [outcome, slc, param, f"{grp['estimate'].iloc[0]:.3f}"]
        for m in methods:
            if m in by_m.index and np.isfinite(by_m.at[m, "se"]):
                row.append(f"{by_m.at[m, 'se']:.3f}")
            else:
                row.append("NA")
        rows.append(row)
    return _md_table(headers, rows)


def _stage_report(cfg: RunConfig, out_dir: Path, args):
    inputs = {
        "event_study": _artifact(out_dir, "event_study.csv"),
        "cumulative": _artifact(out_dir, "cumulative.csv"),
        "drdid_slices": _artifact(out_dir, "drdid_slices.csv"),
        "overlap": _artifact(out_dir, "overlap.csv"),
    }
    es = _read_csv(inputs["event_study"])
    cum = _read_csv(inputs["cumulative"])
    dr = _read_csv(inputs["drdid_slices"])
    ov = _read_csv(inputs["overlap"])

    sections = ["# Entry spillover pipeline report", ""]
    sections += ["## Event-study paths", ""]
    sections += [p + "\n" for p in _report_event_paths(es)]
    sections += ["## Cumulative effects by horizon window", "",
                 _report_cumulative(cum), ""]
    sections += ["## Direct and spillover slice estimates", "",
                 _report_drdid(dr), ""]
    sections += ["## Exposure overlap and trimming", "",
                 _report_overlap(ov), ""]

    het_path = out_dir / "heterogeneity.csv"
    sections += ["## Heterogeneity by stratum", ""]
    if het_path.exists():
        inputs["heterogeneity"] = het_path
        het = _read_csv(het_path)
        sections += [_report_heterogeneity(het), ""]
    else:
        sections += [_report_heterogeneity(pd.DataFrame(columns=[
            "outcome", "slice", "stratum_var", "stratum", "parameter",
            "estimate", "se", "q_bh",
        ])), ""]

    inf_path = out_dir / "inference.csv"
    if inf_path.exists():
        inputs["inference"] = inf_path
        inf = _read_csv(inf_path)
        sections += ["## Variance estimator comparison", "",
                     _report_inference(inf), ""]

    hb_path = out_dir / "honest_bounds.csv"
    if hb_path.exists():
        inputs["honest_bounds"] = hb_path
        hb = _read_csv(hb_path)
        if len(hb):
            rows = [
                [r.outcome, f"{r.M:g}", f"[{r.lo:.3f}, {r.hi:.3f}]"]
                for r in hb.itertuples()
            ]
            sections += ["## Trend-restriction bounds on the cumulative effect", "",
                         _md_table(["outcome", "M", "bounds"], rows), ""]

    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(sections))
    return inputs, [report_path]


# ------------------------------------------------------------------- main

_STAGES = {
    "simulate": _stage_simulate,
    "ingest": _stage_ingest,
    "weights": _stage_weights,
    "events": _stage_events,
    "exposure": _stage_exposure,
    "direct": _stage_direct,
    "drdid": _stage_drdid,
    "heterogeneity": _stage_heterogeneity,
    "diagnose": _stage_diagnose,
    "report": _stage_report,
}

_STAGE_HELP = {
    "simulate": "draw a synthetic panel with known effects",
    "ingest": "build the quarterly panel from raw employment, CPI, and metro files",
    "weights": "build the row-standardized spatial weights matrix",
    "events": "detect entry events and assign treatment cohorts",
    "exposure": "compute spillover exposure channels and slice summaries",
    "direct": "estimate direct-effect event studies with uniform bands",
    "drdid": "estimate doubly robust direct and spillover slice effects",
    "heterogeneity": "estimate stratum-specific effects with FDR control",
    "diagnose": "compare variance estimators, bound trend violations, gate on spatial autocorrelation",
    "report": "render summary tables from the run directory",
}

_INPUT_FLAGS = {
    "ingest": ("employment", "cpi", "metro"),
    "weights": ("centroids", "adjacency"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entryspill",
        description="Staged pipeline for entry-event spillover estimation.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for name, help_text in _STAGE_HELP.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed override")
        sp.add_argument("--out-dir", dest="out_dir", default=".",
                        help="artifact directory")
        for flag in _INPUT_FLAGS.get(name, ()):
            sp.add_argument(f"--{flag}", default=None,
                            help=f"path to the {flag} input file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        inputs, outputs = _STAGES[args.stage](cfg, out_dir, args)
        if args.config:
            inputs = {"config": Path(args.config), **inputs}
        _warn_stale(inputs, out_dir)
        _write_manifest(args.stage, cfg, out_dir, inputs, outputs)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
