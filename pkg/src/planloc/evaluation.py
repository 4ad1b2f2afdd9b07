"""Error metrics, experiment protocols and the report bundle.

A report bundle is a directory holding ``summary.json`` (metrics per
method), ``errors.csv`` (one row per method and estimate), ``cdf.csv``
(empirical error CDF per method) and ``manifest.json`` (config echo, seeds,
sample counts and checksums). Bundles contain no timestamps, so a rerun with
the same config and seed reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

import planloc
from planloc.baselines import baseline_trilateration, run_grid_filter
from planloc.config import ExperimentConfig
from planloc.dataset import apply_offsets, build_snapshots, estimate_offsets, load_ap_locations, MeasurementSnapshot
from planloc.floorplan import count_wall_crossings, load_floorplan
from planloc.fpdnn import (FpdnnConfig, desk_fpdnn_config, dump_pairs_csv, predict_pairs, refine_many,
                           save_fpdnn, snapshot_pairs, train_fpdnn)
from planloc.generator import (GenSample, desk_generator_config, free_space_grid, save_generator,
                               synthesize_scenario, train_generator, write_synthetic)
from planloc.gnn import GnnConfig, build_graph, gnn_forward, save_gnn, train_gnn
from planloc.localizer import LocalizationError, LocalizerConfig, kalman_step, least_squares
from planloc.scenarios import Scenario, get_scenario
from planloc.simworld import PropagationParams, generate_world_dataset

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class ErrorSummary:
    mae_m: float
    rmse_m: float
    median_m: float
    p90_m: float
    n_samples: int
    errors: tuple = field(default=(), repr=False)

    def as_dict(self):
        return {"mae_m": self.mae_m, "rmse_m": self.rmse_m, "median_m": self.median_m,
                "p90_m": self.p90_m, "n_samples": self.n_samples}


def summarize(errors):
    """Metrics of a list of per-sample errors; percentiles interpolate linearly (type 7)."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    med, p90 = np.percentile(e, [50, 90])
    return ErrorSummary(mae_m=float(np.mean(e)), rmse_m=float(np.sqrt(np.mean(e * e))),
                        median_m=float(med), p90_m=float(p90), n_samples=int(e.size),
                        errors=tuple(float(x) for x in e))


def compute_errors(estimates, truths):
    """Summary of Euclidean errors for ``estimates = [(m, t, (x, y)), ...]``.

    ``truths`` maps ``(m, t)`` to the true point; every estimate key must be
    present and vice versa.
    """
    keys = [(m, t) for m, t, _ in estimates]
    if len(set(keys)) != len(keys):
        raise KeyError("duplicate (m, t) estimate keys")
    if set(keys) != set(truths):
        missing = sorted(set(truths) - set(keys))[:5]
        extra = sorted(set(keys) - set(truths))[:5]
        raise KeyError(f"estimate/truth key mismatch (missing {missing}, unexpected {extra})")
    errs = [math.hypot(p[0] - truths[(m, t)][0], p[1] - truths[(m, t)][1]) for m, t, p in estimates]
    return summarize(errs)


# ---------------------------------------------------------------------------
# data preparation

@dataclass
class PlanData:
    label: str
    fp: object
    ap_locations: dict
    snapshots: list
    split_ms: float
    params: PropagationParams
    records: list = field(default_factory=list)
    world: object = None

    def split(self, interval_ms=200.0):
        cut = int(math.floor(self.split_ms / interval_ms + 1e-9))
        return [s for s in self.snapshots if s.t < cut], [s for s in self.snapshots if s.t >= cut]


def _subseed(seed, *key):
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


def _scenario_for(spec, ppm):
    if spec.scenario is not None:
        sc = get_scenario(spec.scenario)
        if spec.waypoints is not None:
            sc = replace(sc, lap=tuple(spec.waypoints))
        return sc, sc.floorplan(ppm)
    fp = load_floorplan(spec.raster, spec.meta)
    if abs(fp.pixels_per_meter - ppm) > 1e-9:
        raise ValueError(f"plan {spec.meta} has {fp.pixels_per_meter} px/m, experiment uses {ppm}")
    aps = load_ap_locations(spec.aps)
    sc = Scenario(Path(spec.meta).stem, tuple(map(tuple, fp.walls.tolist())), tuple(fp.extent_m), aps,
                  tuple(spec.waypoints))
    return sc, fp


def lap_start_ms(traj, lap_index, points_per_lap):
    pts = traj.path()
    i = min(lap_index * points_per_lap, len(pts) - 1)
    seg = np.hypot(*np.diff(pts[: i + 1], axis=0).T) if i > 0 else np.zeros(0)
    return float(seg.sum() / traj.speed_mps * 1000.0)


def simulate_plan(spec, ppm, seed, split_lap):
    """Simulated measurements for one plan; ``split_ms`` is the start of lap ``split_lap``."""
    sc, fp = _scenario_for(spec, ppm)
    params = PropagationParams(**dict(spec.sim))
    trajs = sc.trajectories(laps=spec.laps, speed_mps=spec.speed_mps, jitter_m=spec.jitter_m,
                            seed=_subseed(seed, 1), n_md=spec.n_md)
    ds = generate_world_dataset(fp, sc.ap_locations, trajs, params, seed=_subseed(seed, 2),
                                max_ap_links=dict(spec.max_ap_links))
    records = ds.all_records()
    split = lap_start_ms(trajs[1], split_lap, len(sc.lap))
    return PlanData(label=spec.label, fp=fp, ap_locations=dict(sc.ap_locations),
                    snapshots=build_snapshots(records), split_ms=split, params=params, records=records, world=ds)


def calibrate(plan, train_snaps):
    """Estimate offsets on training snapshots, apply to all snapshots of the plan."""
    recs = [r for s in train_snaps for rs in s.records.values() for r in rs]
    table = estimate_offsets(recs, plan.ap_locations)
    out = []
    for s in plan.snapshots:
        out.append(MeasurementSnapshot(t=s.t, records={m: apply_offsets(rs, table) for m, rs in s.records.items()},
                                       ground_truth=dict(s.ground_truth)))
    plan.snapshots = out
    return table


# ---------------------------------------------------------------------------
# training helpers

def _gnn_cfg(cfg, extra=()):
    d = cfg.overrides("gnn")
    d.update(dict(extra))
    return GnnConfig(**d)


def _fpdnn_cfg(cfg, plans):
    scale = max(p.fp.diameter_m for p in plans)
    d = cfg.overrides("fpdnn")
    return desk_fpdnn_config(scale, max_distance_m=scale + 2.0, pixels_per_meter=cfg.pixels_per_meter, **d)


def _pairs_for(plans_snaps_coarse, fcfg):
    pairs = []
    for plan, snaps, coarse in plans_snaps_coarse:
        for i, (s, c) in enumerate(zip(snaps, coarse)):
            p, _ = snapshot_pairs(s, c, plan.fp, plan.ap_locations, fcfg, snap_index=i)
            pairs.extend(q for q in p if q.d_true > 0)
    return pairs


def _subsample(items, n, seed):
    if len(items) <= n:
        return list(items)
    idx = np.sort(np.random.default_rng(seed).choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


def _graphs(plan, snaps):
    return [build_graph(s, plan.ap_locations, plan.fp) for s in snaps]


def fit_models(cfg, train_sets, seed, stages, gnn_model=None, fpdnn_model=None, fine_tune=False):
    """Train (or continue training) the GNN, then the FPDNN on crops cut at the GNN's estimates.

    ``train_sets`` is a list of ``(plan, snapshots)``.
    """
    ft = cfg.overrides("fine_tune") if fine_tune else {}
    gnn, fpdnn = gnn_model, None
    graphs = [(p, s, _graphs(p, s)) for p, s in train_sets]
    if stages.gnn:
        flat = [g for _, _, gs in graphs for g in gs][:: 1 if fine_tune else cfg.train_stride]
        gcfg = _gnn_cfg(cfg, {k[4:]: v for k, v in ft.items() if k.startswith("gnn_")})
        gnn = train_gnn(flat, gcfg, seed=_subseed(seed, 3), model=gnn_model)
    if stages.fpdnn:
        coarse = []
        for p, s, gs in graphs:
            c = gnn_forward(gs, gnn) if gnn is not None else [g.h0 for g in gs]
            coarse.append((p, [snap for snap, g in zip(s, gs)], c))
        fcfg = fpdnn_model.cfg if fpdnn_model is not None else _fpdnn_cfg(cfg, [p for p, _ in train_sets])
        over = {k[6:]: v for k, v in ft.items() if k.startswith("fpdnn_")}
        if over:
            fcfg = replace(fcfg, **over)
        pairs = _subsample(_pairs_for(coarse, fcfg), cfg.max_fpdnn_pairs, _subseed(seed, 4))
        fpdnn = train_fpdnn(pairs, fcfg, seed=_subseed(seed, 5), model=fpdnn_model)
    return gnn, fpdnn


# ---------------------------------------------------------------------------
# evaluation

def _kf_series(rows, lcfg):
    """Kalman-smooth ``[(plan, m, t, est, truth)]`` per (plan, MD) in time order."""
    out, tracks = [], {}
    for plan, m, t, est, truth in sorted(rows, key=lambda r: (r[0], r[1], r[2])):
        key = (plan, m)
        tracks[key] = kalman_step(tracks.get(key), est, lcfg, t_ms=t * lcfg.dt * 1000.0)
        out.append((plan, m, t, tracks[key].position, truth))
    return out


def evaluate_plan(plan, snaps, gnn, fpdnn, cfg, prefix="", pair_dump=None):
    """Estimates per method on test snapshots: ``{method: [(plan, m, t, est, truth)]}``."""
    lcfg = LocalizerConfig(**cfg.overrides("localizer"))
    graphs = _graphs(plan, snaps)
    methods = {}
    rows = []
    for s, g in zip(snaps, graphs):
        tri = baseline_trilateration(s, plan.ap_locations, sequential=cfg.sequential_baseline)
        for m in g.md_ids:
            rows.append((plan.label, m, s.t, np.asarray(tri.get(m, g.h0[m]), dtype=np.float64), g.truths[m]))
    if not prefix:
        methods["trilateration"] = rows
    if cfg.stages.bayes_grid and not prefix:
        est = run_grid_filter(snaps, plan.fp, plan.ap_locations)
        methods["bayes_grid"] = [(plan.label, m, s.t, e[m] if m in e else g.h0[m], g.truths[m])
                                 for s, g, e in zip(snaps, graphs, est) for m in g.md_ids]
    coarse = gnn_forward(graphs, gnn) if gnn is not None else [g.h0 for g in graphs]
    if gnn is not None:
        methods[prefix + "GNN"] = [(plan.label, m, g.t, c[m], g.truths[m]) for g, c in zip(graphs, coarse)
                                   for m in g.md_ids]
        if cfg.stages.kf:
            methods[prefix + "GNN+KF"] = _kf_series(methods[prefix + "GNN"], lcfg)
    if fpdnn is not None:
        refined = refine_many(snaps, coarse, plan.fp, plan.ap_locations, fpdnn)
        fr = []
        for g, c, (dist, _) in zip(graphs, coarse, refined):
            for m in g.md_ids:
                d = {k: v for (mm, k), v in dist.items() if mm == m}
                try:
                    est = least_squares(d, plan.ap_locations, refine=lcfg.gauss_newton)
                except LocalizationError:
                    est = np.asarray(c[m], dtype=np.float64)
                fr.append((plan.label, m, g.t, est, g.truths[m]))
        name = prefix + ("GNN+FPDNN" if gnn is not None else "FPDNN")
        methods[name] = fr
        if cfg.stages.kf:
            methods[name + "+KF"] = _kf_series(fr, lcfg)
        if pair_dump is not None:
            pairs = []
            for i, (s, c) in enumerate(zip(snaps, coarse)):
                p, _ = snapshot_pairs(s, c, plan.fp, plan.ap_locations, fpdnn.cfg, snap_index=i)
                pairs.extend(replace(q, walls=count_wall_crossings(plan.fp, s.ground_truth[q.key[1]], q.ap))
                             for q in p)
            dump_pairs_csv(pair_dump, pairs, predict_pairs(pairs, fpdnn) if pairs else [])
    return methods


def _merge(into, methods):
    for k, v in methods.items():
        into.setdefault(k, []).extend(v)


# ---------------------------------------------------------------------------
# protocols

def prepare_plans(cfg):
    """Simulate every plan and split it by lap; returns ``(train_sets, test_sets)``."""
    train_sets, test_sets = [], []
    for i, spec in enumerate(cfg.plans):
        if spec.laps <= cfg.test_laps:
            raise ValueError(f"plan {spec.label} needs more than test_laps={cfg.test_laps} laps")
        plan = simulate_plan(spec, cfg.pixels_per_meter, _subseed(cfg.seed, 10, i), spec.laps - cfg.test_laps)
        train, _ = plan.split()
        if cfg.calibrate:
            calibrate(plan, train)
        train, test = plan.split()
        train_sets.append((plan, train))
        test_sets.append((plan, test))
    return train_sets, test_sets


def _train_real(cfg, out):
    train_sets, test_sets = prepare_plans(cfg)
    gnn, fpdnn = fit_models(cfg, train_sets, cfg.seed, cfg.stages)
    ckpt = _save_models(out, gnn, fpdnn)
    methods = {}
    for plan, test in test_sets:
        _merge(methods, evaluate_plan(plan, test, gnn, fpdnn, cfg,
                                      pair_dump=out / f"pairs_{plan.label}.csv" if fpdnn else None))
    info = {"train_snapshots": {p.label: len(s) for p, s in train_sets},
            "test_snapshots": {p.label: len(s) for p, s in test_sets},
            "real_target_training_samples": int(sum(len(s) for _, s in train_sets))}
    return methods, ckpt, info


def synthetic_snapshots(ds):
    return [MeasurementSnapshot(t=i, records={1: row}, ground_truth={1: tuple(map(float, p))})
            for i, (row, p) in enumerate(zip(ds.rows, ds.points)) if row]


def fit_generator(cfg, out):
    """Train the generator on the source plan; returns ``(model, checkpoint sha256, n_samples)``."""
    src = simulate_plan(cfg.source, cfg.pixels_per_meter, _subseed(cfg.seed, 20), cfg.source.laps)
    samples = [GenSample(src.fp, tuple(r.ground_truth), tuple(src.ap_locations[r.peer_id]), r.rtt_m, r.rss_dbm)
               for r in src.records if r.peer_kind == "ap"]
    samples = _subsample(samples, cfg.max_generator_samples, _subseed(cfg.seed, 21))
    gcfg = desk_generator_config(src.fp.diameter_m, max_distance_m=src.fp.diameter_m + 2.0,
                                 pixels_per_meter=cfg.pixels_per_meter, **cfg.overrides("generator"))
    gen = train_generator(samples, gcfg, seed=_subseed(cfg.seed, 22))
    return gen, save_generator(Path(out) / "generator.ckpt", gen), len(samples)


def target_plan(cfg):
    """The target plan's simulated measurements, split after the fine-tuning share of laps."""
    ft_laps = max(1, int(round(cfg.fine_tune_fraction * cfg.target.laps)))
    if ft_laps >= cfg.target.laps:
        raise ValueError("target plan needs more laps than the fine-tuning share")
    return simulate_plan(cfg.target, cfg.pixels_per_meter, _subseed(cfg.seed, 30), ft_laps)


def synthesize_target(cfg, tgt, gen, gen_hash, out=None):
    """Synthetic measurements on a free-space grid of the target plan, as a :class:`PlanData`."""
    grid = free_space_grid(tgt.fp, cfg.grid_pitch_m)
    syn = synthesize_scenario(tgt.fp, tgt.ap_locations, grid, gen, seed=_subseed(cfg.seed, 31),
                              sigma_rtt_m=cfg.sigma_aug_rtt_m, sigma_rss_db=cfg.sigma_aug_rss_db,
                              checkpoint_hash=gen_hash, source_plan=cfg.source.label)
    if out is not None:
        write_synthetic(syn, Path(out) / "synthetic")
    return PlanData(label=tgt.label, fp=tgt.fp, ap_locations=tgt.ap_locations,
                    snapshots=synthetic_snapshots(syn), split_ms=0.0, params=tgt.params)


def _transfer(cfg, out):
    gen, gen_hash, n_gen = fit_generator(cfg, out)
    tgt = target_plan(cfg)
    syn_plan = synthesize_target(cfg, tgt, gen, gen_hash, out)
    gnn, fpdnn = fit_models(cfg, [(syn_plan, syn_plan.snapshots)], _subseed(cfg.seed, 32), cfg.stages)
    ckpt = {"generator": gen_hash, **_save_models(out, gnn, fpdnn, suffix="_zeroshot")}
    ft_snaps, test = tgt.split()
    methods = evaluate_plan(tgt, test, None, None, cfg)
    _merge(methods, evaluate_plan(tgt, test, gnn, fpdnn, cfg, prefix="zero-shot:"))
    info = {"synthetic_points": len(syn_plan.snapshots), "generator_training_samples": n_gen,
            "test_snapshots": {tgt.label: len(test)}, "real_target_training_samples": 0}
    if cfg.protocol == "fine-tune":
        gnn2, fpdnn2 = fit_models(cfg, [(tgt, ft_snaps)], _subseed(cfg.seed, 33), cfg.stages,
                                  gnn_model=gnn, fpdnn_model=fpdnn, fine_tune=True)
        ckpt.update(_save_models(out, gnn2, fpdnn2, suffix="_finetuned"))
        _merge(methods, evaluate_plan(tgt, test, gnn2, fpdnn2, cfg, prefix="fine-tune:"))
        info["real_target_training_samples"] = len(ft_snaps)
    return methods, ckpt, info


def _save_models(out, gnn, fpdnn, suffix=""):
    ck = {}
    if gnn is not None:
        ck["gnn" + suffix] = save_gnn(out / f"gnn{suffix}.ckpt", gnn)
    if fpdnn is not None:
        ck["fpdnn" + suffix] = save_fpdnn(out / f"fpdnn{suffix}.ckpt", fpdnn)
    return ck


# ---------------------------------------------------------------------------
# bundle

def _r(x):
    return repr(float(x))


def write_bundle(out, cfg, methods, checkpoints, info):
    out = Path(out)
    summary = {"experiment": cfg.name, "protocol": cfg.protocol, "seed": cfg.seed, "methods": {}}
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "plan", "m", "t", "x_hat", "y_hat", "x", "y", "error"])
        for name, rows in methods.items():
            rows = sorted(rows, key=lambda r: (r[0], r[1], r[2]))
            errs = []
            for plan, m, t, est, truth in rows:
                e = math.hypot(est[0] - truth[0], est[1] - truth[1])
                errs.append(e)
                w.writerow([name, plan, m, t, _r(est[0]), _r(est[1]), _r(truth[0]), _r(truth[1]), _r(e)])
            entry = summarize(errs).as_dict()
            for group, idx in (("per_plan", 0), ("per_md", 1)):
                entry[group] = {}
                for key in sorted({r[idx] for r in rows}, key=str):
                    sub = [e for r, e in zip(rows, errs) if r[idx] == key]
                    entry[group][str(key)] = summarize(sub).as_dict()
            summary["methods"][name] = entry
            methods[name] = rows
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_cdf(out / "cdf.csv", methods)
    manifest = {
        "config": cfg.to_dict(), "seed": cfg.seed, "protocol": cfg.protocol,
        "package_version": planloc.__version__, "numpy_version": np.__version__,
        "checkpoints_sha256": checkpoints, "samples": info,
        "outputs_sha256": {n: hashlib.sha256((out / n).read_bytes()).hexdigest()
                           for n in ("summary.json", "errors.csv", "cdf.csv")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return summary


def write_cdf(path, methods):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "error", "cumulative_fraction"])
        for name, rows in methods.items():
            errs = sorted(math.hypot(r[3][0] - r[4][0], r[3][1] - r[4][1]) for r in rows)
            n = len(errs)
            for i, e in enumerate(errs):
                w.writerow([name, _r(e), _r((i + 1) / n)])


def read_errors_csv(path):
    """``{method: [error, ...]}`` from a bundle's ``errors.csv``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["method"], []).append(float(row["error"]))
    return out


def cdf_from_errors(errors_path, cdf_path):
    errs = read_errors_csv(errors_path)
    with open(cdf_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "error", "cumulative_fraction"])
        for name, e in errs.items():
            e = sorted(e)
            for i, x in enumerate(e):
                w.writerow([name, _r(x), _r((i + 1) / len(e))])
    return {k: summarize(v) for k, v in errs.items()}


def run_experiment(cfg: ExperimentConfig, out_dir):
    """Run the configured protocol end to end and write the report bundle to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.protocol == "train-real":
        methods, ckpt, info = _train_real(cfg, out)
    else:
        methods, ckpt, info = _transfer(cfg, out)
    return write_bundle(out, cfg, methods, ckpt, info)


def format_table(summary):
    lines = [f"{'method':<28} {'MAE':>7} {'RMSE':>7} {'median':>7} {'p90':>7} {'n':>6}"]
    for name, s in summary["methods"].items():
        lines.append(f"{name:<28} {s['mae_m']:7.3f} {s['rmse_m']:7.3f} {s['median_m']:7.3f} "
                     f"{s['p90_m']:7.3f} {s['n_samples']:6d}")
    return "\n".join(lines)
