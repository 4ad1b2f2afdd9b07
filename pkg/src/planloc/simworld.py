"""Geometric virtual world: trajectories and RTT/RSS measurements on a floor plan.

Propagation uses a log-distance path-loss law with a fixed attenuation per
wall crossing for RSS, and a positive per-wall range bias for RTT.

Randomness contract: every stream is drawn from
``np.random.SeedSequence(seed, spawn_key=key)`` where ``key`` identifies the
link (``(md, 0, ap)`` for AP links, ``(m, 1, n)`` with ``m < n`` for
device-to-device links). A stream covers all sample times of its link, so
results do not depend on the order in which links are simulated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from planloc.dataset import MeasurementRecord, save_ap_locations, write_measurement_csv
from planloc.floorplan import wall_crossings_many


@dataclass(frozen=True)
class PropagationParams:
    rss0_dbm: float = -40.0
    path_loss_exponent: float = 2.2
    wall_rss_loss_db: float = 6.0
    rtt_noise_std_m: float = 0.3
    rtt_wall_bias_m: float = 1.5
    rss_noise_std_db: float = 2.0
    connection_rss_floor_dbm: float = -85.0
    rtt_offset_m: float = 0.0

    def __post_init__(self):
        for name in ("wall_rss_loss_db", "rtt_noise_std_m", "rtt_wall_bias_m", "rss_noise_std_db"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.path_loss_exponent > 0:
            raise ValueError("path_loss_exponent must be positive")

    @classmethod
    def noiseless(cls, **kw):
        base = dict(rtt_noise_std_m=0.0, rss_noise_std_db=0.0, rtt_wall_bias_m=0.0,
                    wall_rss_loss_db=0.0)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class Trajectory:
    waypoints: tuple
    speed_mps: float = 0.5
    sample_interval_ms: float = 200.0
    closed: bool = False
    laps: int = 1

    def __post_init__(self):
        pts = np.asarray(self.waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a trajectory needs at least two 2-D waypoints")
        if np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            raise ValueError("consecutive waypoints must be distinct")
        if not (self.speed_mps > 0 and self.sample_interval_ms > 0):
            raise ValueError("speed and sample interval must be positive")
        object.__setattr__(self, "waypoints", tuple(map(tuple, pts.tolist())))

    def path(self):
        pts = list(self.waypoints)
        if self.closed and pts[0] != pts[-1]:
            pts = pts + [pts[0]]
        lap = pts
        for _ in range(self.laps - 1):
            lap = lap + (pts[1:] if pts[0] == pts[-1] else pts)
        return np.asarray(lap, dtype=np.float64)


def sample_trajectory(traj):
    """``(t_ms, xy)`` samples at constant speed every ``sample_interval_ms``, both ends included."""
    pts = traj.path()
    seg = np.hypot(*np.diff(pts, axis=0).T)
    total = float(seg.sum())
    if total <= 0:
        raise ValueError("zero-length trajectory")
    duration_ms = total / traj.speed_mps * 1000.0
    n = int(math.floor(duration_ms / traj.sample_interval_ms + 1e-9))
    times = np.arange(n + 1) * traj.sample_interval_ms
    if duration_ms - times[-1] > 1e-6:
        times = np.append(times, duration_ms)
    s = np.minimum(times / 1000.0 * traj.speed_mps, total)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    xs = np.interp(s, cum, pts[:, 0])
    ys = np.interp(s, cum, pts[:, 1])
    return times, np.stack([xs, ys], axis=1)


def _link_rng(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def simulate_links(walls, a, b, params, rng):
    """Vectorized link model. Returns ``(rtt, rss, reachable, wall_count)`` arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d = np.hypot(*(a - b).T)
    if np.any(d <= 0):
        raise ValueError("coincident link endpoints")
    w = wall_crossings_many(walls, a, b)
    n = len(d)
    rtt_noise = rng.normal(0.0, params.rtt_noise_std_m, n)
    rss_noise = rng.normal(0.0, params.rss_noise_std_db, n)
    rss = (params.rss0_dbm - 10.0 * params.path_loss_exponent * np.log10(d)
           - w * params.wall_rss_loss_db + rss_noise)
    rtt = np.maximum(d + w * params.rtt_wall_bias_m + params.rtt_offset_m + rtt_noise, 0.0)
    return rtt, rss, rss >= params.connection_rss_floor_dbm, w


def simulate_measurement(fp, a, b, params, rng_seed):
    """One link measurement ``(rtt_m, rss_dbm, reachable)`` between points ``a`` and ``b``."""
    rng = np.random.default_rng(rng_seed)
    rtt, rss, ok, _ = simulate_links(fp.walls, [a], [b], params, rng)
    return float(rtt[0]), float(rss[0]), bool(ok[0])


@dataclass
class WorldDataset:
    """Simulated measurements: rows of AP records and device-to-device records per MD."""

    ap_rows: dict
    md_rows: dict
    times_ms: np.ndarray
    truths: dict
    link_info: list = field(default_factory=list)
    ap_locations: dict = field(default_factory=dict)

    def all_records(self):
        out = []
        for m in sorted(self.ap_rows):
            for row in self.ap_rows[m]:
                out.extend(row)
            for row in self.md_rows.get(m, []):
                out.extend(row)
        return out


def generate_world_dataset(fp, ap_locations, trajectories, params, seed, md_links=True,
                           max_ap_links=None):
    """Simulate every (MD, peer) link at every common sample time.

    ``trajectories`` maps MD id to :class:`Trajectory`; all must share one
    sample interval, and the common time grid is truncated to the shortest.
    Device-to-device records are emitted only for line-of-sight pairs and
    appear, with identical values, in both devices' rows. ``max_ap_links``
    optionally limits an MD to its k strongest reachable APs per sample.
    """
    for k, ap in ap_locations.items():
        if not fp.contains(ap):
            raise ValueError(f"AP {k} at {ap} outside the floor plan")
    if not ap_locations:
        raise ValueError("at least one AP is required")
    intervals = {t.sample_interval_ms for t in trajectories.values()}
    if len(intervals) != 1:
        raise ValueError("trajectories must share one sample interval")
    samples = {m: sample_trajectory(t) for m, t in trajectories.items()}
    n = min(len(s[0]) for s in samples.values())
    times = next(iter(samples.values()))[0][:n]
    truths = {m: s[1][:n] for m, s in samples.items()}
    md_ids = sorted(trajectories)
    ap_ids = sorted(ap_locations)
    max_ap_links = max_ap_links or {}
    std = float(params.rtt_noise_std_m)

    ap_rows = {m: [[] for _ in range(n)] for m in md_ids}
    md_rows = {m: [[] for _ in range(n)] for m in md_ids}
    info = []
    for m in md_ids:
        pos = truths[m]
        per_ap = {}
        for k in ap_ids:
            rng = _link_rng(seed, (m, 0, k))
            ap = np.broadcast_to(np.asarray(ap_locations[k], dtype=np.float64), pos.shape)
            per_ap[k] = simulate_links(fp.walls, pos, ap, params, rng)
        limit = max_ap_links.get(m)
        for i in range(n):
            reach = [k for k in ap_ids if per_ap[k][2][i]]
            if limit is not None and len(reach) > limit:
                reach = sorted(reach, key=lambda k: (-per_ap[k][1][i], k))[:limit]
                reach.sort()
            gt = (float(pos[i, 0]), float(pos[i, 1]))
            for k in reach:
                rtt, rss, _, w = per_ap[k]
                ap_rows[m][i].append(MeasurementRecord(float(times[i]), m, k, "ap", float(rtt[i]),
                                                       std, float(rss[i]), gt))
                info.append({"md": m, "t_ms": float(times[i]), "peer_kind": "ap", "peer": k,
                             "walls": int(w[i]), "los": bool(w[i] == 0)})
    if md_links:
        for a_i, m in enumerate(md_ids):
            for nb in md_ids[a_i + 1:]:
                rng = _link_rng(seed, (m, 1, nb))
                rtt, rss, ok, w = simulate_links(fp.walls, truths[m], truths[nb], params, rng)
                for i in np.flatnonzero(ok & (w == 0)):
                    for src, dst in ((m, nb), (nb, m)):
                        gt = (float(truths[src][i, 0]), float(truths[src][i, 1]))
                        md_rows[src][i].append(MeasurementRecord(float(times[i]), src, dst, "md",
                                                                 float(rtt[i]), std, float(rss[i]), gt))
                        info.append({"md": src, "t_ms": float(times[i]), "peer_kind": "md",
                                     "peer": dst, "walls": 0, "los": True})
    return WorldDataset(ap_rows=ap_rows, md_rows=md_rows, times_ms=times,
                        truths={m: truths[m] for m in md_ids}, link_info=info,
                        ap_locations=dict(ap_locations))


def write_world_dataset(ds, outdir, params=None):
    """Write per-device CSV files, the AP location file and the link sidecar JSON."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ap_ids = sorted(ds.ap_locations)
    md_ids = sorted(ds.ap_rows)
    files = {}
    for m in md_ids:
        truths = [tuple(map(float, p)) for p in ds.truths[m]]
        p = out / f"md{m}_aps.csv"
        write_measurement_csv(p, ds.ap_rows[m], ap_ids, "ap", timestamps=ds.times_ms, truths=truths)
        files[f"md{m}_aps"] = p.name
        peers = [x for x in md_ids if x != m]
        if peers:
            p = out / f"md{m}_peers.csv"
            write_measurement_csv(p, ds.md_rows[m], peers, "md", timestamps=ds.times_ms, truths=truths)
            files[f"md{m}_peers"] = p.name
    save_ap_locations(out / "aps.json", ds.ap_locations)
    sidecar = {"links": ds.link_info}
    if params is not None:
        sidecar["params"] = asdict(params)
    (out / "links.json").write_text(json.dumps(sidecar, sort_keys=True))
    return files
