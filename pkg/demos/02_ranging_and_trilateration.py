"""
Simulated ranging and plain trilateration
=========================================

Walls delay RTT ranges and weaken RSS. This script walks one device around
the laboratory and looks at how range errors grow with wall count, and what
that does to least-squares positioning and a Kalman tracker.
"""

# %%
import numpy as np

from planloc.baselines import baseline_trilateration
from planloc.dataset import build_snapshots
from planloc.floorplan import count_wall_crossings
from planloc.localizer import LocalizerConfig, kalman_step
from planloc.scenarios import get_scenario
from planloc.simworld import PropagationParams, generate_world_dataset

lab = get_scenario("lab")
fp = lab.floorplan()
params = PropagationParams()
trajs = lab.trajectories(laps=2, seed=1)
ds = generate_world_dataset(fp, lab.ap_locations, trajs, params, seed=2)
records = [r for r in ds.all_records() if r.peer_kind == "ap"]
print(len(records), "AP records")

# %%
# Range error against the number of walls crossed.
by_walls = {}
for r in records:
    ap = lab.ap_locations[r.peer_id]
    err = r.rtt_m - np.hypot(r.ground_truth[0] - ap[0], r.ground_truth[1] - ap[1])
    by_walls.setdefault(count_wall_crossings(fp, r.ground_truth, ap), []).append(err)
for n in sorted(by_walls):
    e = np.array(by_walls[n])
    print(f"{n} walls: {len(e):5d} links, mean range error {e.mean():+.2f} m")

# %%
# Trilateration on every snapshot, then a constant-velocity Kalman filter.
snaps = build_snapshots(ds.all_records())
cfg = LocalizerConfig()
raw, smooth, track = [], [], None
for s in snaps:
    est = baseline_trilateration(s, lab.ap_locations).get(1)
    if est is None:
        continue
    track = kalman_step(track, est, cfg, t_ms=s.t * 200.0)
    truth = np.asarray(s.ground_truth[1])
    raw.append(np.linalg.norm(est - truth))
    smooth.append(np.linalg.norm(track.position - truth))
rmse = lambda e: float(np.sqrt(np.mean(np.square(e))))
print(f"trilateration RMSE {rmse(raw):.2f} m, with Kalman filter {rmse(smooth):.2f} m")
