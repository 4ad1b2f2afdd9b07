"""Built-in floor plans: an office, a laboratory and a shopping-mall hallway.

Coordinates are meters with the origin at the plan's top-left corner and y
pointing down. Each scenario carries AP locations and a lap route; laps are
repeated with per-lap waypoint jitter so train and test laps differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from planloc.floorplan import make_floorplan
from planloc.simworld import Trajectory


def _box(x0, y0, x1, y1):
    return [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]


def _wall_with_doors(x0, x1, y, doors, width=1.2, horizontal=True):
    """Straight wall from x0 to x1 at constant y (or x if not horizontal) with door gaps."""
    segs, start = [], x0
    for c in sorted(doors):
        a, b = c - width / 2, c + width / 2
        if a > start:
            segs.append((start, a))
        start = b
    if start < x1:
        segs.append((start, x1))
    if horizontal:
        return [(a, y, b, y) for a, b in segs]
    return [(y, a, y, b) for a, b in segs]


@dataclass(frozen=True)
class Scenario:
    name: str
    walls: tuple
    extent_m: tuple
    ap_locations: dict
    lap: tuple
    md_offsets: tuple = ((0.0, 0.0),)

    def floorplan(self, ppm=8.0):
        return make_floorplan(list(self.walls), self.extent_m, ppm)

    def trajectories(self, laps=5, speed_mps=0.5, interval_ms=200.0, jitter_m=0.3, seed=0,
                     n_md=1):
        """One multi-lap trajectory per MD; lap waypoints are jittered independently."""
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
        base = np.asarray(self.lap, dtype=np.float64)
        w, h = self.extent_m
        out = {}
        for m in range(n_md):
            off = np.asarray(self.md_offsets[m % len(self.md_offsets)])
            pts = []
            for _ in range(laps):
                lap = base + off + rng.uniform(-jitter_m, jitter_m, size=base.shape)
                pts.extend(lap.tolist())
            pts.append((base[0] + off).tolist())
            pts = np.clip(np.asarray(pts), [0.3, 0.3], [w - 0.3, h - 0.3])
            out[m + 1] = Trajectory(tuple(map(tuple, pts)), speed_mps=speed_mps,
                                    sample_interval_ms=interval_ms)
        return out

    def lap_length(self):
        pts = np.asarray(self.lap + (self.lap[0],))
        return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def office_scenario():
    """60 x 20 m office: a long corridor with rooms on both sides and two open-plan areas."""
    walls = _box(0, 0, 60, 20)
    walls += _wall_with_doors(0, 60, 8.0, [5, 15, 25, 35, 50])
    walls += _wall_with_doors(0, 60, 11.0, [7.5, 22.5, 37.5, 52.5])
    walls += [(x, 0, x, 8) for x in (10, 20, 30, 40)]
    walls += [(x, 11, x, 20) for x in (15, 30, 45)]
    aps = {1: (3.0, 9.5), 2: (20.0, 9.5), 3: (40.0, 9.5), 4: (57.0, 9.5),
           5: (15.0, 3.0), 6: (50.0, 4.0), 7: (7.0, 16.0), 8: (37.0, 16.0)}
    lap = ((2, 9.5), (15, 9.5), (15, 5), (12, 3), (18, 3), (15, 5), (15, 9.5),
           (37.5, 9.5), (37.5, 15), (34, 18), (41, 18), (37.5, 15), (37.5, 9.5),
           (50, 9.5), (50, 5), (45, 2), (57, 2), (57, 6), (50, 5), (50, 9.5),
           (52.5, 9.5), (52.5, 15), (56, 18), (49, 17), (52.5, 15), (52.5, 9.5),
           (22.5, 9.5), (22.5, 15), (19, 17), (26, 17), (22.5, 15), (22.5, 9.5))
    return Scenario("office", tuple(walls), (60.0, 20.0), aps, lap)


def lab_scenario():
    """25 x 9 m laboratory: pillars, a guardrail, an elevator shaft and a small office."""
    walls = _box(0, 0, 25, 9)
    for x in (6.0, 11.0, 16.0):
        walls += _box(x - 0.3, 2.7, x + 0.3, 3.3)
    walls += [(7.0, 4.5, 18.0, 4.5)]
    walls += [(21.0, 9.0, 21.0, 6.0), (21.0, 6.0, 24.0, 6.0), (24.0, 6.0, 24.0, 9.0)]
    walls += [(3.5, 9.0, 3.5, 7.5), (3.5, 6.5, 3.5, 6.0), (3.5, 6.0, 0.0, 6.0)]
    aps = {1: (1.0, 1.0), 2: (12.5, 0.5), 3: (24.0, 1.0), 4: (24.0, 5.0),
           5: (18.0, 8.5), 6: (8.0, 8.5), 7: (1.0, 4.5), 8: (12.5, 4.0)}
    lap = ((2.0, 5.0), (9.0, 5.5), (19.5, 5.5), (20.0, 7.5), (22.5, 5.0), (22.5, 2.0),
           (13.5, 1.5), (8.5, 4.0), (3.0, 1.5), (1.5, 3.0), (2.5, 7.0), (1.5, 8.0), (5.0, 7.0))
    return Scenario("lab", tuple(walls), (25.0, 9.0), aps, lap)


def mall_scenario():
    """40 x 16 m mall hallway between two rows of shops; two devices share the hallway."""
    walls = _box(0, 0, 40, 16)
    walls += _wall_with_doors(0, 40, 5.0, [6, 18, 30])
    walls += _wall_with_doors(0, 40, 11.0, [10, 26])
    walls += [(x, 0, x, 5) for x in (12, 24)]
    walls += [(x, 11, x, 16) for x in (20,)]
    aps = {1: (2.0, 8.0), 2: (14.0, 6.0), 3: (27.0, 10.0), 4: (38.0, 8.0),
           5: (18.0, 2.0), 6: (30.0, 14.0)}
    lap = ((3.0, 7.5), (37.0, 7.5), (37.0, 9.0), (3.0, 9.0))
    return Scenario("mall", tuple(walls), (40.0, 16.0), aps, lap,
                    md_offsets=((0.0, 0.0), (0.0, 1.2)))


SCENARIOS = {"office": office_scenario, "lab": lab_scenario, "mall": mall_scenario}


def get_scenario(name):
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
