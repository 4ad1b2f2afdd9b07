"""Measurement records, the per-device CSV layout, calibration and time bucketing.

CSV layout, one file per measuring device::

    timestamp_ms, ap1_rtt_m, ap1_rtt_std, ap1_rss_dbm, ..., apK_rss_dbm, gt_x, gt_y

Empty cells mark an unreachable peer for that row. Device-to-device files use
the ``md<j>_`` prefix instead of ``ap<i>_``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_COL = re.compile(r"^(ap|md)(\d+)_(rtt_m|rtt_std|rss_dbm)$")
_FIELDS = ("rtt_m", "rtt_std", "rss_dbm")


@dataclass(frozen=True)
class MeasurementRecord:
    timestamp_ms: float
    md_id: int
    peer_id: int
    peer_kind: str
    rtt_m: float
    rtt_std: float
    rss_dbm: float
    ground_truth: tuple | None = None
    calibrated: bool = False
    flags: tuple = ()

    def __post_init__(self):
        if self.rtt_std < 0:
            raise ValueError(f"negative rtt_std {self.rtt_std}")
        if self.peer_kind not in ("ap", "md"):
            raise ValueError(f"peer_kind must be 'ap' or 'md', got {self.peer_kind!r}")
        if self.peer_kind == "md" and self.peer_id == self.md_id:
            raise ValueError("a device cannot measure itself")
        if not -100 <= self.rss_dbm <= -20:
            log.debug("RSS %.1f dBm outside the usual [-100, -20] range", self.rss_dbm)


@dataclass
class MeasurementSnapshot:
    t: int
    records: dict
    ground_truth: dict = field(default_factory=dict)

    @property
    def md_ids(self):
        return sorted(self.records)


@dataclass
class CalibrationTable:
    offsets: dict
    stds: dict
    counts: dict

    def get(self, md_id, peer_id):
        return self.offsets.get((md_id, peer_id))


def _fmt(x):
    return repr(float(x))


def measurement_columns(peer_ids, prefix="ap"):
    cols = ["timestamp_ms"]
    for i in peer_ids:
        cols += [f"{prefix}{i}_{f}" for f in _FIELDS]
    return cols + ["gt_x", "gt_y"]


def parse_measurement_csv(path, ap_count=None, md_id=0):
    """Parse one device's CSV into rows of records sharing a timestamp and ground truth.

    ``ap_count``, when given, must equal the number of peer column triples in
    the header.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        if header[0] != "timestamp_ms" or header[-2:] != ["gt_x", "gt_y"]:
            raise ValueError(f"{path}: header must start with timestamp_ms and end with gt_x, gt_y")
        peers = []
        for j in range(1, len(header) - 2, 3):
            triple = header[j:j + 3]
            m = [_COL.match(c) for c in triple]
            if not all(m) or len({(x.group(1), x.group(2)) for x in m}) != 1 \
                    or tuple(x.group(3) for x in m) != _FIELDS:
                raise ValueError(f"{path}: bad peer columns {triple}")
            peers.append((m[0].group(1), int(m[0].group(2))))
        if (len(header) - 3) % 3:
            raise ValueError(f"{path}: peer columns are not complete triples")
        if ap_count is not None and len(peers) != ap_count:
            raise ValueError(f"{path}: header lists {len(peers)} peers, expected {ap_count}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                ts = float(row[0])
                gt = None
                if row[-2].strip() and row[-1].strip():
                    gt = (float(row[-2]), float(row[-1]))
                recs = []
                for p, (kind, pid) in enumerate(peers):
                    cells = [c.strip() for c in row[1 + 3 * p:4 + 3 * p]]
                    if not all(cells):
                        continue
                    rtt, std, rss = (float(c) for c in cells)
                    recs.append(MeasurementRecord(ts, md_id, pid, kind, rtt, std, rss, gt))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            rows.append(recs)
    return rows


def write_measurement_csv(path, rows, peer_ids, prefix="ap", timestamps=None, truths=None):
    """Write rows of records in the CSV layout; missing peers become empty cells.

    ``timestamps`` and ``truths`` supply values for rows that have no records.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(measurement_columns(peer_ids, prefix))
        for r, recs in enumerate(rows):
            by_peer = {rec.peer_id: rec for rec in recs}
            ts = recs[0].timestamp_ms if recs else timestamps[r]
            gt = recs[0].ground_truth if recs else (truths[r] if truths is not None else None)
            out = [_fmt(ts)]
            for pid in peer_ids:
                rec = by_peer.get(pid)
                out += ["", "", ""] if rec is None else [_fmt(rec.rtt_m), _fmt(rec.rtt_std), _fmt(rec.rss_dbm)]
            out += ["", ""] if gt is None else [_fmt(gt[0]), _fmt(gt[1])]
            w.writerow(out)


def load_ap_locations(path):
    data = json.loads(Path(path).read_text())
    return {int(k): (float(v[0]), float(v[1])) for k, v in data.items()}


def save_ap_locations(path, aps):
    Path(path).write_text(json.dumps({str(k): [float(v[0]), float(v[1])] for k, v in sorted(aps.items())},
                                     indent=2))


def _flatten(records):
    for r in records:
        if isinstance(r, MeasurementRecord):
            yield r
        else:
            yield from _flatten(r)


def estimate_offsets(records, ap_locations):
    """Mean and spread of (measured RTT - true distance) per (device, AP) pair."""
    sums = defaultdict(list)
    for rec in _flatten(records):
        if rec.peer_kind != "ap":
            continue
        if rec.ground_truth is None:
            raise ValueError("estimate_offsets needs ground truth on every record")
        ap = ap_locations[rec.peer_id]
        d = math.hypot(rec.ground_truth[0] - ap[0], rec.ground_truth[1] - ap[1])
        sums[(rec.md_id, rec.peer_id)].append(rec.rtt_m - d)
    offsets, stds, counts = {}, {}, {}
    for key in sorted(sums):
        v = np.asarray(sums[key])
        offsets[key] = float(v.mean())
        stds[key] = float(v.std())
        counts[key] = len(v)
    return CalibrationTable(offsets, stds, counts)


def apply_offsets(records, table):
    """Subtract the calibrated offset from each AP record's RTT distance.

    Raises ``ValueError`` if a record is already calibrated. Records without a
    table entry pass through unchanged and carry the ``"no_offset"`` flag.
    """
    out = []
    for rec in records:
        if not isinstance(rec, MeasurementRecord):
            out.append(apply_offsets(rec, table))
            continue
        if rec.calibrated:
            raise ValueError(f"record at t={rec.timestamp_ms} ms is already calibrated")
        if rec.peer_kind != "ap":
            out.append(rec)
            continue
        off = table.get(rec.md_id, rec.peer_id)
        if off is None:
            log.warning("no offset for device %s / AP %s", rec.md_id, rec.peer_id)
            out.append(replace(rec, flags=rec.flags + ("no_offset",)))
        else:
            out.append(replace(rec, rtt_m=rec.rtt_m - off, calibrated=True))
    return out


def project_3d_to_2d(d3, delta_h):
    """Horizontal range from a slant range and the height difference, clamped at 0."""
    if d3 < 0:
        raise ValueError(f"negative distance {d3}")
    return math.sqrt(max(d3 * d3 - delta_h * delta_h, 0.0))


def build_snapshots(records, interval_ms=200.0):
    """Bucket records into time intervals; the latest record per (device, peer) wins."""
    if not interval_ms > 0:
        raise ValueError("interval_ms must be positive")
    buckets = defaultdict(dict)
    for rec in _flatten(records):
        t = int(math.floor(rec.timestamp_ms / interval_ms + 1e-9))
        key = (rec.md_id, rec.peer_kind, rec.peer_id)
        prev = buckets[t].get(key)
        if prev is None or rec.timestamp_ms >= prev.timestamp_ms:
            buckets[t][key] = rec
    snaps = []
    for t in sorted(buckets):
        per_md = defaultdict(list)
        truth = {}
        for key in sorted(buckets[t]):
            rec = buckets[t][key]
            per_md[rec.md_id].append(rec)
            if rec.ground_truth is not None:
                old = truth.get(rec.md_id)
                if old is None or rec.timestamp_ms >= old[0]:
                    truth[rec.md_id] = (rec.timestamp_ms, rec.ground_truth)
        snaps.append(MeasurementSnapshot(t=t, records=dict(per_md),
                                         ground_truth={m: v[1] for m, v in truth.items()}))
    return snaps
