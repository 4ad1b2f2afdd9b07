"""Least-squares range positioning, a constant-velocity Kalman tracker and the
per-snapshot localization pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class LocalizationError(ValueError):
    """Raised when a position cannot be solved from the given ranges."""


def _anchor_arrays(distances, anchors):
    keys = sorted(distances)
    missing = [k for k in keys if k not in anchors]
    if missing:
        raise KeyError(f"no anchor location for {missing}")
    X = np.array([anchors[k] for k in keys], dtype=np.float64).reshape(-1, 2)
    d = np.array([distances[k] for k in keys], dtype=np.float64)
    return X, d


def least_squares(distances, ap_locations, refine=False, iterations=10):
    """Position from ranges to at least three anchors.

    Each range equation ``|p - x_k|^2 = d_k^2`` is linearized by subtracting
    the mean equation over anchors, which cancels ``|p|^2`` and does not depend
    on anchor order. The system is solved through its normal equations. With
    ``refine`` the linear solution seeds a few Gauss-Newton steps on the range
    residuals.

    Raises
    ------
    LocalizationError
        Fewer than three anchors ("underdetermined"), or anchors too close to
        collinear (smallest singular value of the linear system <= 1e-9).
    """
    X, d = _anchor_arrays(distances, ap_locations)
    if len(d) < 3:
        raise LocalizationError(f"underdetermined: {len(d)} anchors, need 3")
    c = X.mean(axis=0)
    Xc = X - c  # centering keeps the system well scaled far from the origin
    r = d * d - np.sum(Xc * Xc, axis=1)
    A = 2.0 * (Xc - Xc.mean(axis=0))
    b = -(r - r.mean())
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-9:
        raise LocalizationError(
            f"anchors are collinear (smallest singular value {sv[-1]:.3g}, "
            f"condition {sv[0] / max(sv[-1], 1e-300):.3g})")
    p = np.linalg.solve(A.T @ A, A.T @ b)
    if refine:
        for _ in range(iterations):
            diff = p - Xc
            rng_ = np.hypot(diff[:, 0], diff[:, 1])
            if np.any(rng_ < 1e-12):
                break
            J = diff / rng_[:, None]
            step, *_ = np.linalg.lstsq(J, d - rng_, rcond=None)
            p = p + step
            if np.hypot(*step) < 1e-12:
                break
    return p + c


@dataclass(frozen=True)
class LocalizerConfig:
    process_noise_accel_std: float = 0.5
    measurement_noise_std: float = 0.8
    dt: float = 0.2
    initial_velocity_std: float = 1.0
    gauss_newton: bool = False
    coarse_kf: bool = False

    def __post_init__(self):
        if self.process_noise_accel_std < 0 or self.measurement_noise_std < 0 or not self.dt > 0:
            raise ValueError("noise values must be >= 0 and dt > 0")


@dataclass
class TrackState:
    state: np.ndarray
    covariance: np.ndarray
    last_update_ms: float | None = None
    history: list = field(default_factory=list)

    @property
    def position(self):
        return self.state[:2].copy()


def init_track(observation, cfg, t_ms=None):
    obs = np.asarray(observation, dtype=np.float64)
    pv = max(cfg.measurement_noise_std ** 2, 1e-12)
    vv = cfg.initial_velocity_std ** 2
    tr = TrackState(np.array([obs[0], obs[1], 0.0, 0.0]), np.diag([pv, pv, vv, vv]), t_ms)
    tr.history.append(tr.position)
    return tr


def _cv_matrices(dt, q):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    q2 = q * q
    Q1 = q2 * np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]])
    Q = np.zeros((4, 4))
    for i in range(2):
        Q[np.ix_([i, i + 2], [i, i + 2])] = Q1
    return F, Q


def _psd_clamp(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < -1e-9:
        log.info("covariance lost positive semi-definiteness (min eig %.3g); clamping", w.min())
    if w.min() < 0:
        P = (V * np.maximum(w, 0.0)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def kalman_step(track, observation, cfg, t_ms=None):
    """Predict with a constant-velocity model, then update on a position fix.

    ``track`` may be ``None`` to start a new track at ``observation``. The
    time step is ``t_ms - track.last_update_ms`` when both are known, else
    ``cfg.dt``.
    """
    if track is None:
        return init_track(observation, cfg, t_ms)
    dt = cfg.dt
    if t_ms is not None and track.last_update_ms is not None:
        dt = (t_ms - track.last_update_ms) / 1000.0
    if not dt > 0:
        raise ValueError(f"non-positive time step {dt}")
    F, Q = _cv_matrices(dt, cfg.process_noise_accel_std)
    x = F @ track.state
    P = F @ track.covariance @ F.T + Q
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 1] = 1.0
    R = cfg.measurement_noise_std ** 2 * np.eye(2)
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.pinv(S)
    x = x + K @ (np.asarray(observation, dtype=np.float64) - H @ x)
    IKH = np.eye(4) - K @ H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    out = TrackState(x, _psd_clamp(P), t_ms, track.history + [x[:2].copy()])
    return out


def _ap_distances(records):
    return {r.peer_id: r.rtt_m for r in records if r.peer_kind == "ap"}


def localize_pipeline(snapshot, fp, ap_locations, gnn_model, fpdnn_model, tracks, cfg,
                      coarse_tracks=None):
    """Run graph pre-localization, distance refinement, least squares and tracking.

    ``gnn_model`` and ``fpdnn_model`` may be ``None`` to bypass a stage; the
    coarse estimate then comes from the graph's initial estimates and the
    refined distances are the measured ranges. ``tracks`` (and
    ``coarse_tracks`` when ``cfg.coarse_kf``) map MD id to :class:`TrackState`
    and are updated in place. Returns ``{md: result dict}`` where each result
    holds ``coarse``, ``refined_distances``, ``ls``, ``kf`` and ``flags``.
    """
    from planloc.fpdnn import refine_snapshot
    from planloc.gnn import build_graph, gnn_forward

    t_ms = snapshot.t * cfg.dt * 1000.0
    graph = build_graph(snapshot, ap_locations, fp)
    if gnn_model is not None:
        coarse = gnn_forward(graph, gnn_model)
    else:
        coarse = {m: np.asarray(graph.h0[m]) for m in graph.md_ids}
    out = {}
    flags = {m: list(graph.init_flags.get(m, ())) for m in graph.md_ids}
    if cfg.coarse_kf and coarse_tracks is not None:
        for m in graph.md_ids:
            coarse_tracks[m] = kalman_step(coarse_tracks.get(m), coarse[m], cfg, t_ms)
            coarse[m] = coarse_tracks[m].position
    if fpdnn_model is not None:
        refined, rflags = refine_snapshot(snapshot, coarse, fp, ap_locations, fpdnn_model)
    else:
        refined = {(m, k): v for m in graph.md_ids
                   for k, v in _ap_distances(snapshot.records.get(m, [])).items()}
        rflags = {}
    for m in graph.md_ids:
        dist = {k: v for (mm, k), v in refined.items() if mm == m}
        f = flags[m] + [f"fpdnn_fallback:{k}" for (mm, k), fl in rflags.items() if mm == m and fl]
        try:
            ls = least_squares(dist, ap_locations, refine=cfg.gauss_newton)
        except (LocalizationError, KeyError) as exc:
            f.append("ls_fallback")
            log.debug("md %s t %s: %s", m, snapshot.t, exc)
            ls = np.asarray(coarse[m], dtype=np.float64)
        tracks[m] = kalman_step(tracks.get(m), ls, cfg, t_ms)
        out[m] = {"coarse": np.asarray(coarse[m], dtype=np.float64), "refined_distances": dist,
                  "ls": ls, "kf": tracks[m].position, "flags": f}
    return out


def result_json_line(t, md, result):
    """One JSON line of the pipeline output schema."""
    return json.dumps({
        "t": int(t), "md": int(md),
        "coarse": [float(v) for v in result["coarse"]],
        "refined_distances": {str(k): float(v) for k, v in sorted(result["refined_distances"].items())},
        "ls": [float(v) for v in result["ls"]],
        "kf": [float(v) for v in result["kf"]],
        "flags": list(result["flags"]),
    }, sort_keys=True)
