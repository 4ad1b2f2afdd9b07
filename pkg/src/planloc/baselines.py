"""Reference localizers: plain trilateration and a histogram (grid) Bayes filter."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from planloc.localizer import LocalizationError, least_squares

log = logging.getLogger(__name__)


def baseline_trilateration(snapshot, ap_locations, sequential=False, order=None):
    """Least squares on each MD's raw (calibrated) AP ranges.

    MDs with fewer than three usable APs are absent from the result. With
    ``sequential`` the MDs are solved one after another (``order``, default
    ascending id) and an MD already solved acts as an extra anchor, using the
    device-to-device range, for the MDs after it.
    """
    out = {}
    md_ids = list(order) if order is not None else sorted(snapshot.records)
    for m in md_ids:
        recs = snapshot.records.get(m, [])
        ranges = {("ap", r.peer_id): r.rtt_m for r in recs
                  if r.peer_kind == "ap" and r.peer_id in ap_locations}
        anchors = {("ap", k): ap_locations[k] for k in ap_locations}
        if sequential:
            for r in recs:
                if r.peer_kind == "md" and r.peer_id in out:
                    ranges[("md", r.peer_id)] = r.rtt_m
                    anchors[("md", r.peer_id)] = tuple(out[r.peer_id])
        try:
            out[m] = least_squares(ranges, anchors)
        except LocalizationError as exc:
            log.debug("trilateration skipped MD %s at t=%s: %s", m, snapshot.t, exc)
    return out


@dataclass
class GridPosterior:
    """Log-probability over free-space cells of a regular grid.

    ``centers`` is ``(ny, nx, 2)``; ``mask`` marks free cells; ``logp`` is
    ``-inf`` outside the mask and log-normalized inside it.
    """

    cell_size_m: float
    centers: np.ndarray
    mask: np.ndarray
    logp: np.ndarray

    @property
    def prob(self):
        p = np.zeros_like(self.logp)
        p[self.mask] = np.exp(self.logp[self.mask])
        return p

    def total(self):
        return float(self.prob.sum())


def uniform_grid(fp, cell_size_m=0.25, free_threshold=0.5):
    w, h = fp.extent_m
    xs = np.arange(cell_size_m / 2, w, cell_size_m)
    ys = np.arange(cell_size_m / 2, h, cell_size_m)
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx, gy], axis=-1)
    mask = fp.sample(centers.reshape(-1, 2)).reshape(gx.shape) > free_threshold
    if not mask.any():
        raise ValueError("grid has no free-space cells")
    logp = np.full(gx.shape, -np.inf)
    logp[mask] = -np.log(mask.sum())
    return GridPosterior(cell_size_m, centers, mask, logp)


def _normalize(logp, mask):
    z = logsumexp(logp[mask])
    if not np.isfinite(z):
        return None
    out = np.full_like(logp, -np.inf)
    out[mask] = logp[mask] - z
    return out


def grid_estimate(post):
    """Probability-weighted mean over the 3 x 3 neighborhood of the most likely cell."""
    p = post.prob
    iy, ix = np.unravel_index(np.argmax(np.where(post.mask, post.logp, -np.inf)), p.shape)
    ys = slice(max(iy - 1, 0), iy + 2)
    xs = slice(max(ix - 1, 0), ix + 2)
    w = p[ys, xs]
    c = post.centers[ys, xs]
    if w.sum() <= 0:
        return post.centers[iy, ix].copy()
    return (c * w[..., None]).sum(axis=(0, 1)) / w.sum()


def diffuse(post, sigma_move_m):
    """Blur the posterior with a Gaussian motion kernel, then renormalize over free space."""
    if sigma_move_m <= 0:
        return post
    p = gaussian_filter(post.prob, sigma_move_m / post.cell_size_m, mode="constant")
    p = np.where(post.mask, p, 0.0)
    with np.errstate(divide="ignore"):
        logp = np.where(post.mask, np.log(p), -np.inf)
    norm = _normalize(logp, post.mask)
    if norm is None:
        return uniform_like(post)
    return GridPosterior(post.cell_size_m, post.centers, post.mask, norm)


def uniform_like(post):
    logp = np.full(post.mask.shape, -np.inf)
    logp[post.mask] = -np.log(post.mask.sum())
    return GridPosterior(post.cell_size_m, post.centers, post.mask, logp)


def bayesian_grid_update(prior, distances, ap_locations, range_sigma_m, sigma_move_m=0.0):
    """One Bayes update of the grid from AP ranges.

    ``sigma_move_m`` (speed prior times time step) first diffuses the prior.
    Each cell gains ``sum_k log N(z_k | dist(cell, AP_k), sigma)``. On total
    underflow the posterior resets to uniform. Returns ``(posterior, estimate)``.
    """
    post = diffuse(prior, sigma_move_m)
    logp = post.logp.copy()
    c = post.centers
    for k, z in sorted(distances.items()):
        ap = np.asarray(ap_locations[k], dtype=np.float64)
        d = np.hypot(c[..., 0] - ap[0], c[..., 1] - ap[1])
        logp += -0.5 * ((z - d) / range_sigma_m) ** 2 - np.log(range_sigma_m * np.sqrt(2 * np.pi))
    norm = _normalize(logp, post.mask)
    if norm is None:
        log.warning("grid posterior underflowed; resetting to uniform")
        post = uniform_like(post)
    else:
        post = GridPosterior(post.cell_size_m, post.centers, post.mask, norm)
    return post, grid_estimate(post)


def run_grid_filter(snapshots, fp, ap_locations, range_sigma_m=1.0, speed_mps=0.5, dt_s=0.2,
                    cell_size_m=0.25):
    """Track every MD through ``snapshots``; returns one ``{md: estimate}`` map per snapshot."""
    base = uniform_grid(fp, cell_size_m)
    posts, out = {}, []
    for snap in snapshots:
        est = {}
        for m in sorted(snap.records):
            ranges = {r.peer_id: r.rtt_m for r in snap.records[m]
                      if r.peer_kind == "ap" and r.peer_id in ap_locations}
            if not ranges:
                continue
            prior = posts.get(m, base)
            sig = speed_mps * dt_s if m in posts else 0.0
            posts[m], est[m] = bayesian_grid_update(prior, ranges, ap_locations, range_sigma_m, sig)
        out.append(est)
    return out
