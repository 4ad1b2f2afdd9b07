"""Learned synthetic-measurement generator.

Given the true AP-to-point distance and the plan crop between the two, the
network predicts the RTT range and RSS a device would report. Trained on one
plan, it turns any other plan's floor-plan image into training data.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from planloc.dataset import MeasurementRecord, save_ap_locations, write_measurement_csv
from planloc.floorplan import crop_and_rotate
from planloc.fpdnn import FpdnnConfig, _buckets, _steps, cosine_lr, denormalize_rss, normalize_rss
from planloc.neural import autograd as ag
from planloc.neural.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from planloc.neural.layers import FFNN3, FFNN4, ParameterStore, ffnn_apply, init_ffnn
from planloc.neural.optim import AdamState, adam_step
from planloc.neural.vit import VitConfig, init_vit, vit_forward

log = logging.getLogger(__name__)

ARCHITECTURE = "datagen-v1"


@dataclass(frozen=True)
class GeneratorConfig(FpdnnConfig):
    """Same image branch and scaling fields as the range refiner, different heads."""

    ffnn1: tuple = tuple(FFNN3)
    ffnn2: tuple = tuple(FFNN4)


def desk_generator_config(dist_scale_m, max_distance_m=70.0, **kw):
    from planloc.fpdnn import max_tokens_for
    ppm = kw.pop("pixels_per_meter", 8.0)
    vit = VitConfig(patch=8, height_px=32, dim=32, heads=2, depth=1, out_dim=32,
                    max_tokens=max_tokens_for(max_distance_m, ppm, VitConfig(patch=8, height_px=32)))
    return GeneratorConfig(vit=vit, pixels_per_meter=ppm, dist_scale_m=dist_scale_m,
                           max_distance_m=max_distance_m, **kw)


@dataclass
class GeneratorModel:
    store: ParameterStore
    cfg: GeneratorConfig
    seed: int = 0
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)


def init_generator(cfg=GeneratorConfig(), seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_vit(store.scope("vit"), cfg.vit, rng)
    init_ffnn(store.scope("ffnn3"), list(cfg.ffnn1), rng, input_bias=0.3)
    init_ffnn(store.scope("ffnn4"), list(cfg.ffnn2), rng, final_bias=0.3, final_scale=0.1)
    return GeneratorModel(store=store, cfg=cfg, seed=seed)


def generator_forward(d_m, pixels, model, training=False, rng=None):
    """Normalized ``(B, 2)`` predictions ``[range / scale, (rss + 100) / 80]``."""
    cfg = model.cfg
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    b = pixels.shape[0]
    o_t = vit_forward(pixels, model.store.scope("vit"), cfg.vit, training=training, rng=rng)
    dn = np.broadcast_to(np.asarray(d_m, dtype=np.float64) / cfg.dist_scale_m, (b,)).reshape(b, 1)
    o_f3 = ffnn_apply(model.store.scope("ffnn3"), dn, list(cfg.ffnn1), training=training, rng=rng)
    return ffnn_apply(model.store.scope("ffnn4"), ag.concat([o_t, o_f3], axis=-1), list(cfg.ffnn2),
                      training=training, rng=rng)


def generate(d_m, pixels, model):
    """``(rtt_m, rss_dbm)`` arrays in physical units."""
    out = generator_forward(d_m, pixels, model).data
    return out[:, 0] * model.cfg.dist_scale_m, denormalize_rss(out[:, 1])


@dataclass(frozen=True)
class GenSample:
    """Training sample: crop between true endpoints, true distance, measured pair."""

    fp: object
    point: tuple
    ap: tuple
    rtt_m: float
    rss_dbm: float

    @property
    def d_true(self):
        return math.hypot(self.point[0] - self.ap[0], self.point[1] - self.ap[1])

    def width_px(self, cfg):
        from planloc.floorplan import crop_width_px
        return crop_width_px(self.d_true, cfg.pixels_per_meter, cfg.crop)

    def pixels(self, cfg):
        return crop_and_rotate(self.fp, self.point, self.ap, cfg.crop).pixels


def _loss(samples, idx, model, training=False, rng=None):
    cfg = model.cfg
    pix = np.stack([samples[i].pixels(cfg) for i in idx])
    d = np.array([samples[i].d_true for i in idx])
    y = np.stack([np.array([samples[i].rtt_m for i in idx]) / cfg.dist_scale_m,
                  normalize_rss([samples[i].rss_dbm for i in idx])], axis=1)
    pred = generator_forward(d, pix, model, training=training, rng=rng)
    # both columns are on comparable normalized scales, so the terms are summed unweighted
    return ag.sum(ag.mean(ag.square(ag.sub(pred, y)), axis=0))


def _eval(samples, model):
    if not samples:
        return float("nan")
    tot = 0.0
    for idx in _buckets(samples, model.cfg, 64):
        tot += float(_loss(samples, idx, model).data) * len(idx)
    return tot / len(samples)


def train_generator(samples, cfg=None, seed=0):
    """Adam on the summed normalized MSE of range and RSS, best validation checkpoint kept."""
    if not samples:
        raise ValueError("train_generator needs at least one sample")
    model = init_generator(cfg or GeneratorConfig(), seed)
    cfg = model.cfg
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples))) if len(samples) >= 10 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    state = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    best_loss = _eval(val or train, model)
    best = model.store.state_dict()
    model.val_trace = [best_loss]
    for epoch in range(cfg.epochs):
        state.learning_rate = cosine_lr(cfg, epoch)
        total, seen = 0.0, 0
        for step in _steps(train, cfg, rng):
            model.store.zero_grad()
            n_step = sum(len(i) for i in step)
            step_loss = 0.0
            for idx in step:
                loss = ag.mul(_loss(train, idx, model, training=True, rng=rng), len(idx) / n_step)
                loss.backward()
                step_loss += float(loss.data)
            if not np.isfinite(step_loss):
                log.error("non-finite generator loss; keeping the best parameters so far")
                model.store.load_state_dict(best)
                return model
            adam_step(model.store, state)
            total += step_loss * n_step
            seen += n_step
        model.loss_trace.append(total / max(seen, 1))
        vl = _eval(val, model) if val else model.loss_trace[-1]
        model.val_trace.append(vl)
        if vl < best_loss:
            best_loss, best = vl, model.store.state_dict()
    model.store.load_state_dict(best)
    return model


def free_space_grid(fp, pitch_m=0.5, free_threshold=0.5):
    """Grid points at ``pitch_m`` spacing whose raster pixel is free space."""
    w, h = fp.extent_m
    xs = np.arange(pitch_m / 2, w, pitch_m)
    ys = np.arange(pitch_m / 2, h, pitch_m)
    pts = np.array([(x, y) for y in ys for x in xs])
    return pts[fp.sample(pts) > free_threshold]


@dataclass
class SyntheticDataset:
    rows: list            # one row of AP records per sample point
    points: np.ndarray
    ap_locations: dict
    provenance: dict


def synthesize_scenario(fp_target, ap_locations, sample_points, model, seed=0,
                        sigma_rtt_m=0.0, sigma_rss_db=0.0, checkpoint_hash=None, source_plan=None,
                        interval_ms=200.0):
    """Synthetic AP records for every sample point and AP of a target plan.

    Each point becomes one row (timestamps advance by ``interval_ms``) with
    the point as ground truth. Optional Gaussian noise is added to the
    generated values.
    """
    for k, ap in ap_locations.items():
        if not fp_target.contains(ap):
            raise ValueError(f"AP {k} at {ap} outside the target plan")
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 2)
    for p in pts:
        if not fp_target.contains(p):
            raise ValueError(f"sample point {tuple(p)} outside the target plan")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    ap_ids = sorted(ap_locations)
    pairs = [GenSample(fp_target, tuple(p), tuple(ap_locations[k]), 0.0, 0.0)
             for p in pts for k in ap_ids]
    keep = [i for i, s in enumerate(pairs) if s.d_true > 1e-9]
    rtt = np.zeros(len(pairs))
    rss = np.full(len(pairs), np.nan)
    sub = [pairs[i] for i in keep]
    for idx in _buckets(sub, model.cfg, 64):
        pix = np.stack([sub[i].pixels(model.cfg) for i in idx])
        z, g = generate(np.array([sub[i].d_true for i in idx]), pix, model)
        rtt[np.asarray(keep)[idx]] = z
        rss[np.asarray(keep)[idx]] = g
    rtt = np.maximum(rtt + rng.normal(0.0, sigma_rtt_m, len(pairs)), 0.0)
    rss = rss + rng.normal(0.0, sigma_rss_db, len(pairs))
    rows = []
    for r, p in enumerate(pts):
        t = r * interval_ms
        row = []
        for j, k in enumerate(ap_ids):
            i = r * len(ap_ids) + j
            if np.isnan(rss[i]):
                continue  # point coincides with the AP
            row.append(MeasurementRecord(t, 1, k, "ap", float(rtt[i]), float(sigma_rtt_m), float(rss[i]),
                                         (float(p[0]), float(p[1]))))
        rows.append(row)
    prov = {"source_plan": source_plan, "checkpoint_sha256": checkpoint_hash, "seed": int(seed),
            "n_points": int(len(pts)), "sigma_rtt_m": sigma_rtt_m, "sigma_rss_db": sigma_rss_db,
            "interval_ms": float(interval_ms)}
    return SyntheticDataset(rows=rows, points=pts, ap_locations=dict(ap_locations), provenance=prov)


def write_synthetic(ds, outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    step = ds.provenance.get("interval_ms", 200.0)
    ts = [row[0].timestamp_ms if row else i * step for i, row in enumerate(ds.rows)]
    write_measurement_csv(out / "md1_aps.csv", ds.rows, sorted(ds.ap_locations), "ap", timestamps=ts,
                          truths=[tuple(map(float, p)) for p in ds.points])
    save_ap_locations(out / "aps.json", ds.ap_locations)
    (out / "provenance.json").write_text(json.dumps(ds.provenance, sort_keys=True, indent=2))


def _config_dict(cfg):
    d = asdict(cfg)
    d["vit"] = cfg.vit.as_dict()
    d["ffnn1"] = [list(x) for x in cfg.ffnn1]
    d["ffnn2"] = [list(x) for x in cfg.ffnn2]
    return d


def save_generator(path, model):
    return save_checkpoint(path, model.store, ARCHITECTURE, seed=model.seed,
                           extra={"config": _config_dict(model.cfg), "loss_trace": model.loss_trace,
                                  "val_trace": model.val_trace})


def load_generator(path):
    store, header = load_checkpoint(path, expect_architecture=ARCHITECTURE)
    d = dict(header["extra"]["config"])
    d["vit"] = VitConfig(**d["vit"])
    d["ffnn1"] = tuple(tuple(x) for x in d["ffnn1"])
    d["ffnn2"] = tuple(tuple(x) for x in d["ffnn2"])
    return GeneratorModel(store=store, cfg=GeneratorConfig(**d), seed=header.get("seed", 0),
                          loss_trace=header["extra"].get("loss_trace", []),
                          val_trace=header["extra"].get("val_trace", [])), file_sha256(path)
