"""Floor-plan-conditioned distance refinement.

A crop of the plan between an AP and an MD estimate goes through the
patch/transformer branch; the measured (RTT range, RSS) pair goes through a
small fully connected branch; a fusion head regresses the corrected range.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from planloc.floorplan import CropConfig, crop_and_rotate, crop_width_px
from planloc.neural import autograd as ag
from planloc.neural.checkpoint import load_checkpoint, save_checkpoint
from planloc.neural.layers import FFNN1, FFNN2, ParameterStore, ffnn_apply, init_ffnn
from planloc.neural.optim import AdamState, adam_step
from planloc.neural.vit import VitConfig, init_vit, vit_forward

log = logging.getLogger(__name__)

ARCHITECTURE = "fpdnn-v1"
RSS_OFFSET, RSS_SPAN = 100.0, 80.0


def normalize_rss(rss):
    return (np.asarray(rss, dtype=np.float64) + RSS_OFFSET) / RSS_SPAN


def denormalize_rss(g):
    return np.asarray(g, dtype=np.float64) * RSS_SPAN - RSS_OFFSET


def max_tokens_for(max_distance_m, ppm, vit, margin_m=0.0):
    crop = CropConfig(height_px=vit.height_px, patch=vit.patch, margin_m=margin_m)
    return crop_width_px(max_distance_m, ppm, crop) // vit.patch * (vit.height_px // vit.patch)


@dataclass(frozen=True)
class FpdnnConfig:
    """Architecture, input scaling and training settings.

    ``dist_scale_m`` divides ranges before they enter the network and is
    fixed when the model is created (typically the training plan's diameter),
    so a model keeps one scale across plans.
    """

    vit: VitConfig = field(default_factory=VitConfig)
    ffnn1: tuple = tuple(FFNN1)
    ffnn2: tuple = tuple(FFNN2)
    pixels_per_meter: float = 64.0
    dist_scale_m: float = 64.0
    max_distance_m: float = 70.0
    crop_margin_m: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 32
    val_fraction: float = 0.1
    dropout: float = 0.2
    batching: str = "mixed"
    final_lr_fraction: float = 0.1

    @property
    def crop(self):
        return CropConfig(height_px=self.vit.height_px, patch=self.vit.patch, margin_m=self.crop_margin_m)

    def to_dict(self):
        d = asdict(self)
        d["vit"] = self.vit.as_dict()
        d["ffnn1"] = [list(x) for x in self.ffnn1]
        d["ffnn2"] = [list(x) for x in self.ffnn2]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["vit"] = VitConfig(**d["vit"])
        for k in ("ffnn1", "ffnn2"):
            if k in d:
                d[k] = tuple(tuple(x) for x in d[k])
        return cls(**d)


def desk_fpdnn_config(dist_scale_m, max_distance_m=70.0, **kw):
    """Reduced model for 8 px/m plans: 32-px crops, 8-px patches, 32-wide tokens."""
    ppm = kw.pop("pixels_per_meter", 8.0)
    vit = VitConfig(patch=8, height_px=32, dim=32, heads=2, depth=1, out_dim=32,
                    max_tokens=max_tokens_for(max_distance_m, ppm, VitConfig(patch=8, height_px=32)))
    return FpdnnConfig(vit=vit, pixels_per_meter=ppm, dist_scale_m=dist_scale_m,
                       max_distance_m=max_distance_m, **kw)


@dataclass
class FpdnnModel:
    store: ParameterStore
    cfg: FpdnnConfig
    seed: int = 0
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)


def init_fpdnn(cfg=FpdnnConfig(), seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_vit(store.scope("vit"), cfg.vit, rng)
    init_ffnn(store.scope("ffnn1"), list(cfg.ffnn1), rng, input_bias=0.3)
    init_ffnn(store.scope("ffnn2"), list(cfg.ffnn2), rng, final_bias=0.2, final_scale=0.1)
    return FpdnnModel(store=store, cfg=cfg, seed=seed)


@dataclass(frozen=True)
class FpdnnInput:
    """A prepared crop plus the measured pair it belongs to."""

    image: object
    rtt_m: float
    rss_dbm: float


@dataclass(frozen=True)
class PairSample:
    """One AP link whose crop is cut on demand from ``fp`` between ``ap`` and ``md``.

    ``d_true`` is the training label; ``walls`` is kept for diagnostics only.
    """

    fp: object
    md: tuple
    ap: tuple
    rtt_m: float
    rss_dbm: float
    d_true: float = float("nan")
    walls: int = -1
    key: tuple = ()

    def width_px(self, cfg):
        d = math.hypot(self.md[0] - self.ap[0], self.md[1] - self.ap[1])
        return crop_width_px(d, cfg.pixels_per_meter, cfg.crop)

    def pixels(self, cfg):
        return crop_and_rotate(self.fp, self.md, self.ap, cfg.crop).pixels


def fpdnn_forward(pixels, rtt_m, rss_dbm, model, training=False, rng=None):
    """Normalized range estimates ``(B,)`` for a batch of same-width crops ``(B, W, H)``."""
    cfg = model.cfg
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    b = pixels.shape[0]
    o_t = vit_forward(pixels, model.store.scope("vit"), cfg.vit, training=training, rng=rng)
    meas = np.stack([np.broadcast_to(np.asarray(rtt_m, dtype=np.float64) / cfg.dist_scale_m, (b,)),
                     np.broadcast_to(normalize_rss(rss_dbm), (b,))], axis=1)
    o_f1 = ffnn_apply(model.store.scope("ffnn1"), meas, list(cfg.ffnn1), training=training, rng=rng)
    u = ag.concat([o_t, o_f1], axis=-1)
    out = ffnn_apply(model.store.scope("ffnn2"), u, list(cfg.ffnn2), training=training, rng=rng)
    return ag.reshape(out, (b,))


def predict_input(inp, model):
    """Refined range in meters for one :class:`FpdnnInput`."""
    out = fpdnn_forward(inp.image.pixels, inp.rtt_m, inp.rss_dbm, model)
    return float(out.data[0]) * model.cfg.dist_scale_m


def _buckets(samples, cfg, batch_size, rng=None):
    by_w = defaultdict(list)
    for i, s in enumerate(samples):
        by_w[s.width_px(cfg)].append(i)
    batches = []
    for w in sorted(by_w):
        idx = np.asarray(by_w[w])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _steps(samples, cfg, rng):
    """Optimizer steps as lists of same-width index groups.

    ``"mixed"`` draws each step's batch uniformly and splits it by crop
    width, accumulating gradients across the groups; ``"bucket"`` fills each
    step from a single width.
    """
    if cfg.batching == "bucket":
        return [[idx] for idx in _buckets(samples, cfg, cfg.batch_size, rng)]
    widths = np.array([s.width_px(cfg) for s in samples])
    order = rng.permutation(len(samples))
    steps = []
    for s in range(0, len(order), cfg.batch_size):
        chunk = order[s:s + cfg.batch_size]
        steps.append([chunk[widths[chunk] == w] for w in np.unique(widths[chunk])])
    return steps


def cosine_lr(cfg, epoch):
    """Learning rate for ``epoch``: cosine decay from the base rate to ``final_lr_fraction`` of it."""
    if cfg.epochs <= 1:
        return cfg.learning_rate
    f = cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.learning_rate * f


def _stack(samples, idx, cfg):
    pix = np.stack([samples[i].pixels(cfg) for i in idx])
    rtt = np.array([samples[i].rtt_m for i in idx])
    rss = np.array([samples[i].rss_dbm for i in idx])
    return pix, rtt, rss


def predict_pairs(samples, model, batch_size=64):
    """Refined ranges (meters) for a list of :class:`PairSample`."""
    out = np.empty(len(samples))
    for idx in _buckets(samples, model.cfg, batch_size):
        pix, rtt, rss = _stack(samples, idx, model.cfg)
        out[idx] = fpdnn_forward(pix, rtt, rss, model).data * model.cfg.dist_scale_m
    return out


def _mse(samples, idx, model, training=False, rng=None):
    pix, rtt, rss = _stack(samples, idx, model.cfg)
    y = np.array([samples[i].d_true for i in idx]) / model.cfg.dist_scale_m
    pred = fpdnn_forward(pix, rtt, rss, model, training=training, rng=rng)
    return ag.mean(ag.square(ag.sub(pred, y)))


def evaluate_loss(samples, model, batch_size=64):
    if not samples:
        return float("nan")
    total = 0.0
    for idx in _buckets(samples, model.cfg, batch_size):
        total += float(_mse(samples, idx, model).data) * len(idx)
    return total / len(samples)


def train_fpdnn(samples, cfg=None, seed=0, model=None):
    """Adam on the normalized squared range error.

    A ``val_fraction`` share of the samples is held out and the parameters
    with the lowest validation loss are returned. A non-finite loss stops
    training and returns the best parameters so far.
    """
    if not samples:
        raise ValueError("train_fpdnn needs at least one sample")
    if any(not s.d_true > 0 for s in samples):
        raise ValueError("all labels must be positive distances")
    if model is None:
        model = init_fpdnn(cfg, seed)
    else:
        model = FpdnnModel(store=model.store.copy(), cfg=cfg or model.cfg, seed=seed)
    cfg = model.cfg
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples))) if len(samples) >= 10 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    state = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    best_loss = evaluate_loss(val, model) if val else evaluate_loss(train, model)
    best = model.store.state_dict()
    model.val_trace = [best_loss]
    for epoch in range(cfg.epochs):
        state.learning_rate = cosine_lr(cfg, epoch)
        total, seen, bad = 0.0, 0, False
        for step in _steps(train, cfg, rng):
            model.store.zero_grad()
            step_loss = 0.0
            n_step = sum(len(idx) for idx in step)
            for idx in step:
                loss = ag.mul(_mse(train, idx, model, training=True, rng=rng), len(idx) / n_step)
                loss.backward()
                step_loss += float(loss.data)
            if not np.isfinite(step_loss):
                bad = True
                break
            adam_step(model.store, state)
            total += step_loss * n_step
            seen += n_step
        if bad:
            log.error("non-finite FPDNN loss; keeping the best parameters so far")
            break
        model.loss_trace.append(total / max(seen, 1))
        vl = evaluate_loss(val, model) if val else model.loss_trace[-1]
        model.val_trace.append(vl)
        if vl < best_loss:
            best_loss, best = vl, model.store.state_dict()
    model.store.load_state_dict(best)
    return model


def refine_snapshot(snapshot, coarse, fp, ap_locations, model):
    """Refined ranges ``{(md, ap): meters}`` and fallback flags for one snapshot.

    Only AP links are refined. A pair whose crop cannot be prepared keeps its
    measured range and is flagged ``True``.
    """
    return refine_many([snapshot], [coarse], fp, ap_locations, model)[0]


def snapshot_pairs(snapshot, coarse, fp, ap_locations, cfg=None, snap_index=0):
    """Pair samples for every AP link of MDs with a coarse estimate, plus unrefinable keys."""
    pairs, failed = [], []
    for m in sorted(snapshot.records):
        if m not in coarse:
            continue
        est = (float(coarse[m][0]), float(coarse[m][1]))
        truth = snapshot.ground_truth.get(m)
        for r in snapshot.records[m]:
            if r.peer_kind != "ap" or r.peer_id not in ap_locations:
                continue
            ap = tuple(ap_locations[r.peer_id])
            md = fp.clamp(est) if not fp.contains(est) else est
            d_est = math.hypot(md[0] - ap[0], md[1] - ap[1])
            d_true = math.hypot(truth[0] - ap[0], truth[1] - ap[1]) if truth is not None else float("nan")
            key = (snap_index, m, r.peer_id)
            ok = d_est > 1e-9
            if ok and cfg is not None:
                ok = cfg.vit.tokens_for_width(crop_width_px(d_est, cfg.pixels_per_meter, cfg.crop)) \
                    <= cfg.vit.max_tokens
            if not ok:
                failed.append((key, r.rtt_m))
                continue
            pairs.append(PairSample(fp, md, ap, float(r.rtt_m), float(r.rss_dbm), d_true, key=key))
    return pairs, failed


def refine_many(snapshots, coarse_list, fp, ap_locations, model):
    """Batched :func:`refine_snapshot` over many snapshots of one plan."""
    pairs, failed = [], []
    for i, (snap, coarse) in enumerate(zip(snapshots, coarse_list)):
        p, f = snapshot_pairs(snap, coarse, fp, ap_locations, model.cfg, snap_index=i)
        pairs.extend(p)
        failed.extend(f)
    pred = predict_pairs(pairs, model) if pairs else np.empty(0)
    out = [({}, {}) for _ in snapshots]
    for s, z in zip(pairs, pred):
        i, m, k = s.key
        out[i][0][(m, k)] = float(z)
        out[i][1][(m, k)] = False
    for (i, m, k), z in failed:
        log.warning("crop failed for MD %s / AP %s; using the measured range", m, k)
        out[i][0][(m, k)] = float(z)
        out[i][1][(m, k)] = True
    return out


def dump_pairs_csv(path, samples, predictions):
    """Per-pair diagnostics: measured range, refined range, true distance, wall count."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["md", "ap", "rtt_m", "refined_m", "d_true_m", "walls"])
        for s, z in zip(samples, predictions):
            m, k = (s.key[-2], s.key[-1]) if len(s.key) >= 2 else ("", "")
            w.writerow([m, k, repr(float(s.rtt_m)), repr(float(z)), repr(float(s.d_true)), s.walls])


def save_fpdnn(path, model):
    return save_checkpoint(path, model.store, ARCHITECTURE, seed=model.seed,
                           extra={"config": model.cfg.to_dict(), "loss_trace": model.loss_trace,
                                  "val_trace": model.val_trace})


def load_fpdnn(path):
    store, header = load_checkpoint(path, expect_architecture=ARCHITECTURE)
    cfg = FpdnnConfig.from_dict(header["extra"]["config"])
    return FpdnnModel(store=store, cfg=cfg, seed=header.get("seed", 0),
                      loss_trace=header["extra"].get("loss_trace", []),
                      val_trace=header["extra"].get("val_trace", []))
