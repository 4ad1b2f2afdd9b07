"""Graph pre-localization: AP/MD graphs from snapshots and a message-passing
network that refines trilateration estimates into coarse MD locations.

All coordinates and ranges enter the networks divided by the plan's largest
extent, so features are in [0, 1] and a model is not tied to one plan size.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from planloc.localizer import LocalizationError, least_squares
from planloc.neural import autograd as ag
from planloc.neural.checkpoint import load_checkpoint, save_checkpoint
from planloc.neural.layers import GNN_MESSAGE, GNN_UPDATE, ParameterStore, ffnn_apply, init_ffnn
from planloc.neural.optim import AdamState, adam_step

log = logging.getLogger(__name__)

ARCHITECTURE = "gnn-v1"
MESSAGE_WIDTH = 9
UPDATE_WIDTH = 7
DEGREE_SCALE = 8.0


@dataclass(frozen=True)
class Edge:
    m: int
    n: int
    kind: str  # "ap" or "md"
    rtt_m: float
    rss_dbm: float
    rtt_std: float = 0.0


@dataclass
class GraphSnapshot:
    t: int
    ap_nodes: dict
    md_ids: list
    h0: dict
    edges: list
    scale: float
    truths: dict = field(default_factory=dict)
    init_flags: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def neighbors(self, m):
        return [(e.kind, e.n) for e in self.edges if e.m == m]


@dataclass(frozen=True)
class GnnConfig:
    layers: int = 3
    weight_sharing: bool = True
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if min(self.learning_rate, self.epochs, self.batch_size) <= 0:
            raise ValueError("learning rate, epochs and batch size must be positive")


@dataclass
class GnnModel:
    store: ParameterStore
    cfg: GnnConfig
    seed: int = 0
    loss_trace: list = field(default_factory=list)


def _rss_weights(rss):
    return 10.0 ** (np.asarray(rss, dtype=np.float64) / 20.0)


def build_graph(snapshot, ap_locations, fp=None, scale=None):
    """Graph of one snapshot.

    Each MD's initial feature is the least-squares fix over its AP ranges.
    When fewer than three APs are usable it falls back to the RSS-weighted
    centroid of its AP anchors and of neighbor MDs whose fix succeeded.
    MDs without any neighbor are left out and listed in ``excluded``.
    """
    if not snapshot.records:
        raise ValueError("empty snapshot")
    if scale is None:
        scale = float(max(fp.extent_m)) if fp is not None else 1.0
    md_present = set(snapshot.records)
    edges, h0, flags, excluded = [], {}, {}, []
    for m in sorted(snapshot.records):
        recs = [r for r in snapshot.records[m]
                if (r.peer_kind == "ap" and r.peer_id in ap_locations)
                or (r.peer_kind == "md" and r.peer_id in md_present and r.peer_id != m)]
        if not recs:
            log.warning("MD %s has no neighbors at t=%s; excluded", m, snapshot.t)
            excluded.append(m)
            continue
        for r in recs:
            edges.append(Edge(m, r.peer_id, r.peer_kind, float(r.rtt_m), float(r.rss_dbm),
                              float(r.rtt_std)))
    md_ids = sorted({e.m for e in edges})
    # MD-MD edges need both ends in the graph
    edges = [e for e in edges if e.kind == "ap" or e.n in md_ids]
    by_md = {m: [e for e in edges if e.m == m] for m in md_ids}
    for m in md_ids:
        dist = {e.n: e.rtt_m for e in by_md[m] if e.kind == "ap"}
        try:
            h0[m] = least_squares(dist, ap_locations)
            flags[m] = ("ls",)
        except LocalizationError:
            pass
    for m in md_ids:
        if m in h0:
            continue
        pts, rss = [], []
        for e in by_md[m]:
            if e.kind == "ap":
                pts.append(ap_locations[e.n])
                rss.append(e.rss_dbm)
            elif e.n in h0 and flags.get(e.n) == ("ls",):
                pts.append(h0[e.n])
                rss.append(e.rss_dbm)
        if not pts:
            pts = [ap_locations[k] for k in sorted(ap_locations)]
            rss = [0.0] * len(pts)
        w = _rss_weights(rss)
        h0[m] = (np.asarray(pts, dtype=np.float64) * w[:, None]).sum(axis=0) / w.sum()
        flags[m] = ("fallback",)
    truths = {m: tuple(snapshot.ground_truth[m]) for m in md_ids if m in snapshot.ground_truth}
    return GraphSnapshot(t=snapshot.t, ap_nodes={k: tuple(ap_locations[k]) for k in sorted(ap_locations)},
                         md_ids=md_ids, h0={m: np.asarray(h0[m], dtype=np.float64) for m in md_ids},
                         edges=edges, scale=scale, truths=truths, init_flags=flags, excluded=excluded)


def init_gnn(cfg=GnnConfig(), seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    rounds = 1 if cfg.weight_sharing else max(cfg.layers, 1)
    for r in range(rounds):
        init_ffnn(store.scope(f"msg{r}"), GNN_MESSAGE, rng)
        init_ffnn(store.scope(f"upd{r}"), GNN_UPDATE, rng, final_bias=0.2, final_scale=0.1)
    return GnnModel(store=store, cfg=cfg, seed=seed)


def message(store, x):
    """Message network on ``(..., 9)`` inputs."""
    return ffnn_apply(store, x, GNN_MESSAGE)


def aggregate(messages):
    """Elementwise mean of a non-empty list of messages."""
    if len(messages) == 0:
        raise ValueError("cannot aggregate an empty message list")
    return np.mean(np.asarray(messages, dtype=np.float64), axis=0)


def update(store, x):
    """Update network on ``(..., 7)`` inputs."""
    return ffnn_apply(store, x, GNN_UPDATE)


@dataclass
class _Batch:
    h0: np.ndarray          # (N, 2) normalized
    recv: np.ndarray        # (E,)
    send_md: np.ndarray     # (E,) MD index for MD senders, 0 otherwise
    md_mask: np.ndarray     # (E, 1)
    ap_feat: np.ndarray     # (E, 2) normalized anchor coordinates (0 for MD senders)
    static: np.ndarray      # (E, 5) [rtt, rss, is_ap, is_md, std]
    degree: np.ndarray      # (N, 1)
    scales: np.ndarray      # (N, 1)
    keys: list              # (graph index, md id) per node
    truth: np.ndarray | None


def _collate(graphs, need_truth=False):
    h0, keys, recv, send, mask, apf, static, deg, scales, truth = ([] for _ in range(10))
    offset = 0
    for gi, g in enumerate(graphs):
        index = {m: offset + i for i, m in enumerate(g.md_ids)}
        s = g.scale
        for m in g.md_ids:
            h0.append(g.h0[m] / s)
            keys.append((gi, m))
            scales.append(s)
            if need_truth:
                if m not in g.truths:
                    raise ValueError(f"graph t={g.t} lacks a label for MD {m}")
                truth.append(np.asarray(g.truths[m]) / s)
        counts = {m: 0 for m in g.md_ids}
        for e in g.edges:
            recv.append(index[e.m])
            counts[e.m] += 1
            if e.kind == "ap":
                send.append(0)
                mask.append(0.0)
                apf.append(np.asarray(g.ap_nodes[e.n]) / s)
                onehot = (1.0, 0.0)
            else:
                send.append(index[e.n])
                mask.append(1.0)
                apf.append((0.0, 0.0))
                onehot = (0.0, 1.0)
            static.append((e.rtt_m / s, (e.rss_dbm + 100.0) / 80.0) + onehot + (e.rtt_std,))
        deg.extend(counts[m] / DEGREE_SCALE for m in g.md_ids)
        offset += len(g.md_ids)
    return _Batch(h0=np.asarray(h0, dtype=np.float64).reshape(-1, 2), recv=np.asarray(recv, dtype=np.int64),
                  send_md=np.asarray(send, dtype=np.int64),
                  md_mask=np.asarray(mask, dtype=np.float64).reshape(-1, 1),
                  ap_feat=np.asarray(apf, dtype=np.float64).reshape(-1, 2),
                  static=np.asarray(static, dtype=np.float64).reshape(-1, 5),
                  degree=np.asarray(deg, dtype=np.float64).reshape(-1, 1),
                  scales=np.asarray(scales, dtype=np.float64).reshape(-1, 1), keys=keys,
                  truth=np.asarray(truth, dtype=np.float64).reshape(-1, 2) if need_truth else None)


def _forward_batch(batch, model):
    cfg = model.cfg
    h = ag.as_tensor(batch.h0)
    n = batch.h0.shape[0]
    for layer in range(cfg.layers):
        r = 0 if cfg.weight_sharing else layer
        sender = ag.add(ag.mul(ag.gather_rows(h, batch.send_md), batch.md_mask), batch.ap_feat)
        receiver = ag.gather_rows(h, batch.recv)
        x = ag.concat([sender, receiver, batch.static], axis=-1)
        msgs = message(model.store.scope(f"msg{r}"), x)
        beta = ag.segment_mean(msgs, batch.recv, n)
        u = ag.concat([h, beta, batch.h0, batch.degree], axis=-1)
        h = update(model.store.scope(f"upd{r}"), u)
    return h


def gnn_forward(graph, model):
    """Coarse locations ``{md: (x, y)}`` in meters; a list of graphs gives a list of maps."""
    graphs = graph if isinstance(graph, (list, tuple)) else [graph]
    if not graphs:
        return []
    batch = _collate(graphs)
    h = _forward_batch(batch, model).data * batch.scales
    out = [dict() for _ in graphs]
    for (gi, m), p in zip(batch.keys, h):
        out[gi][m] = p.copy()
    return out if isinstance(graph, (list, tuple)) else out[0]


def _loss(batch, model):
    diff = ag.sub(_forward_batch(batch, model), batch.truth)
    return ag.mean(ag.sum(ag.square(diff), axis=-1))


def _batch_loss(batch, model):
    return float(_loss(batch, model).data)


def gnn_loss(graphs, model):
    """Mean squared location error over the MDs of ``graphs`` (normalized units)."""
    return _loss(_collate(graphs, need_truth=True), model)


def train_gnn(graphs, cfg=GnnConfig(), seed=0, model=None):
    """Fit the network with Adam on mean squared location error (normalized units).

    ``model`` continues training an existing model (used for fine-tuning).
    The loss trace holds the training loss before training followed by one
    value per epoch.
    """
    graphs = [g for g in graphs if g.md_ids]
    if not graphs:
        raise ValueError("empty training set")
    if model is None:
        model = init_gnn(cfg, seed)
    else:
        model = GnnModel(store=model.store.copy(), cfg=cfg, seed=seed, loss_trace=list(model.loss_trace))
    state = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    full = _collate(graphs, need_truth=True)
    trace = [_batch_loss(full, model)]
    best = model.store.copy()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        for s in range(0, len(order), cfg.batch_size):
            chunk = [graphs[i] for i in order[s:s + cfg.batch_size]]
            model.store.zero_grad()
            loss = gnn_loss(chunk, model)
            if not np.isfinite(loss.data):
                log.error("non-finite GNN loss; restoring last good parameters")
                model.store.load_state_dict(best.state_dict())
                model.loss_trace = trace
                return model
            loss.backward()
            adam_step(model.store, state)
        trace.append(_batch_loss(full, model))
        best = model.store.copy()
    model.loss_trace = trace
    return model


def save_gnn(path, model):
    return save_checkpoint(path, model.store, ARCHITECTURE, seed=model.seed,
                           extra={"config": asdict(model.cfg), "loss_trace": model.loss_trace})


def load_gnn(path):
    store, header = load_checkpoint(path, expect_architecture=ARCHITECTURE)
    cfg = GnnConfig(**header["extra"]["config"])
    return GnnModel(store=store, cfg=cfg, seed=header.get("seed", 0),
                    loss_trace=header["extra"].get("loss_trace", []))
