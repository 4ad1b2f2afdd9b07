"""Shared tiny models and the finite-difference cases for every neural block."""

import math

import numpy as np

from planloc.fpdnn import FpdnnConfig, init_fpdnn, fpdnn_forward
from planloc.generator import GeneratorConfig, generator_forward, init_generator
from planloc.gnn import GnnConfig, gnn_loss, init_gnn, message, update
from planloc.neural import autograd as ag
from planloc.neural.layers import (FFNN1, FFNN2, FFNN3, FFNN4, GNN_MESSAGE, GNN_UPDATE, ParameterStore,
                                   ffnn_apply, init_ffnn, layer_norm, scaled_ffnn1, scaled_ffnn2, scaled_ffnn4)
from planloc.neural.vit import VitConfig, init_vit, patch_split_flatten, transformer_encode, vit_forward

TINY_VIT = VitConfig(patch=4, height_px=8, dim=8, heads=2, depth=1, out_dim=4, max_tokens=16)


def tiny_fpdnn_config(**kw):
    return FpdnnConfig(vit=TINY_VIT, ffnn1=tuple(scaled_ffnn1(6, 4)), ffnn2=tuple(scaled_ffnn2(8, 6, 3)),
                       pixels_per_meter=4.0, dist_scale_m=10.0, max_distance_m=7.0, **kw)


def tiny_generator_config(**kw):
    return GeneratorConfig(vit=TINY_VIT, ffnn1=tuple(scaled_ffnn1(6, 4, n_in=1)), ffnn2=tuple(scaled_ffnn4(8, 6)),
                           pixels_per_meter=4.0, dist_scale_m=10.0, max_distance_m=7.0, **kw)


def _mse(out, target):
    return ag.mean(ag.square(ag.sub(out, target)))


def _ffnn_case(spec, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_ffnn(store, spec, rng, input_bias=0.3)
    # offset the weights so no ReLU sits at a kink and biases are non-trivial
    for _, t in store.items():
        t.data = t.data + rng.normal(0, 0.05, t.data.shape)
    n_in = spec[0][1]
    n_out = [s for s in spec if s[0] == "linear"][-1][2]
    x = rng.normal(0.5, 0.5, (5, n_in))
    y = rng.normal(0.5, 0.2, (5, n_out))
    return (lambda: _mse(ffnn_apply(store, x, spec), y)), store


def _layer_norm_case(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(4, 6)))
    store.add("gamma", rng.normal(1.0, 0.2, 6))
    store.add("beta", rng.normal(0.0, 0.2, 6))
    w = rng.normal(size=(4, 6))
    return (lambda: ag.sum(ag.mul(layer_norm(store["x"], store["gamma"], store["beta"]), w))), store


def _vit_store(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_vit(store, TINY_VIT, rng)
    for name, t in store.items():
        if name.endswith(("bo", "bf", "b", "beta")):
            t.data = t.data + rng.normal(0, 0.1, t.data.shape)
    return store, rng


def _patch_case(seed):
    store, rng = _vit_store(seed)
    img = rng.random((2, 8, 8))
    w = rng.normal(size=(2, 4, 8))
    return (lambda: ag.sum(ag.mul(patch_split_flatten(img, store["E"], 4), w))), store


def _encoder_case(seed):
    store, rng = _vit_store(seed)
    sub = ParameterStore()
    for name, t in store.items():
        if name.startswith(("block", "head")):
            sub.add(name, t.data)
    sub.add("tokens", rng.normal(size=(2, 5, 8)))
    y = rng.random((2, 4))
    return (lambda: _mse(transformer_encode(sub["tokens"], sub, TINY_VIT), y)), sub


def _vit_case(seed):
    store, rng = _vit_store(seed)
    img = rng.random((2, 8, 8))
    y = rng.random((2, 4))
    return (lambda: _mse(vit_forward(img, store, TINY_VIT), y)), store


def _gnn_block_case(kind, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    spec = GNN_MESSAGE if kind == "message" else GNN_UPDATE
    init_ffnn(store, spec, rng, final_bias=0.2 if kind == "update" else 0.0)
    x = rng.random((6, spec[0][1]))
    y = rng.random((6, 2))
    fn = message if kind == "message" else update
    return (lambda: _mse(fn(store, x), y)), store


def _gnn_full_case(seed):
    from planloc.gnn import build_graph
    from planloc.scenarios import get_scenario
    from planloc.simworld import PropagationParams, generate_world_dataset
    from planloc.dataset import build_snapshots
    sc = get_scenario("mall")
    ds = generate_world_dataset(sc.floorplan(), sc.ap_locations, sc.trajectories(laps=1, n_md=2),
                                PropagationParams(), seed=seed, max_ap_links={2: 2})
    graphs = [build_graph(s, sc.ap_locations, sc.floorplan()) for s in build_snapshots(ds.all_records())[:6]]
    model = init_gnn(GnnConfig(layers=2), seed)
    return (lambda: gnn_loss(graphs, model)), model.store


def _fpdnn_case(seed):
    model = init_fpdnn(tiny_fpdnn_config(), seed)
    rng = np.random.default_rng(seed)
    img = rng.random((3, 8, 8))
    rtt, rss = rng.uniform(1, 6, 3), rng.uniform(-80, -40, 3)
    y = rng.uniform(0.1, 0.6, 3)
    return (lambda: _mse(fpdnn_forward(img, rtt, rss, model), y)), model.store


def _generator_case(seed):
    model = init_generator(tiny_generator_config(), seed)
    rng = np.random.default_rng(seed)
    img = rng.random((3, 8, 8))
    d = rng.uniform(1, 6, 3)
    y = rng.uniform(0.1, 0.6, (3, 2))
    return (lambda: _mse(generator_forward(d, img, model), y)), model.store


def gradient_cases(seed=0):
    """``{block name: (forward closure, store)}`` for the finite-difference suite."""
    return {
        "FFNN1": _ffnn_case(FFNN1, seed),
        "FFNN2": _ffnn_case(FFNN2, seed),
        "FFNN3": _ffnn_case(FFNN3, seed),
        "FFNN4": _ffnn_case(FFNN4, seed),
        "layer_norm": _layer_norm_case(seed),
        "patch_embed": _patch_case(seed),
        "re_attention_encoder": _encoder_case(seed),
        "vit": _vit_case(seed),
        "gnn_message": _gnn_block_case("message", seed),
        "gnn_update": _gnn_block_case("update", seed),
        "gnn_forward": _gnn_full_case(seed),
        "fpdnn": _fpdnn_case(seed),
        "generator": _generator_case(seed),
    }


def tiny_experiment(**kw):
    """Two-lap lab run with a couple of training epochs; seconds, not minutes."""
    from planloc.config import ExperimentConfig, PlanSpec
    base = dict(name="tiny", plans=(PlanSpec(scenario="lab", laps=2),), gnn=(("epochs", 2),),
                fpdnn=(("epochs", 1),), max_fpdnn_pairs=200, train_stride=4)
    base.update(kw)
    return ExperimentConfig(**base)


TINY_TOML = """\
[experiment]
name = "tiny"
protocol = "train-real"
seed = 7
max_fpdnn_pairs = 200
train_stride = 4

[[plans]]
scenario = "lab"
laps = 2

[gnn]
epochs = 2

[fpdnn]
epochs = 1
"""


TINY_TRANSFER_TOML = """\
[experiment]
name = "tiny-transfer"
protocol = "zero-shot"
calibrate = false
max_generator_samples = 100
grid_pitch_m = 2.0
max_fpdnn_pairs = 200

[source]
scenario = "office"
laps = 1

[target]
scenario = "lab"
laps = 2

[generator]
epochs = 1

[gnn]
epochs = 2

[fpdnn]
epochs = 1
"""


def brute_crop(fp, md, ap, height, patch):
    """Per-pixel loop with trigonometric axes and scalar raster lookups."""
    ppm = fp.pixels_per_meter
    d = math.dist(md, ap)
    theta = math.atan2(md[1] - ap[1], md[0] - ap[0])
    w = max(1, math.ceil(d * ppm / patch - 1e-9)) * patch
    out = np.empty((w, height))
    rows, cols = fp.raster.shape
    for i in range(w):
        s = (i + 0.5) / ppm
        for j in range(height):
            t = (j + 0.5 - height / 2) / ppm
            x = ap[0] + s * math.cos(theta) - t * math.sin(theta)
            y = ap[1] + s * math.sin(theta) + t * math.cos(theta)
            c = math.floor(fp.origin_px[0] + x * ppm)
            r = math.floor(fp.origin_px[1] + y * ppm)
            out[i, j] = fp.raster[r, c] if 0 <= r < rows and 0 <= c < cols else 1.0
    return out


ACCEPTANCE_LINES = []


def record(n, title, ok, detail):
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append((n, line))
    print(line)
