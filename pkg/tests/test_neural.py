import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from planloc.fpdnn import fpdnn_forward, init_fpdnn
from planloc.generator import generator_forward, init_generator
from planloc.neural import autograd as ag
from planloc.neural.checkpoint import load_checkpoint, save_checkpoint
from planloc.neural.layers import FFNN1, ParameterStore, ffnn_apply, init_ffnn, layer_norm
from planloc.neural.optim import AdamState, adam_step
from planloc.neural.vit import (VitConfig, embed_tokens, init_vit, patch_split_flatten, re_attention,
                                split_patches, transformer_encode)

from helpers import TINY_VIT, tiny_fpdnn_config, tiny_generator_config


# --- independent numpy forward ----------------------------------------------

def np_ln(x, g, b, eps=1e-10):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def np_ffnn(P, prefix, x, spec):
    for i, layer in enumerate(spec):
        if layer[0] == "linear":
            x = x @ P[f"{prefix}l{i}.W"] + P[f"{prefix}l{i}.b"]
        elif layer[0] == "relu":
            x = np.maximum(x, 0)
        elif layer[0] == "layernorm":
            x = np_ln(x, P[f"{prefix}l{i}.gamma"], P[f"{prefix}l{i}.beta"])
    return x


def np_patches(img, p):
    """Loop-based patch extraction: along-axis patch index outer, row-major inside."""
    w, h = img.shape
    out = []
    for a in range(w // p):
        for c in range(h // p):
            out.append(img[a * p:(a + 1) * p, c * p:(c + 1) * p].reshape(-1))
    return np.array(out)


def np_vit(P, pre, img, cfg):
    F = np_patches(img, cfg.patch) @ P[pre + "E"]
    U = np.vstack([P[pre + "s_class"], F]) + P[pre + "E_pos"][: len(F) + 1]
    x = U
    for b in range(cfg.depth):
        k = f"{pre}block{b}."
        h = np_ln(x, P[k + "ln1.gamma"], P[k + "ln1.beta"])
        qkv = h @ P[k + "Wqkv"]
        d, dh = cfg.dim, cfg.dim // cfg.heads
        q, kk, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        heads_attn = []
        for i in range(cfg.heads):
            s = q[:, i * dh:(i + 1) * dh] @ kk[:, i * dh:(i + 1) * dh].T / math.sqrt(dh)
            e = np.exp(s - s.max(1, keepdims=True))
            heads_attn.append(e / e.sum(1, keepdims=True))
        theta = P[k + "theta"]
        outs = []
        for g in range(cfg.heads):
            mixed = sum(theta[i, g] * heads_attn[i] for i in range(cfg.heads))
            outs.append(mixed @ v[:, g * dh:(g + 1) * dh])
        x = x + np.hstack(outs) @ P[k + "Wo"] + P[k + "bo"]
        h = np_ln(x, P[k + "ln2.gamma"], P[k + "ln2.beta"])
        x = x + np_gelu(h @ P[k + "Wf"] + P[k + "bf"])
    pooled = x[1:].mean(0)
    o = np_ln(pooled, P[pre + "head.ln.gamma"], P[pre + "head.ln.beta"])
    return np.maximum(o @ P[pre + "head.W"] + P[pre + "head.b"], 0)


def params(store):
    return {k: t.data for k, t in store.items()}


def _perturb(store, seed):
    rng = np.random.default_rng(seed)
    for _, t in store.items():
        t.data = t.data + rng.normal(0, 0.1, t.data.shape)


def test_fpdnn_manual_forward():
    cfg = tiny_fpdnn_config()
    model = init_fpdnn(cfg, 3)
    _perturb(model.store, 4)
    P = params(model.store)
    rng = np.random.default_rng(5)
    img = rng.random((8, 8))
    rtt, rss = 4.2, -61.0
    o_t = np_vit(P, "vit.", img, cfg.vit)
    o_f1 = np_ffnn(P, "ffnn1.", np.array([rtt / cfg.dist_scale_m, (rss + 100) / 80]), list(cfg.ffnn1))
    expect = np_ffnn(P, "ffnn2.", np.concatenate([o_t, o_f1]), list(cfg.ffnn2))[0]
    got = fpdnn_forward(img, rtt, rss, model).data[0]
    assert abs(got - expect) < 1e-10


def test_generator_manual_forward():
    cfg = tiny_generator_config()
    model = init_generator(cfg, 3)
    _perturb(model.store, 6)
    P = params(model.store)
    img = np.random.default_rng(7).random((8, 8))
    o_t = np_vit(P, "vit.", img, cfg.vit)
    o_f3 = np_ffnn(P, "ffnn3.", np.array([3.3 / cfg.dist_scale_m]), list(cfg.ffnn1))
    expect = np_ffnn(P, "ffnn4.", np.concatenate([o_t, o_f3]), list(cfg.ffnn2))
    got = generator_forward(3.3, img, model).data[0]
    assert np.max(np.abs(got - expect)) < 1e-10


def test_zero_head_gives_zero():
    model = init_fpdnn(tiny_fpdnn_config(), 0)
    for name, t in model.store.items():
        if name.startswith("ffnn2."):
            t.data = np.zeros_like(t.data)
    out = fpdnn_forward(np.random.default_rng(0).random((8, 8)), 3.0, -50.0, model).data
    assert out[0] == 0.0


def test_zero_generator_head():
    model = init_generator(tiny_generator_config(), 0)
    for name, t in model.store.items():
        if name.startswith("ffnn4."):
            t.data = np.zeros_like(t.data)
    from planloc.generator import generate
    rtt, rss = generate(2.0, np.ones((8, 8)), model)
    assert rtt[0] == 0.0 and rss[0] == -100.0


def test_batch_position_invariance():
    model = init_fpdnn(tiny_fpdnn_config(), 1)
    rng = np.random.default_rng(2)
    imgs, rtt, rss = rng.random((4, 8, 8)), rng.uniform(1, 5, 4), rng.uniform(-80, -40, 4)
    full = fpdnn_forward(imgs, rtt, rss, model).data
    perm = [2, 0, 3, 1]
    permuted = fpdnn_forward(imgs[perm], rtt[perm], rss[perm], model).data
    assert np.array_equal(full[perm], permuted)
    single = [fpdnn_forward(imgs[i], rtt[i], rss[i], model).data[0] for i in range(4)]
    assert np.allclose(single, full, atol=1e-14, rtol=0)


# --- FFNN ------------------------------------------------------------------

def test_ffnn1_width():
    store = ParameterStore()
    init_ffnn(store, FFNN1, np.random.default_rng(0))
    assert ffnn_apply(store, np.ones((3, 2)), FFNN1).shape == (3, 32)


def test_ffnn_zero_weights():
    spec = [("linear", 3, 4), ("relu",)]
    store = ParameterStore()
    store.add("l0.W", np.zeros((3, 4)))
    store.add("l0.b", np.zeros(4))
    assert np.all(ffnn_apply(store, np.ones((2, 3)), spec).data == 0)


def test_ffnn_identity_layer():
    spec = [("linear", 3, 3)]
    store = ParameterStore()
    store.add("l0.W", np.eye(3))
    store.add("l0.b", np.zeros(3))
    x = np.random.default_rng(0).normal(size=(2, 3))
    assert np.array_equal(ffnn_apply(store, x, spec).data, x)


def test_ffnn_errors():
    store = ParameterStore()
    init_ffnn(store, FFNN1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="width"):
        ffnn_apply(store, np.ones((1, 3)), FFNN1)
    bad = [("linear", 2, 2), ("tanh",)]
    s2 = ParameterStore()
    init_ffnn(s2, bad, np.random.default_rng(0))
    with pytest.raises(ValueError, match="unknown"):
        ffnn_apply(s2, np.ones((1, 2)), bad)


def test_dropout_eval_identity():
    x = np.random.default_rng(0).normal(size=(5, 7))
    assert ag.dropout(x, 0.2, None, training=False).data is not None
    assert np.array_equal(ag.dropout(x, 0.2, None, training=False).data, x)
    y = ag.dropout(x, 0.5, np.random.default_rng(1), training=True).data
    assert np.any(y == 0) and np.allclose(y[y != 0], 2 * x[y != 0])


@given(st.integers(0, 10_000))
def test_layer_norm_stats(seed):
    x = np.random.default_rng(seed).normal(3, 5, (4, 16))
    y = layer_norm(x, np.ones(16), np.zeros(16)).data
    assert np.all(np.abs(y.mean(-1)) < 1e-9) and np.all(np.abs(y.var(-1) - 1) < 1e-9)


# --- ViT pieces ------------------------------------------------------------

def test_patch_count():
    assert split_patches(np.zeros((320, 256)), 32).shape == (80, 1024)


def test_patch_order_matches_loop():
    img = np.random.default_rng(0).random((16, 8))
    assert np.array_equal(split_patches(img, 4), np_patches(img, 4))


def test_patch_zero_embedding():
    out = patch_split_flatten(np.random.default_rng(0).random((8, 8)), np.zeros((16, 8)), 4)
    assert np.all(out.data == 0)


def test_patch_constant_image_rows_equal():
    E = np.random.default_rng(0).normal(size=(16, 8))
    out = patch_split_flatten(np.full((12, 8), 0.3), E, 4).data
    assert np.allclose(out, out[0], atol=0, rtol=0)


def test_patch_non_divisible():
    with pytest.raises(ValueError, match="divisible"):
        split_patches(np.zeros((10, 8)), 4)


def test_embed_tokens_cases():
    rng = np.random.default_rng(0)
    F, s, E = rng.normal(size=(3, 8)), rng.normal(size=(1, 8)), rng.normal(size=(4, 8))
    assert np.array_equal(embed_tokens(F, s, np.zeros((4, 8))).data, np.vstack([s, F]))
    assert np.array_equal(embed_tokens(F, s, E).data, np.vstack([s, F]) + E)  # N_s = N_max
    assert np.array_equal(embed_tokens(np.zeros((2, 8)), np.zeros((1, 8)), E).data, E[:3])
    with pytest.raises(ValueError, match="maximum distance"):
        embed_tokens(rng.normal(size=(4, 8)), s, E)


def _block(seed=0, cfg=TINY_VIT):
    store = ParameterStore()
    init_vit(store, cfg, np.random.default_rng(seed))
    return store


def test_attention_rows_sum_to_one():
    store = _block()
    x = ag.as_tensor(np.random.default_rng(1).normal(size=(2, 5, 8)))
    _, maps = re_attention(x, store.scope("block0"), 2, return_maps=True)
    assert np.allclose(maps.data.sum(-1), 1.0, atol=1e-12)


def test_identity_mixing_is_standard_attention():
    store = _block()
    blk = store.scope("block0")
    x = np.random.default_rng(2).normal(size=(1, 5, 8))
    got = re_attention(ag.as_tensor(x), blk, 2).data[0]
    # textbook multi-head attention
    Wq, Wk, Wv = np.split(blk["Wqkv"].data, 3, axis=1)
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        q, k, v = x[0] @ Wq[:, sl], x[0] @ Wk[:, sl], x[0] @ Wv[:, sl]
        s = q @ k.T / 2.0
        a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        heads.append(a @ v)
    expect = np.hstack(heads) @ blk["Wo"].data + blk["bo"].data
    assert np.allclose(got, expect, atol=1e-12)


def test_single_token_zero_projections():
    store = _block()
    blk = store.scope("block0")
    for k in ("Wqkv", "Wo", "bo", "Wf", "bf"):
        blk[k].data = np.zeros_like(blk[k].data)
    tok = np.random.default_rng(3).normal(size=(2, 8))  # class token + one patch token
    got = transformer_encode(tok, store, TINY_VIT).data[0]
    h = store.scope("head")
    expect = np.maximum(np_ln(tok[1], h["ln.gamma"].data, h["ln.beta"].data) @ h["W"].data + h["b"].data, 0)
    assert np.allclose(got, expect, atol=1e-12)


def test_encoder_depth_and_width_errors():
    with pytest.raises(ValueError):
        init_vit(ParameterStore(), VitConfig(depth=0), np.random.default_rng(0))
    store = _block()
    with pytest.raises(ValueError, match="width"):
        transformer_encode(np.zeros((3, 6)), store, TINY_VIT)


def test_encoder_per_sample_batch_order():
    store = _block()
    U = np.random.default_rng(4).normal(size=(3, 5, 8))
    full = transformer_encode(U, store, TINY_VIT).data
    rev = transformer_encode(U[::-1], store, TINY_VIT).data
    assert np.allclose(full[::-1], rev, atol=1e-14, rtol=0)


# --- Adam ------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    store = ParameterStore()
    store.add("w", np.array([1.0, -2.0]))
    store["w"].grad = np.zeros(2)
    adam_step(store, AdamState(weight_decay=0.0))
    assert np.array_equal(store["w"].data, [1.0, -2.0])


def test_adam_sign():
    store = ParameterStore()
    store.add("w", np.array([0.0]))
    st_ = AdamState(learning_rate=0.01, weight_decay=0.0)
    for _ in range(50):
        store["w"].grad = np.array([3.0])
        adam_step(store, st_)
    assert store["w"].data[0] < 0


def test_adam_matches_scripted_recurrence():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=2)
    grads = rng.normal(size=(3, 2))
    lr, wd, b1, b2, eps = 1e-2, 1e-3, 0.9, 0.999, 1e-8
    store = ParameterStore()
    store.add("w", w0.copy())
    state = AdamState(learning_rate=lr, weight_decay=wd)
    w, m, v = w0.copy(), np.zeros(2), np.zeros(2)
    for t, g in enumerate(grads, start=1):
        store["w"].grad = g.copy()
        adam_step(store, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * wd * w
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert np.max(np.abs(store["w"].data - w)) < 1e-12
    assert store["w"].grad is None and state.step == 3


def test_adam_nan_aborts():
    store = ParameterStore()
    store.add("w", np.array([1.0]))
    store["w"].grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(store, AdamState())
    assert store["w"].data[0] == 1.0


# --- parameter store and checkpoints ---------------------------------------

def test_store_names_unique():
    store = ParameterStore()
    store.add("a", 1.0)
    with pytest.raises(KeyError):
        store.add("a", 2.0)
    assert store.scope("x").add("a", 3.0).name == "x.a"


def test_checkpoint_round_trip(tmp_path):
    store = _block()
    store.add("frozen", np.arange(3.0), trainable=False)
    sha = save_checkpoint(tmp_path / "m.ckpt", store, "test-v1", seed=9, step=4)
    back, header = load_checkpoint(tmp_path / "m.ckpt", expect_architecture="test-v1")
    assert header["seed"] == 9 and header["step"] == 4 and len(sha) == 64
    for k, t in store.items():
        assert np.array_equal(back[k].data, t.data.astype(np.float32).astype(np.float64))
    assert not back.is_trainable("frozen")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"PLCK"


def test_checkpoint_errors(tmp_path):
    store = _block()
    save_checkpoint(tmp_path / "m.ckpt", store, "a-v1")
    with pytest.raises(ValueError, match="architecture"):
        load_checkpoint(tmp_path / "m.ckpt", expect_architecture="b-v1")
    (tmp_path / "junk").write_bytes(b"hello world")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk")


def test_checkpoint_bytes_deterministic(tmp_path):
    a = save_checkpoint(tmp_path / "a", _block(5), "x")
    b = save_checkpoint(tmp_path / "b", _block(5), "x")
    assert a == b
