"""Patch embedding, position embedding and the re-attention transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from planloc.neural import autograd as ag
from planloc.neural.layers import glorot_uniform, layer_norm


@dataclass(frozen=True)
class VitConfig:
    """Shape configuration of the image branch.

    The defaults are the full-size model: 256-pixel-tall crops cut into
    32 x 32 patches embedded into 512 dimensions with two attention heads.
    """

    patch: int = 32
    height_px: int = 256
    dim: int = 512
    heads: int = 2
    depth: int = 1
    out_dim: int = 32
    max_tokens: int = 1024

    @property
    def patch_dim(self):
        return self.patch * self.patch

    @property
    def head_dim(self):
        return self.dim // self.heads

    def tokens_for_width(self, width_px):
        return (width_px // self.patch) * (self.height_px // self.patch)

    def as_dict(self):
        return dict(patch=self.patch, height_px=self.height_px, dim=self.dim, heads=self.heads,
                    depth=self.depth, out_dim=self.out_dim, max_tokens=self.max_tokens)


def init_vit(store, cfg, rng):
    """Create E, s_class, E_pos and the encoder/head parameters under ``store``."""
    if cfg.depth < 1:
        raise ValueError("encoder depth must be at least 1")
    if cfg.dim % cfg.heads:
        raise ValueError("dim must be divisible by the number of heads")
    d = cfg.dim
    store.add("E", glorot_uniform(rng, cfg.patch_dim, d))
    store.add("s_class", rng.normal(0.0, 0.02, size=(1, d)))
    store.add("E_pos", rng.normal(0.0, 0.02, size=(cfg.max_tokens + 1, d)))
    for b in range(cfg.depth):
        blk = store.scope(f"block{b}")
        blk.add("ln1.gamma", np.ones(d))
        blk.add("ln1.beta", np.zeros(d))
        blk.add("Wqkv", glorot_uniform(rng, d, 3 * d))
        blk.add("theta", np.eye(cfg.heads))
        blk.add("Wo", glorot_uniform(rng, d, d))
        blk.add("bo", np.zeros(d))
        blk.add("ln2.gamma", np.ones(d))
        blk.add("ln2.beta", np.zeros(d))
        blk.add("Wf", glorot_uniform(rng, d, d))
        blk.add("bf", np.zeros(d))
    head = store.scope("head")
    head.add("ln.gamma", np.ones(d))
    head.add("ln.beta", np.zeros(d))
    head.add("W", glorot_uniform(rng, d, cfg.out_dim))
    head.add("b", np.zeros(cfg.out_dim))
    return store


def split_patches(pixels, patch):
    """Cut ``(..., W, H)`` images into ``(..., N_s, P*P)`` flattened patches.

    Patches are ordered with the along-axis (W) patch index outermost; inside a
    patch the elements are row-major over (along, across).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    *lead, w, h = pixels.shape
    if w % patch or h % patch:
        raise ValueError(f"image {w}x{h} is not divisible by patch size {patch}")
    nw, nh = w // patch, h // patch
    x = pixels.reshape(*lead, nw, patch, nh, patch)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)
    return x.reshape(*lead, nw * nh, patch * patch)


def patch_split_flatten(pixels, E, patch):
    """Flattened patches right-multiplied by the embedding matrix ``E``."""
    return ag.matmul(split_patches(pixels, patch), E)


def embed_tokens(F, s_class, E_pos):
    """Prepend the class token and add the first ``N_s + 1`` position rows."""
    F = ag.as_tensor(F)
    batched = F.ndim == 3
    if not batched:
        F = ag.reshape(F, (1,) + F.shape)
    b, n_s, d = F.shape
    n_max = E_pos.shape[0] - 1
    if n_s > n_max:
        raise ValueError("crop exceeds configured maximum distance "
                         f"({n_s} patches > {n_max})")
    cls = ag.add(np.zeros((b, 1, d)), ag.reshape(s_class, (1, 1, d)))
    tokens = ag.concat([cls, F], axis=1)
    out = ag.add(tokens, ag.getitem(E_pos, slice(0, n_s + 1)))
    return out if batched else ag.reshape(out, (n_s + 1, d))


def re_attention(x, blk, heads, return_maps=False):
    """Multi-head attention whose per-head maps are mixed by a learnable head x head matrix."""
    b, n, d = x.shape
    dh = d // heads
    qkv = ag.matmul(x, blk["Wqkv"])
    qkv = ag.transpose(ag.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ag.softmax(scores, axis=-1)
    mixed = ag.einsum("hg,bhnm->bgnm", blk["theta"], attn)
    out = ag.matmul(mixed, v)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = ag.add(ag.matmul(out, blk["Wo"]), blk["bo"])
    if return_maps:
        return out, attn
    return out


def transformer_encode(U, store, cfg, training=False, rng=None, dropout=0.2, return_maps=False):
    """Encode ``(B, N_s+1, D)`` tokens into ``(B, out_dim)`` features.

    Each block applies norm, re-attention and a residual add, then norm, a
    GELU feed-forward layer with dropout and a second residual add. Patch
    tokens (not the class token) are mean-pooled before the output head.
    """
    U = ag.as_tensor(U)
    batched = U.ndim == 3
    x = U if batched else ag.reshape(U, (1,) + U.shape)
    if x.shape[-1] != cfg.dim:
        raise ValueError(f"token width {x.shape[-1]} != model dim {cfg.dim}")
    if cfg.depth < 1:
        raise ValueError("encoder depth must be at least 1")
    maps = []
    for b in range(cfg.depth):
        blk = store.scope(f"block{b}")
        h = layer_norm(x, blk["ln1.gamma"], blk["ln1.beta"])
        att = re_attention(h, blk, cfg.heads, return_maps=return_maps)
        if return_maps:
            att, a = att
            maps.append(a.data)
        x = ag.add(x, att)
        h = layer_norm(x, blk["ln2.gamma"], blk["ln2.beta"])
        h = ag.gelu(ag.add(ag.matmul(h, blk["Wf"]), blk["bf"]))
        h = ag.dropout(h, dropout, rng, training)
        x = ag.add(x, h)
    pooled = ag.mean(ag.getitem(x, (slice(None), slice(1, None))), axis=1)
    head = store.scope("head")
    o = layer_norm(pooled, head["ln.gamma"], head["ln.beta"])
    o = ag.relu(ag.add(ag.matmul(o, head["W"]), head["b"]))
    if not batched:
        o = ag.reshape(o, (1, cfg.out_dim))
    return (o, maps) if return_maps else o


def vit_forward(pixels, store, cfg, training=False, rng=None):
    """Full image branch: patches, embedding, encoder. ``pixels`` is ``(B, W, H)``."""
    F = patch_split_flatten(pixels, store["E"], cfg.patch)
    U = embed_tokens(F, store["s_class"], store["E_pos"])
    return transformer_encode(U, store, cfg, training=training, rng=rng)
