"""Visual feature extractor: a small patch-embedding transformer encoder.

An image is cut into non-overlapping patches (row-major), each patch
linearly embedded, learned positional embeddings added, and the token grid
passed through pre-normalization encoder blocks with multi-head
self-attention and a leaky-rectifier MLP.  The concept stage consumes the
full token grid, so no classification token exists.
"""

import numpy as np

from . import autodiff as ad


def num_patches(cfg):
    """Patch-grid shape (H_p, W_p) for a validated config."""
    cfg.validate()
    return cfg.num_patches()


def patch_rows(images, patch_size):
    """Flatten (B, C, H, W) images into (B, n_tokens, C*p*p) patch rows,
    row-major over the patch grid."""
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"extents ({h}, {w}) not divisible by patch size {p}")
    hp, wp = h // p, w // p
    pat = images.reshape(b, c, hp, p, wp, p)
    pat = pat.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(pat.reshape(b, hp * wp, c * p * p))


def images_to_patches(images, cfg):
    """patch_rows with the extents validated against a model config."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    eh, ew = cfg.image_size
    if (h, w) != (eh, ew) or c != cfg.channels:
        raise ValueError(f"image extents {(c, h, w)} do not match config "
                         f"({cfg.channels}, {eh}, {ew})")
    return patch_rows(images, cfg.patch_size)


def attention_layer(store, pre, x, heads, dropout, train, rng):
    """Bidirectional multi-head self-attention over (B, n, d) tokens,
    reading weights registered under `pre` + "attn."."""
    b, n, d = x.shape
    dh = d // heads

    def proj(nm):
        y = ad.add(ad.matmul(x, store[pre + "attn.w" + nm]), store[pre + f"attn.{nm}b"])
        y = ad.reshape(y, (b, n, heads, dh))
        return ad.transpose(y, (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = ad.add(ad.matmul(ctx, store[pre + "attn.wo"]), store[pre + "attn.ob"])
    return ad.dropout(out, dropout, train, rng)


def mlp_layer(store, pre, x, dropout, train, rng):
    h = ad.leaky_relu(ad.add(ad.matmul(x, store[pre + "mlp.w1"]), store[pre + "mlp.b1"]))
    h = ad.dropout(h, dropout, train, rng)
    return ad.add(ad.matmul(h, store[pre + "mlp.w2"]), store[pre + "mlp.b2"])


def encoder_block(store, pre, x, heads, dropout, train, rng):
    """Pre-normalization transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = ad.layer_norm(x, store[pre + "ln1.gamma"], store[pre + "ln1.beta"])
    x = ad.add(x, attention_layer(store, pre, h, heads, dropout, train, rng))
    h = ad.layer_norm(x, store[pre + "ln2.gamma"], store[pre + "ln2.beta"])
    return ad.add(x, mlp_layer(store, pre, h, dropout, train, rng))


def add_block_params(store, init, pre, d, mlp_hidden):
    """Register one encoder block's parameters under the given prefix."""
    add = store.add
    add(pre + "ln1.gamma", init.draw((d,), "ones"))
    add(pre + "ln1.beta", init.draw((d,), "zeros"))
    for nm in ("wq", "wk", "wv", "wo"):
        add(pre + "attn." + nm, init.draw((d, d)))
        add(pre + "attn." + nm[1] + "b", init.draw((d,), "zeros"))
    add(pre + "ln2.gamma", init.draw((d,), "ones"))
    add(pre + "ln2.beta", init.draw((d,), "zeros"))
    add(pre + "mlp.w1", init.draw((d, mlp_hidden)))
    add(pre + "mlp.b1", init.draw((mlp_hidden,), "zeros"))
    add(pre + "mlp.w2", init.draw((mlp_hidden, d)))
    add(pre + "mlp.b2", init.draw((d,), "zeros"))


class Backbone:
    """Encoder with parameters registered under the "backbone." prefix."""

    def __init__(self, cfg, store, init):
        self.cfg = cfg
        self.store = store
        d = cfg.d_model
        patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size
        add = store.add
        add("backbone.embed.w", init.draw((patch_dim, d)))
        add("backbone.embed.b", init.draw((d,), "zeros"))
        if cfg.pos_embed:
            add("backbone.pos", init.draw((cfg.n_tokens(), d)))
        for i in range(cfg.n_blocks):
            add_block_params(store, init, f"backbone.block{i}.", d, cfg.mlp_hidden)
        add("backbone.final.gamma", init.draw((d,), "ones"))
        add("backbone.final.beta", init.draw((d,), "zeros"))

    def encode(self, x, train=False, rng=None):
        """Map images (B, C, H, W) or precomputed patch rows (B, n, patch_dim)
        to tokens (B, n_tokens, d_model)."""
        cfg = self.cfg
        s = self.store
        if isinstance(x, ad.DTensor):
            pat = x
        else:
            x = np.asarray(x, dtype=np.float64)
            patch_dim = cfg.channels * cfg.patch_size ** 2
            if x.ndim == 4 or x.shape == (cfg.channels, *cfg.image_size):
                x = images_to_patches(x, cfg)
            elif x.ndim != 3 or x.shape[1:] != (cfg.n_tokens(), patch_dim):
                raise ValueError(f"input shaped {x.shape}: expected images "
                                 f"({cfg.channels}, {cfg.image_size[0]}, {cfg.image_size[1]}) "
                                 f"or patch rows (B, {cfg.n_tokens()}, {patch_dim})")
            pat = ad.tensor(x)

        tok = ad.add(ad.matmul(pat, s["backbone.embed.w"]), s["backbone.embed.b"])
        if cfg.pos_embed:
            tok = ad.add(tok, s["backbone.pos"])
        for i in range(cfg.n_blocks):
            tok = encoder_block(s, f"backbone.block{i}.", tok, cfg.n_attn_heads,
                                cfg.dropout, train, rng)
        return ad.layer_norm(tok, s["backbone.final.gamma"], s["backbone.final.beta"])
