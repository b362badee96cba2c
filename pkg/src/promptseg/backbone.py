"""The frozen segmenter: patch embedding, transformer encoder, grid prompt
tokens, two-way attention decoder, and per-patch mask head.

Everything is sized by `BackboneConfig`. The default is a desk-scale model
(128x128 images, 8x8 patches, 8 encoder layers, embed dim 64) that trains on
one CPU core in minutes while keeping the full structure of the real thing:
pre-norm transformer blocks, multi-head attention, a token-grid prompt stream,
and a two-way cross-attention decoder whose per-patch logits are replicated
back to pixel resolution.

Adaptation strategies plug in through two narrow hook points: an optional
image preprocessor and per-depth encoder block overrides (see strategies.py).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from .tensor import (
    ParameterStore,
    Tensor,
    attention,
    expand,
    gelu,
    layer_norm,
    linear,
    reshape,
    sigmoid,
    transpose,
    upsample_nearest,
)

__all__ = [
    "BackboneConfig",
    "init_backbone",
    "grid_prompt_tokens",
    "patch_embed",
    "vit_layer",
    "encode_image",
    "two_way_block",
    "decode_mask",
    "forward",
    "forward_from_leaves",
    "count_params",
]


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the segmenter. Defaults are the desk-scale configuration."""

    height: int = 128
    width: int = 128
    patch_h: int = 8
    patch_w: int = 8
    embed_dim: int = 64
    layers: int = 8
    heads: int = 4
    mlp_hidden: int = 256
    decoder_blocks: int = 2
    mask_hidden: int = 64
    channels: int = 1

    def __post_init__(self):
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ValueError("image %dx%d not divisible by patch %dx%d"
                             % (self.height, self.width, self.patch_h, self.patch_w))
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim %d not divisible by %d heads"
                             % (self.embed_dim, self.heads))
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")
        if self.decoder_blocks < 2:
            raise ValueError("need at least two decoder blocks")

    @property
    def grid_rows(self):
        return self.height // self.patch_h

    @property
    def grid_cols(self):
        return self.width // self.patch_w

    @property
    def tokens(self):
        return self.grid_rows * self.grid_cols

    def param_count(self):
        """Closed-form size of the parameter store built by init_backbone."""
        d, mh, mk = self.embed_dim, self.mlp_hidden, self.mask_hidden
        embed = d * self.channels * self.patch_h * self.patch_w + self.tokens * d
        grid = d
        per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * mh + mh + mh * d + d)
        per_block = 2 * d + 4 * (d * d + d) + 2 * d + 4 * (d * d + d)
        head = 2 * d + d * mk + mk + mk * 1 + 1
        return (embed + grid + self.layers * per_layer
                + self.decoder_blocks * per_block + head)

    def to_meta(self):
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta):
        kwargs = {k: int(meta[k]) for k in (
            "height", "width", "patch_h", "patch_w", "embed_dim", "layers",
            "heads", "mlp_hidden", "decoder_blocks", "mask_hidden", "channels")}
        return cls(**kwargs)


def _xavier(rng, fan_in, fan_out):
    # unit-scale signal pathways matter here: attention value/output maps
    # must carry prompt tokens without attenuating them
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))


def _attn_params(store, prefix, d, rng):
    for name in ("wq", "wk", "wv", "wo"):
        store.add(prefix + name, _xavier(rng, d, d))
        store.add(prefix + "b" + name[1], np.zeros(d))


def init_backbone(config, seed=0):
    """Fresh, fully trainable parameter store (pretraining freezes it later)."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    store = ParameterStore()
    patch_dim = config.channels * config.patch_h * config.patch_w
    store.add("embed/proj", _xavier(rng, patch_dim, d).T.copy())
    store.add("embed/pos", rng.normal(0.0, 0.02, (config.tokens, d)))
    store.add("grid/offset", rng.normal(0.0, 0.02, d))
    for k in range(1, config.layers + 1):
        p = "enc/%d/" % k
        store.add(p + "ln1/gamma", np.ones(d))
        store.add(p + "ln1/beta", np.zeros(d))
        _attn_params(store, p + "attn/", d, rng)
        store.add(p + "ln2/gamma", np.ones(d))
        store.add(p + "ln2/beta", np.zeros(d))
        store.add(p + "mlp/w1", _xavier(rng, d, config.mlp_hidden))
        store.add(p + "mlp/b1", np.zeros(config.mlp_hidden))
        store.add(p + "mlp/w2", _xavier(rng, config.mlp_hidden, d))
        store.add(p + "mlp/b2", np.zeros(d))
    for j in range(1, config.decoder_blocks + 1):
        p = "dec/%d/" % j
        store.add(p + "img_ln/gamma", np.ones(d))
        store.add(p + "img_ln/beta", np.zeros(d))
        _attn_params(store, p + "i2p/", d, rng)
        store.add(p + "prm_ln/gamma", np.ones(d))
        store.add(p + "prm_ln/beta", np.zeros(d))
        _attn_params(store, p + "p2i/", d, rng)
    store.add("head/ln/gamma", np.ones(d))
    store.add("head/ln/beta", np.zeros(d))
    store.add("head/w1", _xavier(rng, d, config.mask_hidden))
    store.add("head/b1", np.zeros(config.mask_hidden))
    store.add("head/w2", _xavier(rng, config.mask_hidden, 1))
    store.add("head/b2", np.zeros(1))
    return store


@lru_cache(maxsize=8)
def grid_prompt_tokens(config):
    """Fixed sinusoidal embedding of each patch center, one token per patch.

    The learned part (a d-vector offset living in the store under
    "grid/offset") is added by the decoder; this function is deterministic
    given the config alone.
    """
    d = config.embed_dim
    n, m = config.grid_rows, config.grid_cols
    cy = (np.arange(n) + 0.5) / n
    cx = (np.arange(m) + 0.5) / m
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)  # (mn, 2)
    quarter = d // 4
    freqs = 10000.0 ** (-np.arange(quarter) / max(quarter, 1))
    out = np.zeros((config.tokens, d))
    ang_y = coords[:, :1] * freqs[None, :]
    ang_x = coords[:, 1:] * freqs[None, :]
    out[:, 0 * quarter:1 * quarter] = np.sin(ang_y)
    out[:, 1 * quarter:2 * quarter] = np.cos(ang_y)
    out[:, 2 * quarter:3 * quarter] = np.sin(ang_x)
    out[:, 3 * quarter:4 * quarter] = np.cos(ang_x)
    out.flags.writeable = False
    return out


def _as_batched_image(image, config):
    t = image if isinstance(image, Tensor) else Tensor(image, op="image")
    if t.ndim == 2:
        t = reshape(t, (1, 1) + t.shape)
    elif t.ndim == 3:
        t = reshape(t, (1,) + t.shape)
    elif t.ndim != 4:
        raise ValueError("image must be (H,W), (C,H,W) or (B,C,H,W)")
    b, c, h, w = t.shape
    if (c, h, w) != (config.channels, config.height, config.width):
        raise ValueError("image shape %s does not match config %dx%dx%d"
                         % ((c, h, w), config.channels, config.height, config.width))
    return t


def patch_embed(image, leaves, config):
    """Flatten each patch, project to embed_dim, add the positional row."""
    t = _as_batched_image(image, config)
    b = t.shape[0]
    n, m = config.grid_rows, config.grid_cols
    ph, pw = config.patch_h, config.patch_w
    t = reshape(t, (b, config.channels, n, ph, m, pw))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    patches = reshape(t, (b, n * m, config.channels * ph * pw))
    proj = transpose(leaves["embed/proj"], (1, 0))
    return linear(patches, proj) + leaves["embed/pos"]


def attn_sublayer(x, leaves, prefix, config):
    """x + MSA(LN(x)) with the prefix's projection weights."""
    h = layer_norm(x, leaves[prefix + "ln1/gamma"], leaves[prefix + "ln1/beta"])
    q = linear(h, leaves[prefix + "attn/wq"], leaves[prefix + "attn/bq"])
    k = linear(h, leaves[prefix + "attn/wk"], leaves[prefix + "attn/bk"])
    v = linear(h, leaves[prefix + "attn/wv"], leaves[prefix + "attn/bv"])
    att = attention(q, k, v, config.heads,
                    w_out=leaves[prefix + "attn/wo"], b_out=leaves[prefix + "attn/bo"])
    return x + att


def mlp_branch(x, leaves, prefix):
    """MLP(LN(x)) - the branch only, residual handled by the caller."""
    h = layer_norm(x, leaves[prefix + "ln2/gamma"], leaves[prefix + "ln2/beta"])
    h = gelu(linear(h, leaves[prefix + "mlp/w1"], leaves[prefix + "mlp/b1"]))
    return linear(h, leaves[prefix + "mlp/w2"], leaves[prefix + "mlp/b2"])


def vit_layer(tokens, leaves, k, config):
    """Pre-norm transformer block: x' = x + MSA(LN(x)); out = x' + MLP(LN(x'))."""
    prefix = "enc/%d/" % k
    a = attn_sublayer(tokens, leaves, prefix, config)
    return a + mlp_branch(a, leaves, prefix)


def encode_image(image, leaves, config, hooks=None):
    """Run all encoder layers; `hooks` maps depth k to a block override.

    A hook is called as hook(tokens, leaves, k, config) and replaces the
    plain vit_layer at that depth.
    """
    hooks = hooks or {}
    for k in hooks:
        if not 1 <= k <= config.layers:
            raise ValueError("hook depth %d outside [1, %d]" % (k, config.layers))
    tokens = patch_embed(image, leaves, config)
    for k in range(1, config.layers + 1):
        hook = hooks.get(k)
        if hook is None:
            tokens = vit_layer(tokens, leaves, k, config)
        else:
            tokens = hook(tokens, leaves, k, config)
    return tokens


def _cross_attention(q_stream, kv_stream, leaves, prefix, ln_prefix, config):
    h = layer_norm(q_stream, leaves[ln_prefix + "gamma"], leaves[ln_prefix + "beta"])
    q = linear(h, leaves[prefix + "wq"], leaves[prefix + "bq"])
    k = linear(kv_stream, leaves[prefix + "wk"], leaves[prefix + "bk"])
    v = linear(kv_stream, leaves[prefix + "wv"], leaves[prefix + "bv"])
    att = attention(q, k, v, config.heads,
                    w_out=leaves[prefix + "wo"], b_out=leaves[prefix + "bo"])
    return q_stream + att


def two_way_block(e_img, e_prompt, leaves, j, config):
    """One decoder block: image queries prompt, then prompt queries image."""
    p = "dec/%d/" % j
    e_img = _cross_attention(e_img, e_prompt, leaves, p + "i2p/", p + "img_ln/", config)
    e_prompt = _cross_attention(e_prompt, e_img, leaves, p + "p2i/", p + "prm_ln/", config)
    return e_img, e_prompt


def decode_mask(e_img, e_prompt, leaves, config):
    """Fuse streams through the two-way blocks, then one logit per patch,
    replicated over the patch footprint to pixel resolution.

    The mask head normalizes its input tokens; without it, the residual
    trunk's unbounded feature scale lets dice training saturate the logits
    within a few epochs, which kills adaptation gradients later.
    """
    for j in range(1, config.decoder_blocks + 1):
        e_img, e_prompt = two_way_block(e_img, e_prompt, leaves, j, config)
    h = layer_norm(e_img, leaves["head/ln/gamma"], leaves["head/ln/beta"])
    h = gelu(linear(h, leaves["head/w1"], leaves["head/b1"]))
    logits = linear(h, leaves["head/w2"], leaves["head/b2"])  # (B, mn, 1)
    b = logits.shape[0]
    grid = reshape(logits, (b, 1, config.grid_rows, config.grid_cols))
    up = upsample_nearest(grid, config.patch_h, config.patch_w)
    return reshape(up, (b, config.height, config.width))


def forward_from_leaves(image, leaves, config, strategy=None):
    """Probabilities (B,H,W) from existing graph leaves; used by training."""
    t = _as_batched_image(image, config)
    b = t.shape[0]
    hooks = None
    if strategy is not None:
        t = strategy.preprocess(t, leaves, config)
        hooks = strategy.encoder_hooks()
    e_img = encode_image(t, leaves, config, hooks=hooks)
    prm = Tensor(grid_prompt_tokens(config), op="grid_tokens") + leaves["grid/offset"]
    prm = expand(prm, (b,) + prm.shape)
    logits = decode_mask(e_img, prm, leaves, config)
    return sigmoid(logits)


def forward(image, store, config, strategy=None):
    """End-to-end probabilities for one image (H,W) or a batch (B,C,H,W).

    Returns a Tensor in (0,1); single-image inputs come back as (H,W).
    """
    single = not (isinstance(image, Tensor) and image.ndim == 4) \
        and np.asarray(image.data if isinstance(image, Tensor) else image).ndim != 4
    if strategy is not None and len(strategy.params) > 0:
        store = ParameterStore.merge(store, strategy.params)
    probs = forward_from_leaves(image, store.leaves(), config, strategy)
    if single and probs.shape[0] == 1:
        return reshape(probs, probs.shape[1:])
    return probs


def count_params(store, trainable_only=False):
    """Total number of scalar parameters, optionally trainable ones only."""
    return store.count(trainable_only=trainable_only)
