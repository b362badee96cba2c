"""Adaptation strategies for the frozen backbone.

Four interchangeable ways to adapt the segmenter to a new image domain, all
keeping their trainable tensors outside the frozen store (except full
fine-tuning, which flips the whole store trainable and owns nothing):

  * head    - a small two-level U-Net that re-renders the input image before
              it reaches the backbone; the backbone never changes.
  * prefix  - learnable tokens prepended to the patch tokens at selected
              encoder depths; the layer runs on the longer sequence and the
              leading rows are discarded afterwards (fresh tokens per depth).
  * encoder - paired bottleneck adapters (down-project, ReLU, up-project,
              internal residual) spliced into selected encoder blocks; the
              second adapter's branch is scaled by alpha and replaces the
              plain residual around the MLP.
  * finetune - no extra tensors; every backbone parameter becomes trainable.

Adapters start with zero up-projections, so an encoder strategy at alpha=1
reproduces the unadapted model bit for bit until training moves it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import attn_sublayer, mlp_branch, vit_layer
from .tensor import (
    ParameterStore,
    concat,
    conv2d,
    expand,
    linear,
    maxpool2d,
    narrow,
    relu,
    upsample_nearest,
)

__all__ = [
    "Strategy",
    "attach",
    "head_forward",
    "prefix_layer",
    "adapter",
    "encoder_block",
    "trainable_params_of",
    "head_param_count",
    "prefix_param_count",
    "encoder_param_count",
    "FULL_SCALE_REFERENCE_TRAINABLE",
]

KINDS = ("none", "head", "prefix", "encoder", "finetune")

# Trainable-parameter counts reported for the original full-scale system
# (ViT-h image encoder, 1024x1024 inputs), kept for context and ordering
# checks; the desk-scale model here is orders of magnitude smaller.
FULL_SCALE_REFERENCE_TRAINABLE = {
    "finetune": 4_058_340,
    "head": 410_019,
    "prefix": 2_621_440,
    "encoder": 52_531_200,
}


@dataclass
class Strategy:
    """An attached adaptation strategy: kind, its own parameters, placement."""

    kind: str
    params: ParameterStore
    depths: tuple = ()
    alpha: float = 0.5
    tokens_per_layer: int = 64
    head_channels: tuple = (16, 32)
    adapter_dim: int = 0

    def preprocess(self, image, leaves, config):
        if self.kind == "head":
            return head_forward(image, leaves)
        return image

    def encoder_hooks(self):
        if self.kind == "prefix":
            return {k: _prefix_hook(k) for k in self.depths}
        if self.kind == "encoder":
            return {k: _encoder_hook(k, self.alpha) for k in self.depths}
        return None

    def describe(self):
        return {"kind": self.kind,
                "depths": ",".join(str(k) for k in self.depths) or "-",
                "alpha": repr(self.alpha),
                "tokens_per_layer": str(self.tokens_per_layer),
                "head_channels": "%d,%d" % self.head_channels,
                "adapter_dim": str(self.adapter_dim)}


def attach(kind, config, store, seed=0, depths=None, alpha=0.5,
           tokens_per_layer=64, head_channels=(16, 32), adapter_dim=None):
    """Initialize a strategy against a backbone store and set trainable flags.

    Prompt strategies freeze the whole backbone and own their trainable
    tensors (named under "strategy/"); finetune flips the backbone trainable
    and owns none. Default depth set for prefix/encoder is the last block.
    """
    if kind not in KINDS:
        raise ValueError("unknown strategy kind %r (one of %s)" % (kind, KINDS))
    rng = np.random.default_rng(seed)
    params = ParameterStore()

    if kind in ("prefix", "encoder"):
        depths = tuple(sorted(depths)) if depths else (config.layers,)
        if not depths:
            raise ValueError("%s prompt needs a nonempty depth set" % kind)
        for k in depths:
            if not 1 <= k <= config.layers:
                raise ValueError("depth %d outside [1, %d]" % (k, config.layers))
    else:
        depths = ()

    if kind == "head":
        if config.height % 4 or config.width % 4:
            raise ValueError("head prompt needs H, W divisible by 4 "
                             "(got %dx%d)" % (config.height, config.width))
        c0 = config.channels
        c1, c2 = head_channels
        for name, cin, cout in (("conv1", c0, c1), ("conv2", c1, c2),
                                ("deconv1", c2 + c1, c1), ("deconv2", c1 + c0, c0)):
            scale = np.sqrt(2.0 / (cin * 9))
            params.add("strategy/head/%s/w" % name,
                       rng.normal(0.0, scale, (cout, cin, 3, 3)))
            params.add("strategy/head/%s/b" % name, np.zeros(cout))
        # near-identity start: the output conv initially passes the raw image
        # through its skip channels and ignores the decoder features, so an
        # untrained head leaves the frozen model's behavior intact (same idea
        # as the adapters' zero-initialized up-projections)
        w_out = np.zeros((c0, c1 + c0, 3, 3))
        for c in range(c0):
            w_out[c, c1 + c, 1, 1] = 1.0
        params.set_value("strategy/head/deconv2/w", w_out)
    elif kind == "prefix":
        d = config.embed_dim
        for k in depths:
            params.add("strategy/prefix/p%d" % k,
                       rng.normal(0.0, 0.01, (tokens_per_layer, d)))
    elif kind == "encoder":
        d = config.embed_dim
        s = adapter_dim if adapter_dim else max(1, d // 4)
        if not 0 < s < d:
            raise ValueError("adapter dim must satisfy 0 < s < d, got s=%d d=%d"
                             % (s, d))
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1], got %r" % alpha)
        adapter_dim = s
        for k in depths:
            for a in ("a1", "a2"):
                base = "strategy/encoder/%d/%s/" % (k, a)
                params.add(base + "down_w", rng.normal(0.0, np.sqrt(2.0 / d), (d, s)))
                params.add(base + "down_b", np.zeros(s))
                params.add(base + "up_w", np.zeros((s, d)))  # zero init: identity
                params.add(base + "up_b", np.zeros(d))

    if kind == "finetune":
        store.unfreeze_all()
    else:
        store.freeze_all()

    return Strategy(kind=kind, params=params, depths=depths, alpha=alpha,
                    tokens_per_layer=tokens_per_layer,
                    head_channels=tuple(head_channels),
                    adapter_dim=adapter_dim or 0)


# -- head prompt ---------------------------------------------------------------


def head_forward(image, leaves):
    """Two-level U-Net over the input image: conv/pool down twice, then two
    upsample-concat-conv stages back to full resolution. ReLU everywhere,
    including the output, so the enhanced image is nonnegative."""
    def cv(x, name):
        return conv2d(x, leaves["strategy/head/%s/w" % name],
                      leaves["strategy/head/%s/b" % name])

    ch_axis = image.ndim - 3
    f1 = maxpool2d(relu(cv(image, "conv1")))
    f2 = maxpool2d(relu(cv(f1, "conv2")))
    f3 = relu(cv(concat([upsample_nearest(f2, 2), f1], axis=ch_axis), "deconv1"))
    return relu(cv(concat([upsample_nearest(f3, 2), image], axis=ch_axis), "deconv2"))


# -- prefix prompt ---------------------------------------------------------------


def prefix_layer(tokens, p_k, leaves, k, config):
    """Run encoder layer k on [P_k, E]; keep only the trailing image tokens.

    P_k is prepended fresh at every prompted depth and its output rows are
    discarded. An empty P_k is exactly the plain layer.
    """
    t = p_k.shape[0]
    if t == 0:
        return vit_layer(tokens, leaves, k, config)
    token_axis = tokens.ndim - 2
    if tokens.ndim == 3:
        p_k = expand(p_k, (tokens.shape[0],) + p_k.shape)
    joined = concat([p_k, tokens], axis=token_axis)
    out = vit_layer(joined, leaves, k, config)
    return narrow(out, token_axis, t, tokens.shape[token_axis])


def _prefix_hook(k):
    def hook(tokens, leaves, depth, config):
        return prefix_layer(tokens, leaves["strategy/prefix/p%d" % k],
                            leaves, depth, config)
    return hook


# -- encoder prompt ----------------------------------------------------------------


def adapter(x, leaves, base):
    """Bottleneck map with internal residual: x + up(ReLU(down(x)))."""
    h = relu(linear(x, leaves[base + "down_w"], leaves[base + "down_b"]))
    return x + linear(h, leaves[base + "up_w"], leaves[base + "up_b"])


def encoder_block(tokens, leaves, k, config, alpha):
    """Encoder layer k with both adapters spliced in.

    The first adapter reshapes the attention sublayer's output; the second,
    scaled by alpha, replaces the plain residual around the MLP.
    """
    prefix = "enc/%d/" % k
    a = attn_sublayer(tokens, leaves, prefix, config)
    e1 = adapter(a, leaves, "strategy/encoder/%d/a1/" % k)
    m = mlp_branch(e1, leaves, prefix)
    return m + alpha * adapter(e1, leaves, "strategy/encoder/%d/a2/" % k)


def _encoder_hook(k, alpha):
    def hook(tokens, leaves, depth, config):
        return encoder_block(tokens, leaves, depth, config, alpha)
    return hook


# -- accounting -----------------------------------------------------------------


def head_param_count(c0, c1, c2):
    return ((c1 * c0 * 9 + c1) + (c2 * c1 * 9 + c2)
            + (c1 * (c2 + c1) * 9 + c1) + (c0 * (c1 + c0) * 9 + c0))


def prefix_param_count(n_depths, tokens_per_layer, d):
    return n_depths * tokens_per_layer * d


def encoder_param_count(n_depths, d, s):
    return n_depths * 2 * (d * s + s + s * d + d)


def trainable_params_of(strategy, store):
    """Trainable entries the strategy contributes (whole store for finetune)."""
    if strategy.kind == "finetune":
        return store.count(trainable_only=True)
    return strategy.params.count(trainable_only=True)
