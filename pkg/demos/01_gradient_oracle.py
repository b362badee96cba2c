"""Check every strategy's analytic gradients against central differences.

Builds a miniature segmenter (32x32 images, 2 encoder layers, 16-dim
embeddings), attaches each adaptation strategy in turn, jitters the
trainable tensors to a generic point, and compares reverse-mode gradients
of the dice loss against the finite-difference oracle on a subsample of
entries. The full-entry sweep lives in tests/test_acceptance.py; this is
the fast narrative version.
"""

import time

import numpy as np

from promptseg.backbone import BackboneConfig, init_backbone, forward_from_leaves
from promptseg.data import source_domain_config, generate
from promptseg.strategies import attach, trainable_params_of
from promptseg.tensor import ParameterStore, finite_diff_check
from promptseg.training import batch_dice_loss

micro = BackboneConfig(height=32, width=32, patch_h=8, patch_w=8,
                       embed_dim=16, layers=2, heads=2, mlp_hidden=32,
                       decoder_blocks=2, mask_hidden=16)

cfg = source_domain_config(seed=3, height=32, width=32,
                           radius_min=3, radius_max=6, particle_rate=4.0)
sample = generate(cfg, 1)[0]
img, gt = sample.image[None], sample.mask[None]

print("gradient oracle on a %dx%d model, one %dx%d image"
      % (micro.embed_dim, micro.layers, micro.height, micro.width))
print()
print("%-10s %10s %10s %12s %6s %6s" % ("strategy", "trainable", "checked",
                                        "max rel err", "kinks", "time"))
for kind in ("head", "prefix", "encoder", "finetune"):
    store = init_backbone(micro, seed=0)
    strategy = attach(kind, micro, store, seed=7, head_channels=(8, 16))
    work = ParameterStore.merge(store, strategy.params) \
        if len(strategy.params) else store
    jitter = np.random.default_rng(99)
    for name in work.trainable_names():
        arr = work[name]
        arr += jitter.normal(0.0, 0.15, arr.shape)

    def loss_fn(leaves, strategy=strategy):
        probs = forward_from_leaves(img, leaves, micro, strategy)
        return batch_dice_loss(probs, gt)

    t0 = time.perf_counter()
    results = finite_diff_check(loss_fn, work, step=1e-5, tol=1e-3,
                                max_entries=25)
    elapsed = time.perf_counter() - t0
    live = [r for r in results if r.status != "skipped"]
    worst = max(r.max_rel_err for r in live)
    checked = sum(r.checked for r in live)
    kinks = sum(r.kinks for r in live)
    verdict = "ok" if all(r.ok for r in live) else "FAIL"
    print("%-10s %10d %10d %12.2e %6d %5.1fs  %s"
          % (kind, trainable_params_of(strategy, store), checked, worst,
             kinks, elapsed, verdict))

print()
print("entries whose perturbation flips a ReLU activation pattern are")
print("flagged as kinks and excluded; everything else must match to 1e-3.")
