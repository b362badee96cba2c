"""End-to-end adaptation story at reduced scale, in about two minutes.

Pretrains a small segmenter on the easy source domain, freezes it, shows
that it fails on the low-contrast target domain, then adapts it with each
strategy on ten target images and compares held-out dice scores - the
core experiment of this package, shrunk to demo size.
"""

import time

import numpy as np

from promptseg.backbone import BackboneConfig, init_backbone
from promptseg.data import generate, source_domain_config, target_domain_config
from promptseg.harness import evaluate_dice
from promptseg.strategies import attach, trainable_params_of
from promptseg.training import TrainConfig, freeze_verify, pretrain_backbone, train

demo = BackboneConfig(height=64, width=64, patch_h=8, patch_w=8,
                      embed_dim=32, layers=4, heads=4, mlp_hidden=64,
                      decoder_blocks=2, mask_hidden=32)
src_cfg = source_domain_config(seed=1, height=64, width=64,
                               radius_min=4, radius_max=9, particle_rate=4.0)
tgt_cfg = target_domain_config(seed=2, height=64, width=64,
                               radius_min=4, radius_max=9, particle_rate=4.0)

source = generate(src_cfg, 72)
target = generate(tgt_cfg, 42)
train_pool, test_set = target[:10], target[10:]

print("pretraining a %d-parameter backbone on %d source images..."
      % (demo.param_count(), len(source) - 8))
t0 = time.perf_counter()
store = init_backbone(demo, seed=0)
pretrain_backbone(store, source[:-8],
                  TrainConfig(lr=3e-4, epochs=3, batch_size=4, seed=0), demo)
src_dice = float(np.mean(evaluate_dice(store, demo, None, source[-8:])))
zero_shot = float(np.mean(evaluate_dice(store, demo, None, test_set)))
print("done in %.0fs: source dice %.3f, target zero-shot %.3f (the domain gap)"
      % (time.perf_counter() - t0, src_dice, zero_shot))
print()

reference = store.copy_values()
print("%-10s %10s %10s %10s %8s" % ("strategy", "trainable", "test dice",
                                    "vs zero", "time"))
for kind, lr in (("head", 1e-3), ("prefix", 3e-2), ("encoder", 1e-2),
                 ("finetune", 3e-4)):
    store.load_values(reference)
    store.freeze_all()
    strategy = attach(kind, demo, store, seed=0)
    snapshot = store.snapshot()
    t0 = time.perf_counter()
    train(store, strategy, train_pool,
          TrainConfig(lr=lr, epochs=30, batch_size=4, seed=0), demo)
    if kind != "finetune":
        assert freeze_verify(store, snapshot).ok, "frozen backbone moved!"
    dice = float(np.mean(evaluate_dice(store, demo, strategy, test_set)))
    print("%-10s %10d %10.3f %+10.3f %7.0fs"
          % (kind, trainable_params_of(strategy, store), dice,
             dice - zero_shot, time.perf_counter() - t0))

print()
print("the frozen backbone is byte-verified unchanged for every prompt")
print("strategy; only fine-tuning rewrites it.")
