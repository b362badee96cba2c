"""Dice-loss optimization of strategy parameters.

Adam with bias correction, reduce-on-plateau learning-rate decay, min-loss
checkpointing, and a hard frozen-parameter contract: optimizer steps touch
trainable entries only, and `freeze_verify` proves it byte for byte.

Learning-rate defaults: prompt strategies train at 1e-3 and pretraining /
fine-tuning at 1e-4 on the desk-scale model; the full-scale reference value
of 1e-5 (tuned for a pretrained ViT-h) is kept available as REFERENCE_LR and
stalls at this scale.

Batching note: the sample order is shuffled once per run from the seed and
reused every epoch (fixed shuffling), which makes runs bit-reproducible and
keeps the per-epoch loss of an untrainable strategy exactly constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import forward_from_leaves
from .tensor import NonFiniteError, ParameterStore, Tensor, grad, tsum

__all__ = [
    "TrainConfig",
    "FreezeViolation",
    "OptimizerState",
    "Checkpoint",
    "FreezeReport",
    "REFERENCE_LR",
    "soft_dice",
    "dice_loss",
    "batch_dice_loss",
    "hard_dice",
    "init_optimizer",
    "adam_step",
    "train",
    "pretrain_backbone",
    "freeze_verify",
    "write_loss_log",
]

REFERENCE_LR = 1e-5  # full-scale reference setting; stalls at desk scale


class FreezeViolation(RuntimeError):
    """A frozen tensor changed during training: the fixed-backbone contract broke."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    decay_factor: float = 0.5
    patience: int = 10
    batch_size: int = 4
    seed: int = 0
    smooth: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.smooth <= 0:
            raise ValueError("smoothing constant must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


# -- dice ---------------------------------------------------------------


def _check_pair(pred, gt):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("pred/gt shape mismatch: %s vs %s" % (p.shape, g.shape))
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("ground truth must be binary")
    return g


def soft_dice(pred, gt, smooth=1.0):
    """(2*sum(pred*gt) + smooth) / (sum(pred) + sum(gt) + smooth).

    Differentiable when `pred` is a Tensor of probabilities; returns a plain
    float for array input.
    """
    g = _check_pair(pred, gt)
    if isinstance(pred, Tensor):
        inter = (pred * g).sum()
        return (2.0 * inter + smooth) / (pred.sum() + float(g.sum()) + smooth)
    p = np.asarray(pred, dtype=np.float64)
    return float((2.0 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth))


def dice_loss(pred, gt, smooth=1.0):
    """1 - soft_dice; in [0, 1], zero only on a perfect (binary) match."""
    return 1.0 - soft_dice(pred, gt, smooth)


def batch_dice_loss(probs, gts, smooth=1.0):
    """Mean of per-image dice losses over a (B,H,W) batch. Returns a Tensor."""
    g = _check_pair(probs, gts)
    inter = tsum(probs * g, axis=(1, 2))
    psum = tsum(probs, axis=(1, 2))
    gsum = g.sum(axis=(1, 2))
    dice = (2.0 * inter + smooth) / (psum + gsum + smooth)
    return (1.0 - dice).mean()


def hard_dice(pred_mask, gt_mask):
    """Set-overlap dice on binary masks: 2|A&B| / (|A|+|B|).

    Empty vs empty scores 1.0; empty vs nonempty scores 0.0.
    """
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError("mask shape mismatch: %s vs %s" % (a.shape, b.shape))
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


# -- optimizer -----------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def init_optimizer(store):
    names = store.trainable_names()
    return OptimizerState(m={n: np.zeros_like(store[n]) for n in names},
                          v={n: np.zeros_like(store[n]) for n in names})


def adam_step(state, grads, store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place, trainable entries only."""
    trainable = set(store.trainable_names())
    if set(grads) != trainable:
        missing = trainable - set(grads)
        extra = set(grads) - trainable
        raise ValueError("gradients must cover exactly the trainable set "
                         "(missing %s, extra %s)" % (sorted(missing), sorted(extra)))
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        value = store[name]
        if g.shape != value.shape:
            raise ValueError("gradient shape %s does not match parameter %r %s"
                             % (g.shape, name, value.shape))
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- training loop ---------------------------------------------------------


@dataclass
class Checkpoint:
    """Best-loss state of a run: epoch, its loss, and the trainable values."""
    epoch: int
    loss: float
    values: dict
    config: TrainConfig


@dataclass
class FreezeReport:
    ok: bool
    violations: list = field(default_factory=list)  # frozen entries that moved
    changed: list = field(default_factory=list)     # any entries that moved


def freeze_verify(store, snapshot):
    """Byte-compare the store against a snapshot() taken earlier.

    Violations are frozen tensors whose bytes changed; `changed` lists every
    differing tensor (trainable movement is expected, not a violation).
    """
    changed = [n for n, value, _ in store.items()
               if value.tobytes() != snapshot[n]]
    frozen = set(store.frozen_names())
    violations = [n for n in changed if n in frozen]
    return FreezeReport(ok=not violations, violations=violations, changed=changed)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(store, strategy, dataset, config, bconfig):
    """Optimize the strategy's trainable tensors with Adam on dice loss.

    Returns (Checkpoint, log) where log is a list of (epoch, mean_loss, lr)
    rows. The best-loss trainable values are restored into the live store
    before returning, so the caller evaluates the retained checkpoint.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    work = ParameterStore.merge(store, strategy.params) \
        if len(strategy.params) else store
    state = init_optimizer(work)
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(dataset), config.batch_size, rng)
    images = {i: s.image for i, s in enumerate(dataset)}
    masks = {i: s.mask for i, s in enumerate(dataset)}

    lr = config.lr
    log = []
    best_loss, best_epoch, best_values = np.inf, 0, None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in batches:
            xs = np.stack([images[i] for i in batch])
            gts = np.stack([masks[i] for i in batch])

            def loss_fn(leaves):
                probs = forward_from_leaves(xs, leaves, bconfig, strategy)
                return batch_dice_loss(probs, gts, config.smooth)

            try:
                report = grad(loss_fn, work)
            except NonFiniteError as err:
                raise NonFiniteError(
                    "epoch %d, batch of samples %s: %s"
                    % (epoch, list(map(int, batch)), err)) from err
            adam_step(state, report.grads, work, lr,
                      config.beta1, config.beta2, config.eps)
            total += report.loss * len(batch)
        mean_loss = total / len(dataset)
        log.append((epoch, mean_loss, lr))
        if mean_loss < best_loss:
            best_loss, best_epoch = mean_loss, epoch
            best_values = {n: work[n].copy() for n in work.trainable_names()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                lr *= config.decay_factor
                stale = 0
    if best_values is not None:
        work.load_values(best_values)
    return Checkpoint(best_epoch, best_loss, best_values or {}, config), log


def pretrain_backbone(store, dataset, config, bconfig, logit_cap=2.5):
    """Train the whole backbone on a source-domain set, then freeze it.

    The frozen result stands in for a large pretrained segmenter; adaptation
    strategies treat it as fixed from here on.

    Dice training on the easy source task drives logits far into sigmoid
    saturation long before the features stop improving, which would leave
    later adaptation without usable gradients. So the routine ends with
    temperature calibration: the mask head's final affine map is rescaled
    so the 95th percentile of |logit| over (a slice of) the training set is
    at most `logit_cap`. Scaling preserves every logit's sign, so the
    frozen model's thresholded predictions - and its hard-dice scores -
    are exactly unchanged. Pass `logit_cap=None` to skip.
    """
    from .backbone import forward_from_leaves  # noqa: F811 (clarity)
    from .strategies import attach  # local import: strategies imports backbone

    store.unfreeze_all()
    strategy = attach("finetune", bconfig, store)
    checkpoint, log = train(store, strategy, dataset, config, bconfig)
    if logit_cap is not None:
        leaves = store.leaves()
        zs = []
        for sample in dataset[:16]:
            p = forward_from_leaves(sample.image[None], leaves, bconfig).data
            p = np.clip(p, 1e-12, 1.0 - 1e-12)
            zs.append(np.log(p / (1.0 - p)))
        p95 = float(np.percentile(np.abs(np.stack(zs)), 95))
        if p95 > logit_cap:
            scale = logit_cap / p95
            store["head/w2"][...] *= scale
            store["head/b2"][...] *= scale
    store.freeze_all()
    return checkpoint, log


def write_loss_log(path, log):
    """CSV with columns epoch, mean_loss, lr."""
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,lr\n")
        for epoch, loss, lr in log:
            fh.write("%d,%s,%s\n" % (epoch, repr(float(loss)), repr(float(lr))))
