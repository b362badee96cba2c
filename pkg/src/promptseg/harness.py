"""Experiment harness: wires data, backbone, strategies and training into
reproducible protocols, each exposed as a `promptseg` CLI subcommand.

    generate      synthetic dataset (source or target domain) on disk
    pretrain      train the backbone on a source dataset, freeze, checkpoint
    adapt         attach one strategy, train on a small subset, evaluate
    eval          per-image hard dice of a checkpoint over a dataset
    sweep         strategies x training-set sizes, shared held-out test set
    ablate-depth  prompt depth sets (top prefixes, bottom suffixes, all)
    stability     re-draw the 10-image training subset for several rounds
    compare       all four strategies on one shared split

Every command is deterministic given its seeds; CSVs are byte-reproducible
except the trailing wall-time column. Exit codes: 0 ok, 2 frozen-parameter
contract violation, 3 I/O error, 4 bad configuration.

Evaluation binarizes probabilities at 0.5 and scores hard dice (the
set-overlap formula, with empty-vs-empty scoring 1).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, forward_from_leaves, init_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    load_dataset,
    read_manifest,
    save_mask,
    source_domain_config,
    target_domain_config,
    generate,
    write_dataset,
)
from .strategies import Strategy, attach, trainable_params_of
from .tensor import ParameterStore
from .training import (
    FreezeViolation,
    TrainConfig,
    freeze_verify,
    hard_dice,
    pretrain_backbone,
    train,
    write_loss_log,
)

logger = logging.getLogger("promptseg")

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_IO = 3
EXIT_CONFIG = 4

EVAL_THRESHOLD = 0.5
EVAL_BATCH = 8

RESULTS_HEADER = "# promptseg results csv v1"
RESULT_COLUMNS = ("strategy,train_size,round,seed,n_test,mean_dice,var_dice,"
                  "trainable_params,per_image_dice,wall_time_s")


@dataclass
class ExperimentSpec:
    """Parsed knobs shared by the protocol commands."""
    backbone: str = ""
    data: str = ""
    out: str = ""
    strategy: str = "head"
    strategies: tuple = ("head", "prefix", "encoder")
    train_size: int = 10
    sizes: tuple = (50, 30, 20, 10, 5)
    rounds: int = 10
    seed: int = 0
    seeds: tuple = (0,)
    split_seed: int = 0
    test_size: int = 48
    depths: tuple | None = None
    alpha: float = 0.5
    prefix_tokens: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ResultRow:
    """One evaluated run; mean/variance are recomputed from the dice list."""
    strategy: str
    train_size: int
    round: int
    seed: int
    dices: list
    trainable_params: int
    wall_time: float

    @property
    def mean_dice(self):
        return float(np.mean(self.dices)) if self.dices else 0.0

    @property
    def var_dice(self):
        return float(np.var(self.dices)) if self.dices else 0.0

    def csv(self):
        per_image = ";".join(repr(float(d)) for d in self.dices)
        return ",".join([
            self.strategy, str(self.train_size), str(self.round), str(self.seed),
            str(len(self.dices)), repr(self.mean_dice), repr(self.var_dice),
            str(self.trainable_params), per_image, "%.3f" % self.wall_time,
        ])


def _write_rows(path, rows, extra_header=()):
    with open(path, "w") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for line in extra_header:
            fh.write("# %s\n" % line)
        fh.write(RESULT_COLUMNS + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def _stems_hash(stems):
    return hashlib.sha256("\n".join(stems).encode()).hexdigest()[:16]


# -- shared plumbing ---------------------------------------------------------


def _load_backbone(path):
    store, meta = load_checkpoint(path)
    config = BackboneConfig.from_meta(meta)
    return store, config, meta


def _save_strategy(path, strategy):
    save_checkpoint(path, strategy.params, meta=strategy.describe())


def load_strategy(path):
    params, meta = load_checkpoint(path)
    depths = () if meta["depths"] == "-" else \
        tuple(int(x) for x in meta["depths"].split(","))
    c1, c2 = (int(x) for x in meta["head_channels"].split(","))
    return Strategy(kind=meta["kind"], params=params, depths=depths,
                    alpha=float(meta["alpha"]),
                    tokens_per_layer=int(meta["tokens_per_layer"]),
                    head_channels=(c1, c2),
                    adapter_dim=int(meta["adapter_dim"]))


def evaluate_dice(store, config, strategy, samples, batch=EVAL_BATCH):
    """Hard dice per sample, binarizing predictions at 0.5."""
    merged = ParameterStore.merge(store, strategy.params) \
        if strategy is not None and len(strategy.params) else store
    leaves = merged.leaves()
    dices = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        xs = np.stack([s.image for s in chunk])
        probs = forward_from_leaves(xs, leaves, config, strategy).data
        for j, s in enumerate(chunk):
            dices.append(hard_dice(probs[j] > EVAL_THRESHOLD, s.mask > 0))
    return dices


def _fixed_split(manifest, test_size, split_seed):
    """Held-out test set first; the rest is the training pool."""
    from .data import split
    total = len(manifest.stems)
    if not 0 < test_size < total:
        raise ValueError("test_size %d must be in (0, %d)" % (test_size, total))
    pool, test = split(manifest, total - test_size, split_seed)
    return pool, test


def _draw_subset(pool_samples, size, seed):
    if size > len(pool_samples):
        raise ValueError("train_size %d exceeds pool of %d"
                         % (size, len(pool_samples)))
    order = np.random.default_rng(seed).permutation(len(pool_samples))
    return [pool_samples[i] for i in order[:size]]


def _samples_by_stem(root, manifest):
    samples = load_dataset(root, manifest)
    return samples


def _adapt_once(store, config, kind, train_samples, spec, seed):
    """Attach, train (unless kind none / zero epochs), verify the freeze."""
    strategy = attach(kind, config, store, seed=seed, depths=spec.depths,
                      alpha=spec.alpha, tokens_per_layer=spec.prefix_tokens)
    snapshot = store.snapshot()
    tcfg = replace(spec.train, seed=seed)
    if kind == "finetune":
        tcfg = replace(tcfg, lr=min(spec.train.lr, 1e-4))
    log = []
    if kind != "none" and tcfg.epochs > 0:
        _, log = train(store, strategy, train_samples, tcfg, config)
    if kind != "finetune":
        report = freeze_verify(store, snapshot)
        if not report.ok:
            raise FreezeViolation("frozen tensors changed during %s training: %s"
                                  % (kind, report.violations))
    return strategy, log


# -- commands ---------------------------------------------------------------


def run_generate(out_dir, domain, count, seed, height=128, width=128):
    factory = {"source": source_domain_config, "target": target_domain_config}
    if domain not in factory:
        raise ValueError("domain must be 'source' or 'target', got %r" % domain)
    config = factory[domain](seed=seed, height=height, width=width)
    samples = generate(config, count)
    manifest = write_dataset(out_dir, samples, config, domain)
    logger.info("wrote %d %s-domain samples to %s", count, domain, out_dir)
    return manifest


def run_pretrain(data_dir, out_path, epochs=12, lr=1e-4, batch_size=4,
                 seed=0, val_size=16, bconfig=None):
    """Train a fresh backbone on the source dataset, freeze it, checkpoint it.

    The last `val_size` manifest entries are held out of training and their
    mean dice is recorded in the checkpoint metadata.
    """
    bconfig = bconfig or BackboneConfig()
    manifest = read_manifest(Path(data_dir) / "manifest.txt")
    samples = _samples_by_stem(data_dir, manifest)
    if val_size >= len(samples):
        raise ValueError("val_size %d leaves no training data" % val_size)
    train_samples = samples[:len(samples) - val_size] if val_size else samples
    val_samples = samples[len(samples) - val_size:] if val_size else []

    store = init_backbone(bconfig, seed=seed)
    tcfg = TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    checkpoint, log = pretrain_backbone(store, train_samples, tcfg, bconfig)

    meta = dict(bconfig.to_meta())
    meta["best_epoch"] = str(checkpoint.epoch)
    meta["best_loss"] = repr(checkpoint.loss)
    if val_samples:
        val = evaluate_dice(store, bconfig, None, val_samples)
        meta["source_val_dice"] = repr(float(np.mean(val)))
        logger.info("source validation dice: %.3f", float(np.mean(val)))
    save_checkpoint(out_path, store, meta=meta)
    write_loss_log(str(out_path) + ".loss.csv", log)
    logger.info("pretrained backbone: best loss %.4f at epoch %d -> %s",
                checkpoint.loss, checkpoint.epoch, out_path)
    return out_path


def run_adapt(spec):
    """Train one strategy on a small target subset and evaluate it."""
    store, config, _ = _load_backbone(spec.backbone)
    manifest = read_manifest(Path(spec.data) / "manifest.txt")
    pool_manifest, test_manifest = _fixed_split(manifest, spec.test_size,
                                                spec.split_seed)
    pool = _samples_by_stem(spec.data, pool_manifest)
    test = _samples_by_stem(spec.data, test_manifest)
    train_samples = _draw_subset(pool, spec.train_size, spec.seed) \
        if spec.strategy != "none" else []

    t0 = time.perf_counter()
    strategy, log = _adapt_once(store, config, spec.strategy, train_samples,
                                spec, spec.seed)
    dices = evaluate_dice(store, config, strategy, test)
    wall = time.perf_counter() - t0

    row = ResultRow(spec.strategy, len(train_samples), 0, spec.seed, dices,
                    trainable_params_of(strategy, store), wall)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "result.csv", [row],
                extra_header=["test_hash %s" % _stems_hash(test_manifest.stems)])
    if log:
        write_loss_log(out / "train_loss.csv", log)
    if spec.strategy == "finetune":
        save_checkpoint(out / "adapted_backbone.ckpt", store,
                        meta=config.to_meta())
    _save_strategy(out / "strategy.ckpt", strategy)
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    merged = ParameterStore.merge(store, strategy.params) \
        if len(strategy.params) else store
    leaves = merged.leaves()
    for i in range(0, len(test), EVAL_BATCH):
        chunk = test[i:i + EVAL_BATCH]
        xs = np.stack([s.image for s in chunk])
        probs = forward_from_leaves(xs, leaves, config, strategy).data
        for j, s in enumerate(chunk):
            save_mask(masks_dir / ("%s_pred.pgm" % s.stem),
                      probs[j] > EVAL_THRESHOLD)
    logger.info("adapt %s: mean dice %.3f over %d test images (%.1fs)",
                spec.strategy, row.mean_dice, len(dices), wall)
    return row


def run_eval(backbone_path, data_dir, out_csv, strategy_path=None):
    """Hard dice per image; mean and population variance in footer rows."""
    store, config, _ = _load_backbone(backbone_path)
    strategy = load_strategy(strategy_path) if strategy_path else None
    manifest = read_manifest(Path(data_dir) / "manifest.txt")
    samples = _samples_by_stem(data_dir, manifest)
    dices = evaluate_dice(store, config, strategy, samples)
    with open(out_csv, "w") as fh:
        fh.write("# promptseg eval csv v1\n")
        fh.write("stem,dice\n")
        for s, d in zip(samples, dices):
            fh.write("%s,%s\n" % (s.stem, repr(float(d))))
        fh.write("__mean__,%s\n" % repr(float(np.mean(dices))))
        fh.write("__variance__,%s\n" % repr(float(np.var(dices))))
    return dices


def run_sweep(spec):
    """strategies x sizes over one fixed test set; one CSV."""
    store0, config, _ = _load_backbone(spec.backbone)
    manifest = read_manifest(Path(spec.data) / "manifest.txt")
    pool_manifest, test_manifest = _fixed_split(manifest, spec.test_size,
                                                spec.split_seed)
    pool = _samples_by_stem(spec.data, pool_manifest)
    test = _samples_by_stem(spec.data, test_manifest)
    if max(spec.sizes) > len(pool):
        raise ValueError("largest sweep size %d exceeds pool of %d"
                         % (max(spec.sizes), len(pool)))
    rows = []
    for kind in spec.strategies:
        for size in spec.sizes:
            store = _reload_store(spec.backbone)
            train_samples = _draw_subset(pool, size, spec.seed)
            t0 = time.perf_counter()
            strategy, _ = _adapt_once(store, config, kind, train_samples,
                                      spec, spec.seed)
            dices = evaluate_dice(store, config, strategy, test)
            wall = time.perf_counter() - t0
            rows.append(ResultRow(kind, size, 0, spec.seed, dices,
                                  trainable_params_of(strategy, store), wall))
            logger.info("sweep %s size=%d: mean dice %.3f",
                        kind, size, rows[-1].mean_dice)
    _write_rows(spec.out, rows,
                extra_header=["test_hash %s" % _stems_hash(test_manifest.stems)])
    return rows


def _reload_store(path):
    store, _, _ = _load_backbone(path)
    return store


def _depth_sets(n_layers, sizes=(1, 2, 4)):
    """Top-block prefixes, bottom-block suffixes, and all blocks."""
    sets = []
    for c in sizes:
        c = min(c, n_layers)
        sets.append(("top:%d" % c, tuple(range(1, c + 1))))
        sets.append(("bottom:%d" % c, tuple(range(n_layers - c + 1, n_layers + 1))))
    sets.append(("all", tuple(range(1, n_layers + 1))))
    seen, out = set(), []
    for name, depths in sets:
        if depths not in seen:
            seen.add(depths)
            out.append((name, depths))
    return out


def run_ablate_depth(spec, depth_sizes=(1, 2, 4)):
    """Prompt-depth ablation for prefix or encoder strategies."""
    if spec.strategy not in ("prefix", "encoder"):
        raise ValueError("ablate-depth works with prefix or encoder, got %r"
                         % spec.strategy)
    _, config, _ = _load_backbone(spec.backbone)
    manifest = read_manifest(Path(spec.data) / "manifest.txt")
    pool_manifest, test_manifest = _fixed_split(manifest, spec.test_size,
                                                spec.split_seed)
    pool = _samples_by_stem(spec.data, pool_manifest)
    test = _samples_by_stem(spec.data, test_manifest)
    rows = []
    descriptors = []
    for name, depths in _depth_sets(config.layers, depth_sizes):
        store = _reload_store(spec.backbone)
        sub = replace(spec, depths=depths)
        train_samples = _draw_subset(pool, spec.train_size, spec.seed)
        t0 = time.perf_counter()
        strategy, _ = _adapt_once(store, config, spec.strategy, train_samples,
                                  sub, spec.seed)
        dices = evaluate_dice(store, config, strategy, test)
        wall = time.perf_counter() - t0
        rows.append(ResultRow("%s@%s" % (spec.strategy, name), spec.train_size,
                              0, spec.seed, dices,
                              trainable_params_of(strategy, store), wall))
        descriptors.append((name, depths))
        logger.info("ablate %s %s: mean dice %.3f", spec.strategy, name,
                    rows[-1].mean_dice)
    _write_rows(spec.out, rows,
                extra_header=["test_hash %s" % _stems_hash(test_manifest.stems)])
    return rows, descriptors


def run_stability(spec):
    """Re-draw the training subset for `rounds` rounds; variance per sample.

    Writes per-round rows plus a summary CSV with the mean per-sample dice
    variance across rounds for each strategy; returns the summary dict.
    """
    _, config, _ = _load_backbone(spec.backbone)
    manifest = read_manifest(Path(spec.data) / "manifest.txt")
    pool_manifest, test_manifest = _fixed_split(manifest, spec.test_size,
                                                spec.split_seed)
    pool = _samples_by_stem(spec.data, pool_manifest)
    test = _samples_by_stem(spec.data, test_manifest)
    rows, summary = [], {}
    for kind in spec.strategies:
        per_round = []
        for rnd in range(1, spec.rounds + 1):
            store = _reload_store(spec.backbone)
            subset_seed = spec.seed * 1000 + rnd
            train_samples = _draw_subset(pool, spec.train_size, subset_seed)
            sub = replace(spec, strategy=kind)
            t0 = time.perf_counter()
            strategy, _ = _adapt_once(store, config, kind, train_samples, sub,
                                      subset_seed)
            dices = evaluate_dice(store, config, strategy, test)
            wall = time.perf_counter() - t0
            per_round.append(dices)
            rows.append(ResultRow(kind, spec.train_size, rnd, subset_seed,
                                  dices, trainable_params_of(strategy, store),
                                  wall))
            logger.info("stability %s round %d: mean dice %.3f", kind, rnd,
                        rows[-1].mean_dice)
        matrix = np.asarray(per_round)  # (rounds, n_test)
        summary[kind] = float(matrix.var(axis=0).mean())
    out = Path(spec.out)
    _write_rows(out, rows,
                extra_header=["test_hash %s" % _stems_hash(test_manifest.stems)])
    summary_path = out.with_name(out.stem + "_summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("# promptseg stability summary csv v1\n")
        fh.write("strategy,rounds,mean_sample_variance\n")
        for kind in spec.strategies:
            fh.write("%s,%d,%s\n" % (kind, spec.rounds, repr(summary[kind])))
    return summary


def run_compare(spec):
    """All four strategies on one shared split; one CSV row each."""
    _, config, _ = _load_backbone(spec.backbone)
    manifest = read_manifest(Path(spec.data) / "manifest.txt")
    pool_manifest, test_manifest = _fixed_split(manifest, spec.test_size,
                                                spec.split_seed)
    pool = _samples_by_stem(spec.data, pool_manifest)
    test = _samples_by_stem(spec.data, test_manifest)
    train_samples = _draw_subset(pool, spec.train_size, spec.seed)
    rows = []
    for kind in spec.strategies:
        store = _reload_store(spec.backbone)
        t0 = time.perf_counter()
        strategy, _ = _adapt_once(store, config, kind, train_samples, spec,
                                  spec.seed)
        dices = evaluate_dice(store, config, strategy, test)
        wall = time.perf_counter() - t0
        rows.append(ResultRow(kind, spec.train_size, 0, spec.seed, dices,
                              trainable_params_of(strategy, store), wall))
        logger.info("compare %s: mean dice %.3f (params %d)", kind,
                    rows[-1].mean_dice, rows[-1].trainable_params)
    _write_rows(spec.out, rows,
                extra_header=["test_hash %s" % _stems_hash(test_manifest.stems)])
    return rows


# -- CLI ------------------------------------------------------------------


def _csv_ints(text):
    return tuple(int(x) for x in str(text).split(",") if x)


def _csv_names(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3,
                   help="learning rate (prompt default 1e-3; finetune is "
                        "capped at 1e-4; full-scale reference value: 1e-5)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--decay-factor", type=float, default=0.5)
    p.add_argument("--smooth", type=float, default=1.0)


def _add_split_flags(p):
    p.add_argument("--test-size", type=int, default=48)
    p.add_argument("--split-seed", type=int, default=0)


def _train_config(args):
    return TrainConfig(lr=args.lr, epochs=args.epochs,
                       batch_size=args.batch_size, patience=args.patience,
                       decay_factor=args.decay_factor, smooth=args.smooth,
                       seed=args.seed)


class _SubParser:
    """add_argument wrapper that can strip defaults/required, so a second
    parse pass reports only the flags the user actually typed."""

    def __init__(self, parser, suppress):
        self.parser = parser
        self.suppress = suppress

    def add_argument(self, *names, **kw):
        if self.suppress:
            kw["default"] = argparse.SUPPRESS
            kw.pop("required", None)
        self.parser.add_argument(*names, **kw)


def build_parser(suppress_defaults=False):
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Prompt-based adaptation experiments for a frozen "
                    "toy segmenter on synthetic micrographs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = _SubParser(sub.add_parser(name, help=help_), suppress_defaults)
        p.add_argument("--config", default=None,
                       help="key=value file; explicit flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = cmd("generate", "write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--domain", default="target", choices=("source", "target"))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)

    p = cmd("pretrain", "train and freeze a backbone on a source dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--val-size", type=int, default=16)

    p = cmd("adapt", "train one strategy on a small subset and evaluate")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="head",
                   choices=("none", "head", "prefix", "encoder", "finetune"))
    p.add_argument("--train-size", type=int, default=10)
    p.add_argument("--depths", default=None,
                   help="comma-separated encoder depths (default: last block)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prefix-tokens", type=int, default=64)
    _add_split_flags(p)
    _add_train_flags(p)

    p = cmd("eval", "per-image hard dice of a checkpoint on a dataset")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy-checkpoint", default=None)

    p = cmd("sweep", "strategies x training sizes on a fixed test set")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", default="head,prefix,encoder")
    p.add_argument("--sizes", default="50,30,20,10,5")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prefix-tokens", type=int, default=64)
    _add_split_flags(p)
    _add_train_flags(p)

    p = cmd("ablate-depth", "prompt-depth ablation (prefix/encoder)")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="prefix", choices=("prefix", "encoder"))
    p.add_argument("--train-size", type=int, default=10)
    p.add_argument("--depth-sizes", default="1,2,4")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prefix-tokens", type=int, default=64)
    _add_split_flags(p)
    _add_train_flags(p)

    p = cmd("stability", "re-draw the training subset for several rounds")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", default="head,prefix")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--train-size", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prefix-tokens", type=int, default=64)
    _add_split_flags(p)
    _add_train_flags(p)

    p = cmd("compare", "all four strategies on one shared split")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", default="head,prefix,encoder,finetune")
    p.add_argument("--train-size", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prefix-tokens", type=int, default=64)
    _add_split_flags(p)
    _add_train_flags(p)

    return parser


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _effective_args(argv):
    """defaults < config file < explicit flags, with required checked last."""
    given = vars(build_parser(suppress_defaults=True).parse_args(argv))
    command = given["command"]
    actions = {a.dest: a
               for a in build_parser()._subparsers._group_actions[0]
               .choices[command]._actions if a.dest != "help"}
    merged = {dest: a.default for dest, a in actions.items()}
    merged["command"] = command
    config_path = given.get("config") or merged.get("config")
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key not in actions:
                raise ValueError("unknown config key %r" % key)
            convert = actions[key].type or str
            merged[key] = convert(raw)
    merged.update(given)
    for dest, action in actions.items():
        if action.required and merged.get(dest) is None:
            raise ValueError("missing required flag --%s"
                             % dest.replace("_", "-"))
    return argparse.Namespace(**merged)


def _spec_from(args):
    spec = ExperimentSpec(seed=args.seed)
    for name in ("backbone", "data", "out", "strategy", "train_size",
                 "rounds", "test_size", "split_seed", "alpha", "prefix_tokens"):
        if hasattr(args, name):
            setattr(spec, name, getattr(args, name))
    if getattr(args, "strategies", None):
        spec.strategies = _csv_names(args.strategies)
    if getattr(args, "sizes", None):
        spec.sizes = _csv_ints(args.sizes)
    if getattr(args, "depths", None):
        spec.depths = _csv_ints(args.depths)
    if hasattr(args, "lr"):
        spec.train = _train_config(args)
    return spec


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args = _effective_args(argv)
        if args.command == "generate":
            run_generate(args.out, args.domain, args.count, args.seed,
                         args.height, args.width)
        elif args.command == "pretrain":
            run_pretrain(args.data, args.out, epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, seed=args.seed,
                         val_size=args.val_size)
        elif args.command == "adapt":
            run_adapt(_spec_from(args))
        elif args.command == "eval":
            run_eval(args.backbone, args.data, args.out,
                     strategy_path=args.strategy_checkpoint)
        elif args.command == "sweep":
            run_sweep(_spec_from(args))
        elif args.command == "ablate-depth":
            run_ablate_depth(_spec_from(args),
                             depth_sizes=_csv_ints(args.depth_sizes))
        elif args.command == "stability":
            run_stability(_spec_from(args))
        elif args.command == "compare":
            run_compare(_spec_from(args))
        else:  # unreachable: argparse enforces the choice
            return EXIT_CONFIG
    except FreezeViolation as err:
        logger.error("contract violation: %s", err)
        return EXIT_CONTRACT
    except OSError as err:
        logger.error("i/o error: %s", err)
        return EXIT_IO
    except ValueError as err:
        logger.error("bad configuration: %s", err)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
