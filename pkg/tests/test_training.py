import numpy as np
import pytest

from promptseg.backbone import init_backbone
from promptseg.strategies import attach
from promptseg.tensor import NonFiniteError, ParameterStore, Tensor, finite_diff_check
from promptseg.training import (
    Checkpoint,
    TrainConfig,
    adam_step,
    batch_dice_loss,
    dice_loss,
    freeze_verify,
    hard_dice,
    init_optimizer,
    pretrain_backbone,
    soft_dice,
    train,
    write_loss_log,
)

from conftest import MICRO


# -- dice -----------------------------------------------------------------


def test_soft_dice_perfect_binary_match():
    m = np.ones((2, 2))
    assert soft_dice(m, m, smooth=1.0) == pytest.approx((2 * 4 + 1) / (4 + 4 + 1) * 1.0)
    assert soft_dice(m, m, smooth=1.0) == pytest.approx(1.0)
    assert soft_dice(m, m, smooth=1e-9) == pytest.approx(1.0)


def test_soft_dice_empty_vs_empty_smoothing():
    z = np.zeros((3, 3))
    assert soft_dice(z, z, smooth=1.0) == 1.0


def test_soft_dice_half_overlap_enumerated():
    # |pred & gt| = 2, sum pred = 4, sum gt = 6 -> 2*2/(4+6) = 0.4
    pred = np.zeros(12)
    gt = np.zeros(12)
    pred[:4] = 1.0
    gt[2:8] = 1.0
    assert soft_dice(pred, gt, smooth=1e-12) == pytest.approx(0.4, abs=1e-9)


def test_soft_dice_symmetry_for_binary_pred():
    rng = np.random.default_rng(0)
    p = (rng.random((5, 5)) > 0.5).astype(float)
    g = (rng.random((5, 5)) > 0.5).astype(float)
    assert soft_dice(p, g, 1.0) == pytest.approx(soft_dice(g, p, 1.0))


def test_dice_rejects_bad_inputs():
    with pytest.raises(ValueError, match="shape"):
        soft_dice(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="binary"):
        soft_dice(np.zeros((2, 2)), np.full((2, 2), 0.5))


def test_dice_loss_bounds_and_cases():
    m = np.ones((4, 4))
    assert dice_loss(m, m, smooth=1e-9) == pytest.approx(0.0, abs=1e-9)
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[:2], b[2:] = 1.0, 1.0
    assert dice_loss(a, b, smooth=1e-9) == pytest.approx(1.0, abs=1e-9)


def test_dice_loss_gradient_matches_finite_differences():
    gt = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    store = ParameterStore()
    store.add("p", np.random.default_rng(1).uniform(0.1, 0.9, (3, 3)))
    results = finite_diff_check(
        lambda lv: 1.0 - soft_dice(lv["p"], gt, smooth=1.0), store,
        step=1e-5, tol=1e-6)
    assert all(r.status == "pass" for r in results)


def test_batch_dice_loss_is_mean_of_per_image():
    rng = np.random.default_rng(2)
    probs = rng.uniform(0.0, 1.0, (3, 4, 4))
    gts = (rng.random((3, 4, 4)) > 0.5).astype(float)
    batched = float(batch_dice_loss(Tensor(probs), gts, smooth=1.0).data)
    singles = [dice_loss(probs[i], gts[i], smooth=1.0) for i in range(3)]
    assert batched == pytest.approx(np.mean(singles))


def test_hard_dice_conventions():
    empty = np.zeros((4, 4), bool)
    full = np.ones((4, 4), bool)
    assert hard_dice(empty, empty) == 1.0
    assert hard_dice(empty, full) == 0.0
    assert hard_dice(full, full) == 1.0
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert hard_dice(a, full) == pytest.approx(2 * 8 / (8 + 16))


# -- adam -----------------------------------------------------------------


def test_adam_first_step_magnitude():
    store = ParameterStore()
    w = store.add("w", np.zeros(4))
    state = init_optimizer(store)
    adam_step(state, {"w": np.ones(4)}, store, lr=0.01)
    # bias-corrected m-hat = 1, v-hat = 1 -> update = lr/(1 + eps)
    assert np.allclose(w, -0.01 / (1 + 1e-8), atol=1e-12)
    assert state.step == 1


def test_adam_zero_gradient_keeps_parameters():
    store = ParameterStore()
    w = store.add("w", np.array([1.0, 2.0]))
    before = w.copy()
    state = init_optimizer(store)
    adam_step(state, {"w": np.zeros(2)}, store, lr=0.1)
    assert np.array_equal(w, before)
    assert state.step == 1


def test_adam_never_touches_frozen():
    store = ParameterStore()
    store.add("w", np.ones(2))
    frozen = store.add("f", np.ones(2), trainable=False)
    before = frozen.tobytes()
    state = init_optimizer(store)
    adam_step(state, {"w": np.ones(2)}, store, lr=0.1)
    assert frozen.tobytes() == before


def test_adam_validates_gradient_cover_and_shapes():
    store = ParameterStore()
    store.add("w", np.ones(2))
    store.add("u", np.ones(2))
    state = init_optimizer(store)
    with pytest.raises(ValueError, match="exactly the trainable set"):
        adam_step(state, {"w": np.ones(2)}, store, lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        adam_step(state, {"w": np.ones(3), "u": np.ones(2)}, store, lr=0.1)


# -- train loop --------------------------------------------------------------


def _train_once(store, strategy, samples, **kw):
    cfg = TrainConfig(**{"lr": 1e-2, "epochs": 4, "batch_size": 2, "seed": 0, **kw})
    return train(store, strategy, samples, cfg, MICRO)


def test_train_deterministic_given_seed(micro_backbone, micro_target):
    logs = []
    for _ in range(2):
        store = init_backbone(MICRO, seed=0)
        store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
        strategy = attach("prefix", MICRO, store, seed=1)
        _, log = _train_once(store, strategy, micro_target[:6])
        logs.append(log)
    assert logs[0] == logs[1]


def test_train_none_strategy_constant_loss(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    strategy = attach("none", MICRO, store, seed=0)
    _, log = _train_once(store, strategy, micro_target[:6])
    losses = {loss for _, loss, _ in log}
    assert len(losses) == 1


def test_train_checkpoint_is_min_of_log(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    strategy = attach("prefix", MICRO, store, seed=1)
    checkpoint, log = _train_once(store, strategy, micro_target[:6], epochs=6)
    assert checkpoint.loss == min(loss for _, loss, _ in log)
    assert log[checkpoint.epoch - 1][1] == checkpoint.loss


def test_train_restores_best_values(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    strategy = attach("prefix", MICRO, store, seed=1)
    checkpoint, _ = _train_once(store, strategy, micro_target[:6], epochs=6)
    name = "strategy/prefix/p%d" % MICRO.layers
    assert np.array_equal(strategy.params[name], checkpoint.values[name])


def test_train_lr_nonincreasing_and_plateau_decay(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    # nothing trainable: the loss never improves, so the plateau rule must
    # halve the lr every `patience` epochs
    strategy = attach("none", MICRO, store, seed=0)
    _, log = _train_once(store, strategy, micro_target[:4], epochs=7,
                         patience=3, decay_factor=0.5, lr=1e-2)
    lrs = [lr for _, _, lr in log]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 1e-2
    # epoch 1 sets the best; epochs 2-4 stale -> decay before... after epoch 4
    assert lrs[-1] < 1e-2


def test_train_rejects_empty_dataset(micro_backbone):
    store = init_backbone(MICRO, seed=0)
    strategy = attach("prefix", MICRO, store, seed=0)
    with pytest.raises(ValueError, match="empty"):
        train(store, strategy, [], TrainConfig(), MICRO)


def test_train_nonfinite_aborts_with_location(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    strategy = attach("prefix", MICRO, store, seed=1)
    bad = strategy.params["strategy/prefix/p%d" % MICRO.layers]
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 1"):
        _train_once(store, strategy, micro_target[:4])


def test_pretrain_freezes_everything(micro_source):
    store = init_backbone(MICRO, seed=3)
    checkpoint, log = pretrain_backbone(
        store, micro_source[:8],
        TrainConfig(lr=1e-3, epochs=2, batch_size=4, seed=0), MICRO)
    assert store.count(trainable_only=True) == 0
    assert len(log) == 2
    assert isinstance(checkpoint, Checkpoint)


# -- freeze_verify ----------------------------------------------------------------


def test_freeze_verify_pass_and_fail(micro_backbone):
    snapshot = micro_backbone.snapshot()
    report = freeze_verify(micro_backbone, snapshot)
    assert report.ok and not report.changed

    name = micro_backbone.frozen_names()[0]
    saved = micro_backbone[name].copy()
    micro_backbone[name][...] += 1.0
    report = freeze_verify(micro_backbone, snapshot)
    assert not report.ok
    assert report.violations == [name]
    micro_backbone.set_value(name, saved)


def test_freeze_verify_reports_trainable_changes_without_violation():
    store = ParameterStore()
    store.add("t", np.zeros(2))
    store.add("f", np.zeros(2), trainable=False)
    snap = store.snapshot()
    store["t"][0] = 1.0
    report = freeze_verify(store, snap)
    assert report.ok
    assert report.changed == ["t"]


def test_frozen_tensors_bitwise_after_training(micro_backbone, micro_target):
    store = init_backbone(MICRO, seed=0)
    store.load_values({n: micro_backbone[n] for n in micro_backbone.names()})
    for kind in ("head", "prefix", "encoder"):
        strategy = attach(kind, MICRO, store, seed=2)
        snapshot = store.snapshot()
        _train_once(store, strategy, micro_target[:4], epochs=3)
        report = freeze_verify(store, snapshot)
        assert report.ok, (kind, report.violations)


def test_write_loss_log(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_log(path, [(1, 0.5, 1e-3), (2, 0.25, 1e-3)])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr"
    assert lines[1] == "1,0.5,0.001"
    assert len(lines) == 3
