"""Loss, optimizer, schedule, and training-loop behavior."""

import numpy as np
import pytest

from oracles import adam_single_update, bce_loops
from rsan import (ConfigError, DropBlockConfig, GradientMissingError,
                  NetworkConfig, ShapeError, Tensor, backward, bce_loss, build)
from rsan import ops
from rsan.data import synth_vessels
from rsan.errors import DivergenceError
from rsan.training import (AdamState, TrainConfig, adam_step, evaluate_bce,
                           loss_history_csv, lr_at, train, zero_grads)

TINY_NET = dict(stage_channels=(4, 6, 8, 12), dropblock=DropBlockConfig(3, 1.0))


def tiny_net(seed=0, variant="rsan", **overrides):
    kwargs = dict(TINY_NET)
    kwargs.update(overrides)
    return build(NetworkConfig(variant=variant, **kwargs), seed)


# ---------------------------------------------------------------------------
# BCE


def test_bce_half_everywhere_is_ln2():
    pred = Tensor(np.full((2, 4, 4, 1), 0.5, dtype=np.float32))
    target = Tensor((np.random.default_rng(0).random((2, 4, 4, 1)) > 0.5).astype(np.float32))
    assert float(bce_loss(pred, target).data) == pytest.approx(np.log(2), rel=1e-6)
    assert float(bce_loss(pred, target).data) == pytest.approx(0.693147, abs=1e-6)


def test_bce_perfect_prediction_near_zero():
    target = Tensor(np.array([0.0, 1.0, 1.0, 0.0], dtype=np.float32).reshape(1, 2, 2, 1))
    pred = Tensor(np.clip(target.data, 1e-7, 1 - 1e-7))
    assert float(bce_loss(pred, target).data) < 1e-5


def test_bce_matches_loop_oracle():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.uniform(0.01, 0.99, (2, 5, 5, 1)), dtype=np.float64)
    target = Tensor((rng.random((2, 5, 5, 1)) > 0.3).astype(np.float64), dtype=np.float64)
    assert float(bce_loss(pred, target).data) == pytest.approx(
        bce_loops(pred.data, target.data), abs=1e-6)


def test_bce_validates_inputs():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.full((1, 2, 2, 1), 0.5)), Tensor(np.zeros((1, 2, 3, 1))))
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.full((1, 2, 2, 1), 0.5)), Tensor(np.full((1, 2, 2, 1), 0.4)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_closed_form():
    w = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    w.grad = np.ones(1, dtype=np.float32)
    state = AdamState([w])
    adam_step([w], state, lr=1e-3)
    expected = adam_single_update(0.0, 1.0, 1e-3)
    assert float(w.data[0]) == pytest.approx(expected, rel=1e-6)
    assert float(w.data[0]) == pytest.approx(-1e-3, rel=1e-4)


def test_adam_trajectory_matches_scalar_oracle():
    w = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True, dtype=np.float64)
    state = AdamState([w])
    for _ in range(5):
        w.grad = np.full(1, 0.7)
        adam_step([w], state, lr=1e-2)
    expected = adam_single_update(0.0, 0.7, 1e-2, steps=5)
    assert float(w.data[0]) == pytest.approx(expected, rel=1e-9)


def test_adam_zero_gradient_keeps_parameters():
    w = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
    w.grad = np.zeros(1, dtype=np.float32)
    state = AdamState([w])
    adam_step([w], state, lr=1e-3)
    assert state.t == 1
    assert float(w.data[0]) == 1.5


def test_adam_missing_gradient_raises():
    w = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    with pytest.raises(GradientMissingError):
        adam_step([w], AdamState([w]), lr=1e-3)


def test_adam_descends_convex_quadratic():
    w = Tensor(np.array([2.0], dtype=np.float64), requires_grad=True, dtype=np.float64)
    state = AdamState([w])
    def loss_value():
        return float((w.data[0] - 3.0) ** 2)
    before = loss_value()
    zero_grads([w])
    backward(ops.scale(ops.sum_all(ops.mul(ops.add(w, Tensor(np.array([-3.0]), dtype=np.float64)),
                                           ops.add(w, Tensor(np.array([-3.0]), dtype=np.float64)))), 1.0))
    adam_step([w], state, lr=1e-4)
    assert loss_value() < before


# ---------------------------------------------------------------------------
# schedule


def test_lr_schedule_examples():
    drive = TrainConfig(total_epochs=200, phase1_epochs=150)
    assert lr_at(0, drive) == 1e-3
    assert lr_at(149, drive) == 1e-3
    assert lr_at(150, drive) == 1e-4
    chase = TrainConfig(batch_size=1, total_epochs=150, phase1_epochs=100)
    assert lr_at(99, chase) == 1e-3
    assert lr_at(100, chase) == 1e-4
    flat = TrainConfig(total_epochs=10, phase1_epochs=10)
    assert all(lr_at(e, flat) == 1e-3 for e in range(10))


def test_lr_out_of_range():
    cfg = TrainConfig(total_epochs=10, phase1_epochs=5)
    with pytest.raises(ValueError):
        lr_at(10, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_epochs=10, phase1_epochs=11)
    with pytest.raises(ConfigError):
        TrainConfig(lr_phase1=0.0)


# ---------------------------------------------------------------------------
# the loop


def small_dataset(count=6, seed=0):
    return synth_vessels(count, (32, 32), seed).samples


def quick_cfg(**overrides):
    kwargs = dict(batch_size=2, total_epochs=4, phase1_epochs=3,
                  seed=11, validation_count=0)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def test_history_length_and_csv_format():
    net = tiny_net()
    result = train(net, small_dataset(), quick_cfg())
    assert len(result.history) == 4
    csv = loss_history_csv(result.history)
    lines = csv.strip().split("\n")
    assert lines[0] == "epoch,phase_lr,train_loss,val_loss"
    assert len(lines) == 5
    assert lines[1].startswith("0,0.001000,")
    assert lines[4].startswith("3,0.000100,")
    assert lines[1].endswith(",nan")  # validation disabled


def test_same_seed_identical_histories_and_parameters():
    a = train(tiny_net(3), small_dataset(), quick_cfg())
    b = train(tiny_net(3), small_dataset(), quick_cfg())
    assert loss_history_csv(a.history) == loss_history_csv(b.history)


def test_validation_does_not_perturb_training():
    samples = small_dataset(6)
    val = small_dataset(2, seed=99)
    net_a = tiny_net(5)
    net_b = tiny_net(5)
    res_a = train(net_a, samples, quick_cfg(), val_samples=[])
    res_b = train(net_b, samples, quick_cfg(), val_samples=val)
    assert [s.train_loss for s in res_a.history] == [s.train_loss for s in res_b.history]
    assert all(np.array_equal(p.data, q.data)
               for p, q in zip(net_a.parameters, net_b.parameters))
    assert all(np.isfinite(s.val_loss) for s in res_b.history)
    assert res_b.best_epoch is not None and res_b.best_state is not None


def test_internal_split_is_deterministic():
    samples = small_dataset(6)
    res_a = train(tiny_net(2), samples, quick_cfg(validation_count=2))
    res_b = train(tiny_net(2), samples, quick_cfg(validation_count=2))
    assert [s.val_loss for s in res_a.history] == [s.val_loss for s in res_b.history]


def test_best_checkpoint_tracks_lowest_validation_loss():
    samples = small_dataset(6)
    result = train(tiny_net(4), samples, quick_cfg(validation_count=2))
    losses = [s.val_loss for s in result.history]
    assert result.best_val_loss == min(losses)
    assert result.best_epoch == losses.index(min(losses))


def test_batch_larger_than_dataset_rejected():
    with pytest.raises(ConfigError):
        train(tiny_net(), small_dataset(2), quick_cfg(batch_size=4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    net = tiny_net()
    net.head.kernel.data[...] = np.inf
    with pytest.raises(DivergenceError):
        train(net, small_dataset(), quick_cfg())


def test_evaluate_bce_runs_in_eval_mode():
    net = tiny_net()
    samples = small_dataset(2)
    stats_before = [buf.copy() for _, buf in net.named_buffers()]
    value = evaluate_bce(net, samples)
    assert np.isfinite(value)
    for before, (_, after) in zip(stats_before, net.named_buffers()):
        assert np.array_equal(before, after)
