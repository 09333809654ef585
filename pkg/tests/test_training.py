import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranet import autodiff as ad
from ranet.config import load_preset
from ranet.data import normalize, synthetic_splits
from ranet.errors import DataError, TrainingDivergedError, UsageError
from ranet.network import build_graph, forward_logits
from ranet.training import (
    OptimizerState,
    TrainConfig,
    cumulative_loss,
    lr_at_epoch,
    sgd_momentum_step,
    train,
    write_epoch_log,
)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_splits(0, 64, 16, 16, classes=4, resolution=(8, 8), difficulty=0.0)


def tiny_graph(seed=0):
    return build_graph(load_preset("tiny"), seed=seed)


def snapshot(graph):
    return [p.data.copy() for p in graph.parameters()]


# learning-rate schedule

def test_cifar_schedule_values():
    cfg = TrainConfig.cifar_recipe()
    assert lr_at_epoch(cfg, 0) == pytest.approx(0.1)  # [PAPER]
    assert lr_at_epoch(cfg, 149) == pytest.approx(0.1)
    assert lr_at_epoch(cfg, 150) == pytest.approx(0.01)
    assert lr_at_epoch(cfg, 225) == pytest.approx(0.001)
    assert lr_at_epoch(cfg, 299) == pytest.approx(0.001)


def test_schedule_non_increasing():
    for cfg in (TrainConfig.cifar_recipe(), TrainConfig.desk_recipe()):
        lrs = [lr_at_epoch(cfg, e) for e in range(cfg.epochs)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(epochs=10, lr_milestones=(5, 3))
    with pytest.raises(UsageError):
        TrainConfig(epochs=10, lr_milestones=(12,))
    with pytest.raises(UsageError):
        TrainConfig(momentum=1.0)
    with pytest.raises(UsageError):
        TrainConfig(batch_size=0)
    assert TrainConfig(epochs=0, lr_milestones=()).epochs == 0


# optimizer

def one_param(value=1.0):
    return ad.Parameter(np.full((2, 2), value), "conv-kernel")


def test_momentum_two_steps():
    p = one_param()
    g = np.full((2, 2), 0.5, np.float32)
    state = OptimizerState.zeros_like([p])
    for _ in range(2):
        sgd_momentum_step([p], [g], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(p.data, 1.0 - 0.1 * 0.5 * 2.9, rtol=1e-6)  # [DERIVED] eta*g*(1 + 1.9)


def test_momentum_constant_gradient_displacement():
    p = one_param()
    g = np.full((2, 2), 0.5, np.float32)
    st_ = OptimizerState.zeros_like([p])
    for _ in range(3):
        sgd_momentum_step([p], [g], st_, lr=0.1, momentum=0.9, weight_decay=0.0)
    # [DERIVED] velocities g, 1.9g, 2.71g -> displacement lr*g*(1 + 1.9 + 2.71)
    np.testing.assert_allclose(p.data, 1.0 - 0.1 * 0.5 * 5.61, rtol=1e-6)
    np.testing.assert_allclose(st_.velocity[0], 0.5 * 2.71, rtol=1e-6)


def test_zero_momentum_is_plain_sgd():
    p = one_param(2.0)
    g = np.arange(4, dtype=np.float32).reshape(2, 2)
    sgd_momentum_step([p], [g], OptimizerState.zeros_like([p]), 0.25, 0.0, 0.0)
    np.testing.assert_allclose(p.data, 2.0 - 0.25 * g)


def test_zero_gradient_is_fixed_point():
    p = one_param(3.0)
    sgd_momentum_step([p], [None], OptimizerState.zeros_like([p]), 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(p.data, 3.0)


def test_weight_decay_shrinks():
    p = one_param(3.0)
    sgd_momentum_step([p], [None], OptimizerState.zeros_like([p]), 0.1, 0.9, 1e-2)
    np.testing.assert_allclose(p.data, 3.0 * (1 - 0.1 * 1e-2), rtol=1e-6)


def test_optimizer_shape_mismatch():
    p = one_param()
    with pytest.raises(UsageError):
        sgd_momentum_step([p], [np.zeros(3)], OptimizerState.zeros_like([p]), 0.1, 0.9, 0.0)


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-4, 1.0), mom=st.floats(0.0, 0.99), seed=st.integers(0, 1000))
def test_first_step_matches_formula(lr, mom, seed):
    rng = np.random.default_rng(seed)
    p = ad.Parameter(rng.standard_normal(5), "linear-bias")
    before = p.data.copy()
    g = rng.standard_normal(5).astype(np.float32)
    sgd_momentum_step([p], [g], OptimizerState.zeros_like([p]), lr, mom, 1e-4)
    np.testing.assert_allclose(p.data, before - np.float32(lr) * (g + np.float32(1e-4) * before), rtol=1e-5, atol=1e-6)


# loss

def ce(logits, labels):
    z = logits - logits.max(1, keepdims=True)
    return float(np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(len(labels)), labels]))


def test_single_classifier_loss_is_cross_entropy():
    rng = np.random.default_rng(0)
    lg, y = rng.standard_normal((6, 4)), np.arange(6) % 4
    loss = cumulative_loss([ad.Tensor(lg, dtype=np.float64)], y)
    assert loss.item() == pytest.approx(ce(lg, y), rel=1e-10)


def test_identical_logits_scale_with_k():
    rng = np.random.default_rng(1)
    lg, y = rng.standard_normal((5, 3)), np.arange(5) % 3
    loss = cumulative_loss([ad.Tensor(lg, dtype=np.float64)] * 4, y)
    assert loss.item() == pytest.approx(4 * ce(lg, y), rel=1e-10)


def test_zero_weight_blocks_gradient_to_later_head(tiny_data):
    g = tiny_graph()
    x = normalize(tiny_data.train.images[:8], tiny_data.mean, tiny_data.std)
    params = dict(g.named_parameters())
    with ad.Tape() as tape:
        logits = forward_logits(g, ad.Tensor(x), training=True)
        loss = cumulative_loss(logits, tiny_data.train.labels[:8], (1.0, 0.0))
    ad.zero_grad(g.parameters())
    ad.backward(tape, loss)
    for name in ("head2.fc.weight", "head2.fc.bias", "s2.b2.l1.2.conv.kernel"):
        grad = params[name].grad
        assert grad is None or not np.any(grad), name
    assert np.any(params["head1.fc.weight"].grad)


def test_loss_weight_count_checked():
    with pytest.raises(UsageError):
        cumulative_loss([ad.Tensor(np.zeros((1, 2)))] * 2, [0], (1.0,))


# training loop

def test_zero_epochs_leaves_graph_unchanged(tiny_data):
    g = tiny_graph()
    before = snapshot(g)
    res = train(g, tiny_data.train, tiny_data.validation, TrainConfig(epochs=0, lr_milestones=()))
    assert res.log == [] and res.steps == 0
    for a, b in zip(before, snapshot(g)):
        np.testing.assert_array_equal(a, b)


def test_every_parameter_receives_gradient(tiny_data):
    g = tiny_graph()
    x = normalize(tiny_data.train.images[:16], tiny_data.mean, tiny_data.std)
    with ad.Tape() as tape:
        loss = cumulative_loss(forward_logits(g, ad.Tensor(x), training=True), tiny_data.train.labels[:16])
    ad.zero_grad(g.parameters())
    ad.backward(tape, loss)
    for name, p in g.named_parameters():
        assert p.grad is not None and np.any(p.grad), name


def test_overfits_small_batch(tiny_data):
    g = tiny_graph()
    cfg = TrainConfig(epochs=100, batch_size=8, initial_lr=0.05, lr_milestones=(), weight_decay=0.0, augment=False)
    res = train(g, tiny_data.train.subset(np.arange(8)), tiny_data.validation, cfg)
    assert res.steps == 100
    assert res.history[-1] < 0.3 * res.history[0]


def test_same_seed_bit_identical(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=16, lr_milestones=(1,), seed=3)
    runs = []
    for _ in range(2):
        g = tiny_graph(seed=1)
        res = train(g, tiny_data.train, tiny_data.validation, cfg)
        runs.append((snapshot(g), res.history))
    assert runs[0][1] == runs[1][1]
    for a, b in zip(runs[0][0], runs[1][0]):
        np.testing.assert_array_equal(a, b)


def test_lone_trailing_sample_skipped(tiny_data):
    g = tiny_graph()
    res = train(g, tiny_data.train.subset(np.arange(17)), tiny_data.validation,
                TrainConfig(epochs=1, batch_size=8, lr_milestones=()))
    assert res.steps == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_data):
    g = tiny_graph()
    for p in g.parameters():
        if p.role == "linear-weight":
            p.data[:] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        train(g, tiny_data.train, tiny_data.validation, TrainConfig(epochs=1, batch_size=16, lr_milestones=()))
    assert err.value.epoch == 0 and err.value.batch == 0


def test_empty_training_set(tiny_data):
    with pytest.raises(DataError):
        train(tiny_graph(), tiny_data.train.subset(np.arange(0)), tiny_data.validation, TrainConfig())


def test_epoch_log_csv(tiny_data, tmp_path):
    g = tiny_graph()
    path = tmp_path / "log.csv"
    res = train(g, tiny_data.train, tiny_data.validation,
                TrainConfig(epochs=2, batch_size=32, lr_milestones=(1,)), log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_acc_1,val_acc_2"
    assert len(lines) == 3
    assert lines[2].split(",")[1] == "0.01"
    assert len(res.final_val_accuracy) == 2
    write_epoch_log(path, res.log, 2)
    assert path.read_text().splitlines() == lines
