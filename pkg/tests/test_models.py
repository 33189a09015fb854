"""Model structure, optimizer, joint and two-stage training, checkpoints."""

import numpy as np
import pytest

from eegshield import autodiff as ad
from eegshield import data, models
from eegshield.errors import (
    CorruptionError,
    DimensionError,
    FormatError,
    LabelError,
    ParameterError,
)

from oracles import counting_uia

F64 = np.float64


@pytest.fixture(scope="module")
def toy_dataset():
    return data.synth_generate(
        data.SynthConfig(
            users=4, sessions=2, trials_per_user_per_session=8,
            channels=4, samples=64, classes=2, seed=11,
        )
    )


def small_models(seed=0, n_users=4):
    return models.SurrogateModels(models.CFG_A, channels=4, samples=64,
                                  n_classes=2, n_users=n_users, hidden=16, seed=seed)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def test_presets_shapes():
    assert models.CFG_A.feature_dim(8, 128) == 8 * 28
    assert models.CFG_B.feature_dim(8, 128) == 16 * 12


@pytest.mark.parametrize("c,t", [(2, 32), (4, 64), (8, 128), (3, 100)])
def test_feature_dim_matches_actual_flattened_length(c, t):
    m = models.SurrogateModels(models.CFG_A, c, t, 2, 3, hidden=8, seed=0)
    x = np.random.default_rng(0).standard_normal((5, c, t))
    feats = m.features(ad.constant(x))
    assert feats.data.shape == (5, models.CFG_A.feature_dim(c, t))


def test_extractor_config_validation():
    with pytest.raises(ParameterError):
        models.ExtractorConfig(temporal_filters=0)
    with pytest.raises(ParameterError):
        models.ExtractorConfig(activation="tanh")
    with pytest.raises(DimensionError):
        models.CFG_A.feature_dim(4, 8)  # kernel longer than the signal


# ---------------------------------------------------------------------------
# forward contract
# ---------------------------------------------------------------------------

def test_forward_shapes_batch_one():
    m = small_models()
    x = np.zeros((1, 4, 64))
    task, user, feats = m.forward(ad.constant(x))
    assert task.data.shape == (1, 2)
    assert user.data.shape == (1, 4)
    assert feats.data.shape == (1, m.feature_dim)


def test_forward_zero_weight_heads_give_zero_logits():
    m = small_models()
    for name in ("task_weight", "task_bias", "user_weight1", "user_bias1",
                 "user_weight2", "user_bias2"):
        m.params[name].data = np.zeros_like(m.params[name].data)
    x = np.random.default_rng(1).standard_normal((3, 4, 64))
    task, user, _ = m.forward(ad.constant(x))
    assert np.array_equal(task.data, np.zeros((3, 2)))
    assert np.array_equal(user.data, np.zeros((3, 4)))


def test_forward_features_identical_across_head_order():
    m = small_models(seed=3)
    x = np.random.default_rng(2).standard_normal((2, 4, 64))
    f1 = m.features(ad.constant(x))
    _ = m.task_logits_from(f1)
    _ = m.user_logits_from(f1)
    f2 = m.features(ad.constant(x))
    _ = m.user_logits_from(f2)
    _ = m.task_logits_from(f2)
    assert np.array_equal(f1.data, f2.data)


def test_forward_rejects_wrong_shape():
    m = small_models()
    with pytest.raises(DimensionError):
        m.forward(ad.constant(np.zeros((2, 3, 64))))


def test_head_output_dims_match_label_spaces():
    m = small_models(n_users=7)
    assert m.params["task_weight"].data.shape[1] == 2
    assert m.params["user_weight2"].data.shape[1] == 7


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_sgd_definition():
    p = {"w": ad.Tensor(np.array([1.0]), requires_grad=True)}
    state = models.OptimizerState(kind="sgd", learning_rate=0.1)
    models.optimizer_step(state, p, {"w": np.array([2.0])})
    assert np.allclose(p["w"].data, [0.8])


def test_adam_first_step_magnitude():
    p = {"w": ad.Tensor(np.array([5.0]), requires_grad=True)}
    state = models.OptimizerState(kind="adam", learning_rate=1e-3)
    models.optimizer_step(state, p, {"w": np.array([1.0])})
    # bias correction makes the first step exactly lr / (1 + eps')
    assert abs(p["w"].data[0] - (5.0 - 1e-3)) < 1e-6


def test_zero_gradient_is_fixed_point_but_counter_advances():
    p = {"w": ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)}
    state = models.OptimizerState(kind="adam", learning_rate=1e-3)
    models.optimizer_step(state, p, {"w": np.zeros(2)})
    models.optimizer_step(state, p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, [1.5, -2.0])
    assert state.step == 2


def test_optimizer_shape_mismatch():
    p = {"w": ad.Tensor(np.zeros((2, 2)), requires_grad=True)}
    state = models.OptimizerState(kind="sgd", learning_rate=0.1)
    with pytest.raises(DimensionError):
        models.optimizer_step(state, p, {"w": np.zeros(3)})


def test_optimizer_validation():
    with pytest.raises(ParameterError):
        models.OptimizerState(kind="rmsprop", learning_rate=0.1)
    with pytest.raises(ParameterError):
        models.OptimizerState(kind="sgd", learning_rate=0.0)


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

def test_single_sgd_step_is_exactly_minus_lr_grad(toy_dataset):
    four = toy_dataset.subset(np.arange(4))
    cfg = models.TrainConfig(alpha=0.1, batch_size=4, epochs=1, seed=9,
                             optimizer="sgd", learning_rate=0.05)
    m = small_models(seed=5)
    before = {k: p.data.copy() for k, p in m.params.items()}

    # replicate the single batch the training loop will draw
    order = np.random.default_rng(cfg.seed).permutation(4)
    x = four.trials[order].astype(F64)
    task, user, _ = m.forward(x)
    loss = ad.add(
        ad.softmax_cross_entropy(task, four.task_labels[order]),
        ad.scale(ad.softmax_cross_entropy(user, four.user_labels[order]), cfg.alpha),
    )
    grads = dict(zip(models.PARAM_ORDER, ad.grad(loss, [m.params[k] for k in models.PARAM_ORDER])))

    m2 = small_models(seed=5)
    models.train_joint(four, cfg, m2)
    for name in models.PARAM_ORDER:
        expected = before[name] - cfg.learning_rate * grads[name]
        assert np.array_equal(m2.params[name].data, expected), name


def test_train_joint_alpha_zero_matches_task_only(toy_dataset):
    cfg = models.TrainConfig(alpha=0.0, batch_size=16, epochs=3, seed=2)
    a = small_models(seed=7)
    b = small_models(seed=7)
    models.train_joint(toy_dataset, cfg, a)
    models.train_task(toy_dataset, cfg, b)
    for name in models.PARAM_ORDER:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_train_joint_alpha_zero_extractor_gradient_matches_task_only(toy_dataset):
    m = small_models(seed=1)
    x = toy_dataset.trials[:8].astype(F64)
    y = toy_dataset.task_labels[:8]
    u = toy_dataset.user_labels[:8]

    task, user, _ = m.forward(x)
    joint = ad.add(
        ad.softmax_cross_entropy(task, y),
        ad.scale(ad.softmax_cross_entropy(user, u), 0.0),
    )
    g_joint = ad.grad(joint, [m.params["temporal_kernels"], m.params["spatial_mix"]])

    task2, _, _ = m.forward(x)
    g_task = ad.grad(
        ad.softmax_cross_entropy(task2, y),
        [m.params["temporal_kernels"], m.params["spatial_mix"]],
    )
    for a, b in zip(g_joint, g_task):
        assert np.array_equal(a, b)


def test_train_joint_reproducible(toy_dataset):
    cfg = models.TrainConfig(batch_size=16, epochs=3, seed=4)
    a = small_models(seed=4)
    b = small_models(seed=4)
    models.train_joint(toy_dataset, cfg, a)
    models.train_joint(toy_dataset, cfg, b)
    for name in models.PARAM_ORDER:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_train_joint_label_out_of_range(toy_dataset):
    m = small_models(n_users=2)  # dataset has 4 users
    cfg = models.TrainConfig(batch_size=16, epochs=1, seed=0)
    with pytest.raises(LabelError):
        models.train_joint(toy_dataset, cfg, m)


def test_train_joint_loss_decreases_over_windows():
    ds = data.synth_generate(
        data.SynthConfig(users=4, sessions=2, trials_per_user_per_session=16,
                         channels=4, samples=64, classes=2, seed=6)
    )
    cfg = models.TrainConfig(batch_size=32, epochs=30, seed=0)
    m = small_models(seed=0)
    _, losses, _ = models.train_joint(ds, cfg, m)
    for e in range(len(losses) - 10):
        assert losses[e + 10] <= losses[e] + 1e-9, f"loss increased over window at {e}"


# ---------------------------------------------------------------------------
# two-stage training
# ---------------------------------------------------------------------------

def test_two_stage_extractor_frozen_in_stage_two(toy_dataset):
    cfg = models.TrainConfig(batch_size=16, epochs=4, seed=3)
    snapshots = {}

    def grab(_epoch, m):
        snapshots["temporal"] = m.params["temporal_kernels"].data.copy()
        snapshots["spatial"] = m.params["spatial_mix"].data.copy()

    m, _, _ = models.train_two_stage(toy_dataset, cfg, models.CFG_A, hidden=16,
                                     stage1_hook=None, stage2_hook=grab)
    assert np.array_equal(m.params["temporal_kernels"].data, snapshots["temporal"])
    assert np.array_equal(m.params["spatial_mix"].data, snapshots["spatial"])


def test_two_stage_uia_strong_identity_and_shuffle_control():
    cfg_data = data.SynthConfig(users=8, sessions=2, trials_per_user_per_session=12,
                                channels=4, samples=64, classes=2,
                                identity_amplitude=1.5, seed=8)
    ds = data.synth_generate(cfg_data)
    train, test = data.split_loso(ds, 0)
    cfg = models.TrainConfig(batch_size=32, epochs=80, seed=0)
    m, _, _ = models.train_two_stage(train, cfg, models.CFG_A, hidden=32)
    preds = m.predict_user(test.trials.astype(F64))
    uia = counting_uia(preds, test.user_labels)
    assert uia >= 4.0 / 8.0, f"UIA {uia} below 4x chance"

    shuffled = ds.subset(np.arange(ds.n_trials))
    shuffled.user_labels = np.random.default_rng(0).permutation(shuffled.user_labels)
    tr2, te2 = data.split_loso(shuffled, 0)
    m2, _, _ = models.train_two_stage(tr2, cfg, models.CFG_A, hidden=32)
    uia2 = counting_uia(m2.predict_user(te2.trials.astype(F64)), te2.user_labels)
    assert uia2 <= 2.0 / 8.0, f"shuffle-control UIA {uia2} above 2x chance"


def test_with_new_user_head_preserves_extractor(toy_dataset):
    cfg = models.TrainConfig(batch_size=16, epochs=2, seed=1)
    m = small_models(seed=2)
    models.train_joint(toy_dataset, cfg, m)
    grown = m.with_new_user_head(9, seed=99)
    assert grown.n_users == 9
    assert grown.params["user_weight2"].data.shape == (m.hidden, 9)
    for name in models.TASK_PARAMS:
        assert np.array_equal(grown.params[name].data, m.params[name].data)
    # original untouched
    assert m.params["user_weight2"].data.shape == (m.hidden, 4)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy_dataset):
    cfg = models.TrainConfig(batch_size=16, epochs=2, seed=5)
    m = small_models(seed=6)
    models.train_joint(toy_dataset, cfg, m)
    path = tmp_path / "model.eegmodl"
    models.save_models(m, path)
    back = models.load_models(path)
    assert back.extractor == m.extractor
    assert (back.n_classes, back.n_users, back.hidden) == (m.n_classes, m.n_users, m.hidden)
    for name in models.PARAM_ORDER:
        np.testing.assert_allclose(
            back.params[name].data, m.params[name].data, rtol=0, atol=1e-6
        )
    # save -> load -> save is byte-stable (parameters are stored as f32)
    path2 = tmp_path / "model2.eegmodl"
    models.save_models(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.eegmodl"
    path.write_bytes(b"NOTMODEL" + b"\x00" * 32)
    with pytest.raises(FormatError):
        models.load_models(path)

    m = small_models()
    good = tmp_path / "good.eegmodl"
    models.save_models(m, good)
    raw = good.read_bytes()
    good.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(CorruptionError):
        models.load_models(good)
