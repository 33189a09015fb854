"""Sample-wise perturbation generation: loss, PGD step, full loop."""

import math

import numpy as np
import pytest

from eegshield import autodiff as ad
from eegshield import data, models, sample_wise
from eegshield.errors import ParameterError

F64 = np.float64


def tiny_dataset(seed=0, n_users=4):
    return data.synth_generate(
        data.SynthConfig(
            users=n_users, sessions=2, trials_per_user_per_session=4,
            channels=2, samples=16, classes=2, seed=seed,
        )
    )


def tiny_models(seed=0, n_users=4):
    cfg = models.ExtractorConfig(
        temporal_filters=2, temporal_kernel=5, spatial_filters=2,
        activation="square", pool_window=4, pool_stride=2, name="tiny",
    )
    return models.SurrogateModels(cfg, channels=2, samples=16, n_classes=2,
                                  n_users=n_users, hidden=8, seed=seed)


def manual_forward(m, x):
    """Model forward rebuilt from plain numpy, independent of the engine."""
    w = m.params["temporal_kernels"].data.reshape(m.extractor.temporal_filters, -1)
    b, c, t = x.shape
    f, k = w.shape
    t1 = t - k + 1
    conv = np.zeros((b, c * f, t1))
    for i in range(b):
        for ci in range(c):
            for fi in range(f):
                for j in range(t1):
                    conv[i, ci * f + fi, j] = float(np.dot(x[i, ci, j : j + k], w[fi]))
    mixed = np.einsum("gc,bct->bgt", m.params["spatial_mix"].data, conv)
    act = mixed**2 if m.extractor.activation == "square" else np.maximum(mixed, 0)
    win, stride = m.extractor.pool_window, m.extractor.pool_stride
    t2 = (act.shape[2] - win) // stride + 1
    pooled = np.stack(
        [act[:, :, j * stride : j * stride + win].mean(axis=2) for j in range(t2)], axis=2
    )
    feats = pooled.reshape(b, -1)
    task = feats @ m.params["task_weight"].data + m.params["task_bias"].data
    h = np.maximum(feats @ m.params["user_weight1"].data + m.params["user_bias1"].data, 0)
    user = h @ m.params["user_weight2"].data + m.params["user_bias2"].data
    return task, user


def manual_ce(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-lp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------
# perturbation loss
# ---------------------------------------------------------------------------

def test_loss_zero_delta_reduces_to_user_ce():
    ds = tiny_dataset()
    m = tiny_models()
    x = ds.trials[:3].astype(F64)
    u = ds.user_labels[:3]
    loss = sample_wise.perturbation_loss(x, np.zeros_like(x), u, m, beta=0.7)
    with m.frozen():
        ce = ad.softmax_cross_entropy(m.user_logits_from(m.features(ad.Tensor(x))), u)
    assert loss.item() == 0.7 * ce.item()


def test_loss_zero_beta_and_delta_is_zero():
    ds = tiny_dataset()
    m = tiny_models()
    x = ds.trials[:2].astype(F64)
    loss = sample_wise.perturbation_loss(x, np.zeros_like(x), ds.user_labels[:2], m, beta=0.0)
    assert loss.item() == 0.0


def test_loss_matches_independent_recomputation():
    ds = tiny_dataset(seed=3)
    m = tiny_models(seed=5)
    rng = np.random.default_rng(1)
    x = ds.trials[:4].astype(F64)
    delta = rng.uniform(-0.05, 0.05, size=x.shape)
    u = ds.user_labels[:4]
    beta = 0.3
    got = sample_wise.perturbation_loss(x, delta, u, m, beta=beta).item()

    task_clean, _ = manual_forward(m, x)
    task_pert, user_pert = manual_forward(m, x + delta)
    want = float(np.mean((task_pert - task_clean) ** 2)) + beta * manual_ce(user_pert, u)
    assert abs(got - want) <= 1e-10


def test_loss_probs_mode_differs_and_matches_manual():
    ds = tiny_dataset(seed=4)
    m = tiny_models(seed=6)
    rng = np.random.default_rng(2)
    x = ds.trials[:3].astype(F64)
    delta = rng.uniform(-0.05, 0.05, size=x.shape)
    u = ds.user_labels[:3]
    logits_mode = sample_wise.perturbation_loss(x, delta, u, m, beta=0.0).item()
    probs_mode = sample_wise.perturbation_loss(x, delta, u, m, beta=0.0, mse_on_probs=True).item()
    assert probs_mode != logits_mode

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    task_clean, _ = manual_forward(m, x)
    task_pert, _ = manual_forward(m, x + delta)
    want = float(np.mean((softmax(task_pert) - softmax(task_clean)) ** 2))
    assert abs(probs_mode - want) <= 1e-10


# ---------------------------------------------------------------------------
# pgd_update
# ---------------------------------------------------------------------------

def test_pgd_zero_gradient_is_fixed_point():
    ds = tiny_dataset()
    m = tiny_models()
    for name in models.PARAM_ORDER:
        m.params[name].data = np.zeros_like(m.params[name].data)
    x = ds.trials[0].astype(F64)
    delta = np.random.default_rng(0).uniform(-0.01, 0.01, size=x.shape)
    hyper = sample_wise.SampleHyper(epsilon=0.01, eta=0.002, n_iter=3)
    out = sample_wise.pgd_update(x, delta, ds.user_labels[0], m, hyper)
    assert np.array_equal(out, delta)


def test_pgd_large_step_saturates_to_ball_surface():
    ds = tiny_dataset(seed=8)
    m = tiny_models(seed=9)
    x = ds.trials[:2].astype(F64)
    hyper = sample_wise.SampleHyper(epsilon=0.01, eta=0.05, n_iter=1)  # eta > 2*eps
    out = sample_wise.pgd_update(x, np.zeros_like(x), ds.user_labels[:2], m, hyper)

    delta_t = ad.Tensor(np.zeros_like(x), requires_grad=True)
    loss = sample_wise.perturbation_loss(x, delta_t, ds.user_labels[:2], m, beta=hyper.beta)
    (g,) = ad.grad(loss, [delta_t])
    nonzero = g != 0
    assert np.all(np.abs(out[nonzero]) == 0.01)
    assert np.all(out[~nonzero] == 0.0)


def test_pgd_single_iteration_matches_hand_computation():
    ds = tiny_dataset(seed=2)
    m = tiny_models(seed=3)
    x = ds.trials[0].astype(F64)  # one 2x16 trial
    u = ds.user_labels[0]
    rng = np.random.default_rng(5)
    delta0 = rng.uniform(-0.01, 0.01, size=x.shape)
    hyper = sample_wise.SampleHyper(epsilon=0.01, eta=0.002, n_iter=1, beta=0.2)

    delta_t = ad.Tensor(delta0[None], requires_grad=True)
    loss = sample_wise.perturbation_loss(x[None], delta_t, np.array([u]), m, beta=0.2)
    (g,) = ad.grad(loss, [delta_t])
    want = ad.project_linf(delta0 - 0.002 * np.sign(g[0]), 0.01)

    got = sample_wise.pgd_update(x, delta0, u, m, hyper)
    assert np.array_equal(got, want)


def test_pgd_output_respects_bound_exactly():
    ds = tiny_dataset(seed=6)
    m = tiny_models(seed=7)
    x = ds.trials[:5].astype(F64)
    hyper = sample_wise.SampleHyper(epsilon=0.004, eta=0.002, n_iter=4)
    out = sample_wise.pgd_update(x, np.zeros_like(x), ds.user_labels[:5], m, hyper)
    assert float(np.max(np.abs(out))) <= 0.004


def test_pgd_rejects_out_of_ball_input():
    ds = tiny_dataset()
    m = tiny_models()
    x = ds.trials[0].astype(F64)
    hyper = sample_wise.SampleHyper(epsilon=0.01, eta=0.002, n_iter=1)
    with pytest.raises(ParameterError):
        sample_wise.pgd_update(x, np.full_like(x, 0.05), ds.user_labels[0], m, hyper)


def test_pgd_loss_trace_mostly_non_increasing():
    ds = data.synth_generate(data.reference_config())
    hyper = sample_wise.SampleHyper(seed=0)
    m = models.SurrogateModels(models.CFG_A, 8, 128, 2, 8, hidden=64, seed=1)
    cfg = models.TrainConfig(alpha=hyper.alpha, epochs=5, seed=1)
    models.train_joint(ds, cfg, m)
    x = ds.trials[:256].astype(F64)
    delta0 = np.random.default_rng(3).uniform(-0.01, 0.01, size=x.shape)
    _, trace = sample_wise.pgd_update(
        x, delta0, ds.user_labels[:256], m, hyper, return_trace=True
    )
    # trace rows are iteration boundaries; compare final against initial loss
    improved = trace[-1] <= trace[0] + 1e-12
    assert improved.mean() >= 0.9, f"only {improved.mean():.2%} of trials improved"


# ---------------------------------------------------------------------------
# full generation loop
# ---------------------------------------------------------------------------

def test_generate_minimal_budget():
    ds = tiny_dataset().subset(np.arange(4))
    hyper = sample_wise.SampleHyper(
        epsilon=0.01, eta=0.002, n_iter=1, model_epochs=1, rounds=1,
        batch_size=4, seed=1,
    )
    cfg = models.ExtractorConfig(
        temporal_filters=2, temporal_kernel=5, spatial_filters=2,
        activation="square", pool_window=4, pool_stride=2, name="tiny",
    )
    pset, perturbed = sample_wise.generate_sample_wise(ds, cfg, hyper)
    assert pset.mode == data.SAMPLE_WISE
    assert pset.count == 4
    assert float(np.max(np.abs(pset.deltas))) <= 0.01
    assert perturbed.n_trials == 4


def test_generate_bound_holds_every_round_and_is_deterministic():
    ds = tiny_dataset(seed=11)
    cfg = models.ExtractorConfig(
        temporal_filters=2, temporal_kernel=5, spatial_filters=2,
        activation="square", pool_window=4, pool_stride=2, name="tiny",
    )
    hyper = sample_wise.SampleHyper(
        epsilon=0.01, eta=0.002, n_iter=2, model_epochs=1, rounds=3,
        batch_size=8, seed=42,
    )
    maxima = []
    pset1, pert1 = sample_wise.generate_sample_wise(
        ds, cfg, hyper, round_hook=lambda r, d: maxima.append(float(np.max(np.abs(d))))
    )
    assert len(maxima) == 3
    assert all(v <= 0.01 for v in maxima)
    assert pset1.provenance["round_max_abs"] == maxima

    pset2, pert2 = sample_wise.generate_sample_wise(ds, cfg, hyper)
    assert np.array_equal(pset1.deltas, pset2.deltas)
    assert np.array_equal(pert1.trials, pert2.trials)


def test_generate_does_not_mutate_and_differs_by_deltas():
    ds = tiny_dataset(seed=13)
    before = ds.trials.copy()
    cfg = models.ExtractorConfig(
        temporal_filters=2, temporal_kernel=5, spatial_filters=2,
        activation="square", pool_window=4, pool_stride=2, name="tiny",
    )
    hyper = sample_wise.SampleHyper(
        epsilon=0.01, eta=0.002, n_iter=2, model_epochs=1, rounds=2, batch_size=8, seed=5
    )
    pset, perturbed = sample_wise.generate_sample_wise(ds, cfg, hyper)
    assert np.array_equal(ds.trials, before)
    diff = perturbed.trials - ds.trials.astype(F64)
    assert np.array_equal(diff, pset.deltas.astype(F64))
    assert float(np.max(np.abs(diff))) <= 0.01


def test_generate_epsilon_zero_gives_clean_copy():
    ds = tiny_dataset(seed=17)
    cfg = models.ExtractorConfig(
        temporal_filters=2, temporal_kernel=5, spatial_filters=2,
        activation="square", pool_window=4, pool_stride=2, name="tiny",
    )
    hyper = sample_wise.SampleHyper(
        epsilon=0.0, eta=0.002, n_iter=1, model_epochs=1, rounds=2, batch_size=8, seed=5
    )
    pset, perturbed = sample_wise.generate_sample_wise(ds, cfg, hyper)
    assert np.array_equal(pset.deltas, np.zeros_like(pset.deltas))
    assert np.array_equal(np.asarray(perturbed.trials, dtype=np.float32), ds.trials)


def test_reference_hypers_are_table_defaults():
    h = sample_wise.SampleHyper()
    assert (h.alpha, h.epsilon, h.eta) == (0.1, 0.01, 0.002)
    assert (h.n_iter, h.model_epochs, h.rounds) == (5, 5, 30)


def test_hyper_validation():
    with pytest.raises(ParameterError):
        sample_wise.SampleHyper(epsilon=-0.1)
    with pytest.raises(ParameterError):
        sample_wise.SampleHyper(eta=0.0)
    with pytest.raises(ParameterError):
        sample_wise.SampleHyper(rounds=0)
