"""Sample-wise identity-unlearnable perturbations.

One bounded delta per trial, produced by alternating rounds of surrogate
training on the perturbed data with projected sign-gradient updates of
every delta on the clean data.  The per-trial objective keeps the task
logits of the perturbed trial close to the clean ones (MSE) while making
the surrogate user head confidently predict the true user (CE), so that
downstream training latches onto the delta pattern instead of the real
identity signal.

Per-trial updates are independent, so they are vectorized over batches;
the gradient sign is unaffected by the batch-mean scaling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace as dc_replace

import numpy as np

from . import autodiff as ad
from .data import SAMPLE_WISE, PerturbationSet, apply_perturbation, quantize_deltas
from .errors import NumericalError, ParameterError
from .models import SurrogateModels, TrainConfig, train_joint

SHUFFLE_STREAMS = 3  # model init, delta init, training shuffles


@dataclass(frozen=True)
class SampleHyper:
    """Knobs of the alternating generation loop.

    ``model_epochs`` is the number of surrogate epochs per round and
    ``rounds`` the number of perturbation updates; reference values for
    the remaining fields are alpha 0.1, epsilon 0.01, eta 0.002,
    n_iter 5, model_epochs 5, rounds 30.
    """

    alpha: float = 0.1
    beta: float = 0.1
    epsilon: float = 0.01
    eta: float = 0.002
    n_iter: int = 5
    model_epochs: int = 5
    rounds: int = 30
    seed: int = 0
    batch_size: int = 64
    pgd_batch: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    hidden: int = 64
    warm_start: bool = True      # continue PGD from the current deltas each round
    reinit_models: bool = False  # ablation: fresh surrogates every round
    mse_on_probs: bool = False   # compare softmax outputs instead of raw logits

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if self.eta <= 0:
            raise ParameterError("eta must be > 0")
        if self.n_iter < 1 or self.model_epochs < 1 or self.rounds < 1:
            raise ParameterError("n_iter, model_epochs and rounds must be >= 1")


def _as_batch(x, delta, users):
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if delta.ndim == 2:
        delta = delta[None]
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    if x.shape != delta.shape or x.shape[0] != users.shape[0]:
        raise ParameterError(
            f"trials {x.shape}, deltas {delta.shape} and users {users.shape} disagree"
        )
    return x, delta, users


def perturbation_loss(x, delta, users, models, beta, mse_on_probs=False):
    """Eq.-style objective for one trial or a batch of independent trials.

    ``mse(task(x + delta), task(x)) + beta * ce(user(x + delta), u)``
    with the clean task logits detached.  ``delta`` may be a Tensor leaf
    (gradients flow to it) or a plain array.
    """
    delta_t = delta if isinstance(delta, ad.Tensor) else ad.constant(np.asarray(delta, dtype=np.float64))
    x, _, users = _as_batch(x, delta_t.data, users)
    with models.frozen():
        clean = models.task_logits_from(models.features(ad.Tensor(x)))
    clean = ad.constant(clean.data)
    perturbed = ad.add(ad.constant(x), delta_t)
    feats = models.features(perturbed)
    task_logits = models.task_logits_from(feats)
    user_logits = models.user_logits_from(feats)
    if mse_on_probs:
        task_term = ad.mse(ad.softmax_rows(task_logits), ad.softmax_rows(clean))
    else:
        task_term = ad.mse(task_logits, clean)
    return ad.add(task_term, ad.scale(ad.softmax_cross_entropy(user_logits, users), beta))


def _per_trial_losses(task_pert, clean, user_pert, users, beta, mse_on_probs):
    if mse_on_probs:
        def sm(z):
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        diff = sm(task_pert) - sm(clean)
    else:
        diff = task_pert - clean
    mse_i = (diff * diff).mean(axis=1)
    shifted = user_pert - user_pert.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce_i = -log_probs[np.arange(users.size), users]
    return mse_i + beta * ce_i


def _pgd_core(x, delta, users, models, hyper, index_offset=0, want_trace=False):
    """Projected sign-gradient iterations on a batch of independent trials.

    Returns (delta, per-iteration mean losses, optional per-trial trace).
    """
    x, delta, users = _as_batch(x, delta, users)
    if delta.size and float(np.max(np.abs(delta))) > hyper.epsilon:
        raise ParameterError("incoming deltas violate the epsilon bound")
    b = x.shape[0]
    mean_losses = []
    trace = []
    with models.frozen():
        clean = ad.constant(models.task_logits_from(models.features(ad.Tensor(x))).data)
        for _ in range(hyper.n_iter):
            leaf = ad.Tensor(delta, requires_grad=True)
            perturbed = ad.add(ad.constant(x), leaf)
            feats = models.features(perturbed)
            task_logits = models.task_logits_from(feats)
            user_logits = models.user_logits_from(feats)
            if hyper.mse_on_probs:
                task_term = ad.mse(ad.softmax_rows(task_logits), ad.softmax_rows(clean))
            else:
                task_term = ad.mse(task_logits, clean)
            loss = ad.add(
                task_term, ad.scale(ad.softmax_cross_entropy(user_logits, users), hyper.beta)
            )
            (g,) = ad.grad(loss, [leaf])
            bad = ~np.isfinite(g).reshape(b, -1).all(axis=1)
            if bad.any():
                ids = (np.flatnonzero(bad) + index_offset).tolist()
                raise NumericalError(f"non-finite perturbation gradient for trials {ids}")
            if want_trace:
                trace.append(
                    _per_trial_losses(
                        task_logits.data, clean.data, user_logits.data, users,
                        hyper.beta, hyper.mse_on_probs,
                    )
                )
            mean_losses.append(loss.item())
            delta = ad.project_linf(delta - hyper.eta * ad.sign(g), hyper.epsilon)
        if want_trace:
            leaf = ad.Tensor(delta)
            perturbed = ad.add(ad.constant(x), leaf)
            feats = models.features(perturbed)
            trace.append(
                _per_trial_losses(
                    models.task_logits_from(feats).data,
                    clean.data,
                    models.user_logits_from(feats).data,
                    users,
                    hyper.beta,
                    hyper.mse_on_probs,
                )
            )
    return delta, mean_losses, (np.stack(trace) if want_trace else None)


def pgd_update(x, delta_in, users, models, hyper, return_trace=False):
    """n_iter iterations of delta <- Proj(delta - eta * sign(grad)).

    Accepts a single (c, t) trial or a batch; the output satisfies
    ``max|delta| <= epsilon`` exactly.  With ``return_trace`` the
    per-trial loss at each iteration boundary is returned as well.
    """
    single = np.asarray(x).ndim == 2
    delta, _, trace = _pgd_core(x, delta_in, users, models, hyper, want_trace=return_trace)
    if single:
        delta = delta[0]
        trace = trace[:, 0] if trace is not None else None
    return (delta, trace) if return_trace else delta


def generate_sample_wise(dataset, extractor_cfg, hyper, round_hook=None):
    """Alternating generation loop over the whole dataset.

    Deltas start at Uniform(-epsilon, epsilon); each round trains the
    surrogates on the perturbed data for ``model_epochs`` epochs, then
    updates every delta by PGD against the clean trials.  Surrogates and
    optimizer state persist across rounds unless ``reinit_models`` is
    set.  ``round_hook(round_index, deltas)`` is called after each round.

    Returns ``(PerturbationSet, perturbed Dataset)``.
    """
    if dataset.n_trials == 0:
        raise ParameterError("cannot generate perturbations for an empty dataset")
    root = np.random.SeedSequence(hyper.seed)
    model_ss, delta_ss, shuffle_ss = root.spawn(SHUFFLE_STREAMS)
    model_seed = int(model_ss.generate_state(1)[0])
    delta_rng = np.random.default_rng(delta_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    n, c, t = dataset.trials.shape
    x_clean = np.asarray(dataset.trials, dtype=np.float64)
    delta = delta_rng.uniform(-hyper.epsilon, hyper.epsilon, size=(n, c, t))

    def build_models():
        return SurrogateModels(
            extractor_cfg,
            channels=c,
            samples=t,
            n_classes=dataset.n_classes,
            n_users=dataset.n_users,
            hidden=hyper.hidden,
            seed=model_seed,
        )

    train_cfg = TrainConfig(
        alpha=hyper.alpha,
        batch_size=hyper.batch_size,
        epochs=hyper.model_epochs,
        seed=hyper.seed,
        optimizer=hyper.optimizer,
        learning_rate=hyper.learning_rate,
    )
    surrogate = build_models()
    opt_state = None

    round_train_loss = []
    round_pgd_loss = []
    round_max_abs = []
    for round_index in range(hyper.rounds):
        if hyper.reinit_models and round_index > 0:
            surrogate = build_models()
            opt_state = None
        perturbed_ds = dc_replace(dataset, trials=x_clean + delta)
        surrogate, epoch_losses, opt_state = train_joint(
            perturbed_ds, train_cfg, surrogate, state=opt_state, rng=shuffle_rng
        )
        round_train_loss.append(float(np.mean(epoch_losses)))

        if not hyper.warm_start:
            delta = delta_rng.uniform(-hyper.epsilon, hyper.epsilon, size=(n, c, t))
        pgd_losses = []
        for start in range(0, n, hyper.pgd_batch):
            stop = min(start + hyper.pgd_batch, n)
            delta[start:stop], batch_losses, _ = _pgd_core(
                x_clean[start:stop],
                delta[start:stop],
                dataset.user_labels[start:stop],
                surrogate,
                hyper,
                index_offset=start,
            )
            pgd_losses.append((batch_losses[-1], stop - start))
        round_pgd_loss.append(
            float(sum(v * w for v, w in pgd_losses) / sum(w for _, w in pgd_losses))
        )
        round_max_abs.append(float(np.max(np.abs(delta))) if delta.size else 0.0)
        if round_hook is not None:
            round_hook(round_index, delta)

    quantized = quantize_deltas(delta, hyper.epsilon)
    provenance = {
        "mode": SAMPLE_WISE,
        "hyper": asdict(hyper),
        "extractor": extractor_cfg.name,
        "seed": hyper.seed,
        "round_train_loss": round_train_loss,
        "round_perturbation_loss": round_pgd_loss,
        "round_max_abs": round_max_abs,
    }
    pset = PerturbationSet(
        mode=SAMPLE_WISE, deltas=quantized, epsilon=hyper.epsilon, provenance=provenance
    )
    return pset, apply_perturbation(dataset, pset)
