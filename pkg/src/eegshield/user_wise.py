"""User-wise universal perturbation templates.

One (channels x samples) template per user, added to every trial of that
user.  Surrogates are trained once on the clean data; the templates are
then optimized by mini-batch gradient descent against frozen surrogates,
with an (unsquared) L2 norm penalty controlling their amplitude instead
of a hard bound.

``extend_user_wise`` supports the streaming scenario: templates for
previously protected users stay frozen while fresh templates are fitted
for newly arrived users, against surrogates trained on the union of the
already-perturbed data and the new clean data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import (
    USER_WISE,
    PerturbationSet,
    apply_perturbation,
    concat_datasets,
)
from .errors import NumericalError, ParameterError
from .models import OptimizerState, SurrogateModels, TrainConfig, optimizer_step, train_joint


@dataclass(frozen=True)
class UserHyper:
    """Knobs of the two-phase template generation.

    ``gamma=None`` resolves to the reference coupling 1e-6 / beta.
    ``model_epochs`` and ``pert_epochs`` both default to 150.
    """

    alpha: float = 0.1
    beta: float = 0.1
    gamma: float | None = None
    init_std: float = 0.001
    model_epochs: int = 150
    pert_epochs: int = 150
    seed: int = 0
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    pert_optimizer: str = "adam"
    pert_learning_rate: float = 1e-3
    hidden: int = 64

    def __post_init__(self):
        if self.gamma is not None and self.gamma < 0:
            raise ParameterError("gamma must be >= 0")
        if self.model_epochs < 1 or self.pert_epochs < 1:
            raise ParameterError("model_epochs and pert_epochs must be >= 1")
        if self.init_std < 0:
            raise ParameterError("init_std must be >= 0")

    @property
    def resolved_gamma(self):
        if self.gamma is not None:
            return float(self.gamma)
        if self.beta <= 0:
            raise ParameterError("gamma=None needs beta > 0 to resolve 1e-6/beta")
        return 1e-6 / self.beta


def user_loss(batch_x, batch_users, templates, models, beta, gamma, template_offset=0):
    """Batch mean of mse(task(x+d_u), task(x)) + beta*ce(user(x+d_u), u)
    + gamma*||d_u||_2, with clean task logits detached.

    ``templates`` is a Tensor of shape (U', c, t); ``template_offset``
    maps global user labels to template rows (used when only the newest
    users' templates are being optimized).
    """
    x = np.asarray(batch_x, dtype=np.float64)
    users = np.asarray(batch_users, dtype=np.int64)
    templates = templates if isinstance(templates, ad.Tensor) else ad.constant(templates)
    rows = users - template_offset
    with models.frozen():
        clean = ad.constant(models.task_logits_from(models.features(ad.Tensor(x))).data)
    perturbed = ad.add(ad.constant(x), ad.gather_rows(templates, rows))
    feats = models.features(perturbed)
    task_term = ad.mse(models.task_logits_from(feats), clean)
    ce_term = ad.softmax_cross_entropy(models.user_logits_from(feats), users)
    norm_term = ad.mean_of(ad.gather_rows(ad.row_l2_norms(templates), rows))
    return ad.add(ad.add(task_term, ad.scale(ce_term, beta)), ad.scale(norm_term, gamma))


def _optimize_templates(dataset, models, templates, hyper, gamma, template_offset=0, rng=None):
    """Mini-batch descent of the template objective against frozen models.

    Returns (templates array, per-epoch mean losses).
    """
    leaf = ad.Tensor(templates, requires_grad=True)
    params = {"templates": leaf}
    state = OptimizerState(kind=hyper.pert_optimizer, learning_rate=hyper.pert_learning_rate)
    if rng is None:
        rng = np.random.default_rng(hyper.seed)
    x_all = np.asarray(dataset.trials, dtype=np.float64)
    epoch_losses = []
    with models.frozen():
        for epoch in range(hyper.pert_epochs):
            order = rng.permutation(dataset.n_trials)
            total = 0.0
            for start in range(0, dataset.n_trials, hyper.batch_size):
                idx = order[start : start + hyper.batch_size]
                loss = user_loss(
                    x_all[idx],
                    dataset.user_labels[idx],
                    leaf,
                    models,
                    hyper.beta,
                    gamma,
                    template_offset=template_offset,
                )
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(
                        f"template loss became non-finite at epoch {epoch}"
                    )
                (g,) = ad.grad(loss, [leaf])
                optimizer_step(state, params, {"templates": g})
                total += value * idx.size
            epoch_losses.append(total / dataset.n_trials)
    return leaf.data, epoch_losses


def _spawn_seeds(seed):
    root = np.random.SeedSequence(seed)
    model_ss, delta_ss, pert_ss = root.spawn(3)
    return (
        int(model_ss.generate_state(1)[0]),
        np.random.default_rng(delta_ss),
        np.random.default_rng(pert_ss),
    )


def generate_user_wise(dataset, extractor_cfg, hyper):
    """Train surrogates on the clean data, then fit one template per user.

    Returns ``(PerturbationSet, perturbed Dataset)`` with exactly
    ``dataset.n_users`` templates.
    """
    if dataset.n_trials == 0:
        raise ParameterError("cannot generate templates for an empty dataset")
    model_seed, delta_rng, pert_rng = _spawn_seeds(hyper.seed)
    c, t = dataset.channels, dataset.samples
    gamma = hyper.resolved_gamma

    surrogate = SurrogateModels(
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
    surrogate, model_losses, _ = train_joint(dataset, train_cfg, surrogate)

    templates = delta_rng.normal(0.0, hyper.init_std, size=(dataset.n_users, c, t))
    templates, pert_losses = _optimize_templates(
        dataset, surrogate, templates, hyper, gamma, rng=pert_rng
    )

    final = templates.astype(np.float32)
    norms = np.linalg.norm(final.reshape(dataset.n_users, -1), axis=1)
    provenance = {
        "mode": USER_WISE,
        "hyper": asdict(hyper),
        "gamma_resolved": gamma,
        "extractor": extractor_cfg.name,
        "seed": hyper.seed,
        "model_epoch_loss": [float(v) for v in model_losses],
        "perturbation_epoch_loss": [float(v) for v in pert_losses],
        "template_l2_norms": [float(v) for v in norms],
    }
    pset = PerturbationSet(mode=USER_WISE, deltas=final, provenance=provenance)
    return pset, apply_perturbation(dataset, pset)


def extend_user_wise(prior_set, prior_data, new_data, extractor_cfg, hyper):
    """Fit templates for newly arrived users; existing templates frozen.

    ``prior_set`` holds templates for users ``0..U0-1`` and ``prior_data``
    their clean trials; ``new_data`` contains only trials of users
    ``U0..U0+U1-1`` (labels are global and must not overlap the existing
    template rows).  Surrogates are trained on the union of the
    previously perturbed data and the new clean data.

    Returns ``(merged PerturbationSet, perturbed union Dataset)``.
    """
    if prior_set.mode != USER_WISE:
        raise ParameterError("extend_user_wise needs a user-wise perturbation set")
    existing = prior_set.count
    if new_data.n_trials == 0:
        merged = PerturbationSet(
            mode=USER_WISE,
            deltas=prior_set.deltas.copy(),
            provenance=dict(prior_set.provenance),
        )
        return merged, apply_perturbation(prior_data, merged)

    present = np.unique(new_data.user_labels)
    if present.min() < existing:
        raise ParameterError(
            f"new user labels overlap existing template rows [0, {existing})"
        )
    expected = np.arange(existing, new_data.n_users)
    if not np.array_equal(present, expected):
        raise ParameterError(
            f"new users must densely cover [{existing}, {new_data.n_users}), got {present.tolist()}"
        )
    n_new = int(new_data.n_users - existing)

    model_seed, delta_rng, pert_rng = _spawn_seeds(hyper.seed)
    gamma = hyper.resolved_gamma
    prior_perturbed = apply_perturbation(prior_data, prior_set)
    union = concat_datasets(prior_perturbed, new_data)

    surrogate = SurrogateModels(
        extractor_cfg,
        channels=union.channels,
        samples=union.samples,
        n_classes=union.n_classes,
        n_users=union.n_users,
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
    surrogate, model_losses, _ = train_joint(union, train_cfg, surrogate)

    fresh = delta_rng.normal(
        0.0, hyper.init_std, size=(n_new, new_data.channels, new_data.samples)
    )
    fresh, pert_losses = _optimize_templates(
        new_data, surrogate, fresh, hyper, gamma, template_offset=existing, rng=pert_rng
    )

    merged_deltas = np.concatenate(
        [prior_set.deltas.astype(np.float32), fresh.astype(np.float32)], axis=0
    )
    provenance = {
        "mode": USER_WISE,
        "hyper": asdict(hyper),
        "gamma_resolved": gamma,
        "extractor": extractor_cfg.name,
        "seed": hyper.seed,
        "extended_from": existing,
        "model_epoch_loss": [float(v) for v in model_losses],
        "perturbation_epoch_loss": [float(v) for v in pert_losses],
        "template_l2_norms": [
            float(v) for v in np.linalg.norm(merged_deltas.reshape(len(merged_deltas), -1), axis=1)
        ],
    }
    merged = PerturbationSet(mode=USER_WISE, deltas=merged_deltas, provenance=provenance)
    clean_union = concat_datasets(prior_data, new_data)
    return merged, apply_perturbation(clean_union, merged)
