"""Metrics and experiment harness.

Balanced classification accuracy (mean of per-class recalls) scores the
task head; plain accuracy scores user identification.  The main harness
runs leave-one-session-out evaluation: the held-in session trains a
two-stage model (task extractor, then a fresh user head on frozen
features), the remaining sessions test.  Test trials always come from
the clean dataset; when a perturbed dataset is supplied it only replaces
the training side, matching the deployment story where perturbations are
applied to released data and new recordings are unprotected.

Folds and repeats are independent; ``threads > 1`` evaluates folds in a
pool with results reduced in fold order, so reports are identical to the
sequential run.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from . import user_wise as uw
from .data import apply_perturbation, concat_datasets, loso_indices, split_loso
from .errors import ParameterError, ProtocolError
from .models import SurrogateModels, train_two_stage

TRAIN_SPLIT = "train"
TEST_SPLIT = "test"


def bca(predictions, labels, n_classes):
    """Mean per-class recall; classes absent from ``labels`` are skipped."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ParameterError("predictions and labels must be equal-length and non-empty")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ParameterError(f"labels outside [0, {n_classes})")
    recalls = []
    for k in range(n_classes):
        mask = labels == k
        if mask.any():
            recalls.append(float(np.mean(predictions[mask] == k)))
    return float(np.mean(recalls))


def uia(predictions, users):
    """Plain accuracy over user-identity labels."""
    predictions = np.asarray(predictions)
    users = np.asarray(users)
    if predictions.size == 0 or predictions.shape != users.shape:
        raise ParameterError("predictions and users must be equal-length and non-empty")
    return float(np.mean(predictions == users))


@dataclass
class FoldResult:
    held_session: int
    repeat: int
    seed: int
    bca: float
    uia: float
    curves: dict = field(default_factory=dict)  # metric/split -> per-epoch values

    def to_dict(self):
        return {
            "session": self.held_session,
            "repeat": self.repeat,
            "seed": self.seed,
            "bca": self.bca,
            "uia": self.uia,
        }


@dataclass
class ExperimentReport:
    condition: str
    extractor_cfg: str
    train_cfg: dict
    folds: list
    eval_cfg: str | None = None
    reduction_vs_clean: dict | None = None

    @property
    def aggregate(self):
        b = np.array([f.bca for f in self.folds])
        u = np.array([f.uia for f in self.folds])
        return {
            "bca_mean": float(b.mean()),
            "bca_std": float(b.std()),
            "uia_mean": float(u.mean()),
            "uia_std": float(u.std()),
        }

    def to_dict(self):
        out = {
            "condition": self.condition,
            "extractor_cfg": self.extractor_cfg,
            "hyper": self.train_cfg,
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate,
        }
        if self.eval_cfg is not None:
            out["eval_cfg"] = self.eval_cfg
        if self.reduction_vs_clean is not None:
            out["reduction_vs_clean"] = self.reduction_vs_clean
        return out


def paired_reduction(clean_report, other_report):
    """Mean metric reductions of ``other`` against a clean baseline."""
    if len(clean_report.folds) != len(other_report.folds):
        raise ParameterError("paired reduction requires matching fold structure")
    ca, oa = clean_report.aggregate, other_report.aggregate
    return {
        "bca": ca["bca_mean"] - oa["bca_mean"],
        "uia": ca["uia_mean"] - oa["uia_mean"],
    }


def _check_paired(clean, perturbed):
    if perturbed is None:
        return
    same = (
        perturbed.n_trials == clean.n_trials
        and perturbed.trials.shape == clean.trials.shape
        and np.array_equal(perturbed.task_labels, clean.task_labels)
        and np.array_equal(perturbed.user_labels, clean.user_labels)
        and np.array_equal(perturbed.session_labels, clean.session_labels)
    )
    if not same:
        raise ParameterError("perturbed dataset must mirror the clean dataset's labels and shape")


def _run_fold(clean, perturbed, extractor_cfg, train_cfg, held, repeat, record_curves):
    seed = train_cfg.seed + repeat
    fold_cfg = dc_replace(train_cfg, seed=seed)

    train_idx, test_idx = loso_indices(clean, held)
    assert not np.intersect1d(train_idx, test_idx).size
    assert train_idx.size + test_idx.size == clean.n_trials

    source = perturbed if perturbed is not None else clean
    train_ds, _ = split_loso(source, held)
    _, test_ds = split_loso(clean, held)

    x_test = np.asarray(test_ds.trials, dtype=np.float64)
    x_train = np.asarray(train_ds.trials, dtype=np.float64)

    curves = {
        "train_bca": [], "test_bca": [], "train_uia": [], "test_uia": [],
    } if record_curves else None
    cache = {}

    def stage1_hook(epoch, m):
        curves["train_bca"].append(bca(m.predict_task(x_train), train_ds.task_labels, clean.n_classes))
        curves["test_bca"].append(bca(m.predict_task(x_test), test_ds.task_labels, clean.n_classes))

    def stage2_hook(epoch, m):
        if "train_feats" not in cache:
            cache["train_feats"] = m.features_array(x_train)
            cache["test_feats"] = m.features_array(x_test)
        curves["train_uia"].append(
            uia(m.predict_user_from_features(cache["train_feats"]), train_ds.user_labels)
        )
        curves["test_uia"].append(
            uia(m.predict_user_from_features(cache["test_feats"]), test_ds.user_labels)
        )

    trained, _, _ = train_two_stage(
        train_ds,
        fold_cfg,
        extractor_cfg,
        stage1_hook=stage1_hook if record_curves else None,
        stage2_hook=stage2_hook if record_curves else None,
    )
    fold_bca = bca(trained.predict_task(x_test), test_ds.task_labels, clean.n_classes)
    fold_uia = uia(trained.predict_user(x_test), test_ds.user_labels)
    return FoldResult(
        held_session=held,
        repeat=repeat,
        seed=seed,
        bca=fold_bca,
        uia=fold_uia,
        curves=curves or {},
    )


def run_loso(clean, perturbed, extractor_cfg, train_cfg, repeats=5, condition=None,
             record_curves=True, threads=1):
    """Leave-one-session-out cross-validation with repeated seeds.

    Trains on each held-in session of ``perturbed`` (or ``clean`` when no
    perturbed dataset is given) and always tests on the clean remaining
    sessions.  Returns an :class:`ExperimentReport` with S x repeats folds.
    """
    if clean.n_sessions < 2:
        raise ProtocolError(
            "leave-one-session-out needs >= 2 sessions; use split_by_index first"
        )
    _check_paired(clean, perturbed)
    if condition is None:
        condition = "clean" if perturbed is None else "perturbed"
    tasks = [
        (held, repeat)
        for held in range(clean.n_sessions)
        for repeat in range(repeats)
    ]

    def job(args):
        held, repeat = args
        return _run_fold(clean, perturbed, extractor_cfg, train_cfg, held, repeat, record_curves)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(job, tasks))
    else:
        folds = [job(t) for t in tasks]
    return ExperimentReport(
        condition=condition,
        extractor_cfg=extractor_cfg.name,
        train_cfg={
            "alpha": train_cfg.alpha,
            "batch_size": train_cfg.batch_size,
            "epochs": train_cfg.epochs,
            "seed": train_cfg.seed,
            "optimizer": train_cfg.optimizer,
            "learning_rate": train_cfg.learning_rate,
            "repeats": repeats,
        },
        folds=folds,
    )


def run_transfer(clean, perturbed, craft_cfg, eval_cfg, train_cfg, repeats=5,
                 record_curves=True, threads=1):
    """Same protocol as :func:`run_loso`, but the evaluation models use a
    different extractor than the one the perturbations were crafted with."""
    report = run_loso(
        clean, perturbed, eval_cfg, train_cfg, repeats=repeats,
        condition="transfer", record_curves=record_curves, threads=threads,
    )
    report.extractor_cfg = craft_cfg.name
    report.eval_cfg = eval_cfg.name
    return report


# ---------------------------------------------------------------------------
# online scenario
# ---------------------------------------------------------------------------

@dataclass
class OnlineStep:
    step: int
    users_total: int
    chance: float
    uia_clean: float
    uia_clean_existing: float
    uia_clean_new: float
    uia_perturbed: float
    uia_perturbed_existing: float
    uia_perturbed_new: float

    def to_dict(self):
        return self.__dict__.copy()


@dataclass
class OnlineReport:
    extractor_cfg: str
    hyper: dict
    steps: list

    def to_dict(self):
        return {
            "extractor_cfg": self.extractor_cfg,
            "hyper": self.hyper,
            "steps": [s.to_dict() for s in self.steps],
        }


def _uia_on(models_, test_ds, mask=None):
    preds = models_.predict_user(np.asarray(test_ds.trials, dtype=np.float64))
    if mask is None:
        return uia(preds, test_ds.user_labels)
    if not mask.any():
        return float("nan")
    return uia(preds[mask], test_ds.user_labels[mask])


def run_online(stream, extractor_cfg, gen_hyper, train_cfg, train_session=0):
    """Simulate sequential user arrival with user-wise protection.

    ``stream`` is a list of datasets with globally unique, densely
    increasing user ids.  At each step the newest batch's templates are
    fitted (existing ones frozen), evaluation models are retrained on the
    accumulated data (training session only), and user identification is
    measured on the clean held-out sessions, split into existing and new
    users.  Both the perturbed and the clean training conditions are
    recorded.
    """
    if not stream:
        raise ParameterError("online stream must contain at least one batch")
    seen = set()
    for batch in stream:
        ids = set(batch.user_labels.tolist())
        if ids & seen:
            raise ParameterError("duplicate user ids across stream batches")
        seen |= ids

    steps = []
    clean_so_far = None
    pset = None
    for step, batch in enumerate(stream):
        if step == 0:
            pset, _ = uw.generate_user_wise(batch, extractor_cfg, gen_hyper)
            clean_so_far = batch
        else:
            pset, _ = uw.extend_user_wise(pset, clean_so_far, batch, extractor_cfg, gen_hyper)
            clean_so_far = concat_datasets(clean_so_far, batch)
        perturbed_so_far = apply_perturbation(clean_so_far, pset)
        first_new_user = clean_so_far.n_users - len(set(batch.user_labels.tolist()))

        results = {}
        for condition, source in (("clean", clean_so_far), ("perturbed", perturbed_so_far)):
            train_ds, _ = split_loso(source, train_session)
            _, test_ds = split_loso(clean_so_far, train_session)
            trained, _, _ = train_two_stage(train_ds, train_cfg, extractor_cfg)
            new_mask = test_ds.user_labels >= first_new_user
            results[condition] = (
                _uia_on(trained, test_ds),
                _uia_on(trained, test_ds, ~new_mask) if step > 0 else _uia_on(trained, test_ds),
                _uia_on(trained, test_ds, new_mask),
            )
        steps.append(
            OnlineStep(
                step=step,
                users_total=clean_so_far.n_users,
                chance=1.0 / clean_so_far.n_users,
                uia_clean=results["clean"][0],
                uia_clean_existing=results["clean"][1],
                uia_clean_new=results["clean"][2],
                uia_perturbed=results["perturbed"][0],
                uia_perturbed_existing=results["perturbed"][1],
                uia_perturbed_new=results["perturbed"][2],
            )
        )
    hyper_dict = {
        "beta": gen_hyper.beta,
        "gamma": gen_hyper.resolved_gamma,
        "model_epochs": gen_hyper.model_epochs,
        "pert_epochs": gen_hyper.pert_epochs,
        "seed": gen_hyper.seed,
    }
    return OnlineReport(extractor_cfg=extractor_cfg.name, hyper=hyper_dict, steps=steps)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_report(report, outdir):
    """Emit report.json and curves.csv with a deterministic layout."""
    os.makedirs(outdir, exist_ok=True)
    report_path = os.path.join(outdir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")

    curves_path = os.path.join(outdir, "curves.csv")
    with open(curves_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "fold", "repeat", "split", "metric", "value"])
        if isinstance(report, OnlineReport):
            for s in report.steps:
                for metric, value in (
                    ("uia_clean", s.uia_clean),
                    ("uia_clean_existing", s.uia_clean_existing),
                    ("uia_clean_new", s.uia_clean_new),
                    ("uia_perturbed", s.uia_perturbed),
                    ("uia_perturbed_existing", s.uia_perturbed_existing),
                    ("uia_perturbed_new", s.uia_perturbed_new),
                ):
                    writer.writerow([s.step, s.step, 0, TEST_SPLIT, metric, repr(value)])
        else:
            for fold in report.folds:
                for key, values in fold.curves.items():
                    split, metric = (
                        (TRAIN_SPLIT, key[len("train_"):]) if key.startswith("train_")
                        else (TEST_SPLIT, key[len("test_"):])
                    )
                    for step, value in enumerate(values):
                        writer.writerow(
                            [step, fold.held_session, fold.repeat, split, metric, repr(value)]
                        )
    return report_path, curves_path


def read_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
