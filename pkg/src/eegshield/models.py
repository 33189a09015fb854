"""Surrogate models: shallow convolutional extractor plus task/user heads.

The extractor is a filter-bank style block: temporal convolution, learned
spatial mixing, elementwise activation, temporal mean pooling, flatten.
The task head is a single affine map; the user head is two affine maps
with a relu between.  Two named presets ("cfgA", "cfgB") differ in kernel
and pooling geometry so cross-architecture transfer can be exercised.

Training entry points:

* :func:`train_joint`  -- one optimizer over both heads with trade-off
  ``alpha`` weighting the user term (surrogate training for perturbation
  generation).
* :func:`train_two_stage` -- the evaluation-side protocol: fit extractor
  plus task head on task labels, then freeze the extractor and fit a
  fresh user head on the extracted features.
"""

from __future__ import annotations

import io
import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    CorruptionError,
    DimensionError,
    FormatError,
    LabelError,
    NumericalError,
    ParameterError,
)

CHECKPOINT_MAGIC = b"EEGMODL1"

PARAM_ORDER = (
    "temporal_kernels",
    "spatial_mix",
    "task_weight",
    "task_bias",
    "user_weight1",
    "user_bias1",
    "user_weight2",
    "user_bias2",
)

EXTRACTOR_PARAMS = ("temporal_kernels", "spatial_mix")
TASK_PARAMS = ("temporal_kernels", "spatial_mix", "task_weight", "task_bias")
USER_PARAMS = ("user_weight1", "user_bias1", "user_weight2", "user_bias2")


@dataclass(frozen=True)
class ExtractorConfig:
    temporal_filters: int = 8
    temporal_kernel: int = 13
    spatial_filters: int = 8
    activation: str = "square"
    pool_window: int = 8
    pool_stride: int = 4
    name: str = "custom"

    def __post_init__(self):
        for attr in ("temporal_filters", "temporal_kernel", "spatial_filters", "pool_window", "pool_stride"):
            if getattr(self, attr) < 1:
                raise ParameterError(f"{attr} must be >= 1")
        if self.activation not in ad.ACTIVATION_KINDS:
            raise ParameterError(f"activation must be one of {ad.ACTIVATION_KINDS}")

    def conv_out_len(self, samples):
        if self.temporal_kernel > samples:
            raise DimensionError(
                f"temporal kernel {self.temporal_kernel} exceeds trial length {samples}"
            )
        return samples - self.temporal_kernel + 1

    def pooled_len(self, samples):
        t1 = self.conv_out_len(samples)
        if self.pool_window > t1:
            raise DimensionError(
                f"pool window {self.pool_window} exceeds filtered length {t1}"
            )
        return (t1 - self.pool_window) // self.pool_stride + 1

    def feature_dim(self, channels, samples):
        return self.spatial_filters * self.pooled_len(samples)


CFG_A = ExtractorConfig(name="cfgA")
CFG_B = ExtractorConfig(
    temporal_filters=4,
    temporal_kernel=25,
    spatial_filters=16,
    activation="elu",
    pool_window=16,
    pool_stride=8,
    name="cfgB",
)
EXTRACTOR_PRESETS = {"cfgA": CFG_A, "cfgB": CFG_B}


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SurrogateModels:
    """Extractor F, task head C and user head D with shared features."""

    def __init__(self, extractor, channels, samples, n_classes, n_users, hidden=64, seed=0, dtype=np.float64):
        self.extractor = extractor
        self.channels = int(channels)
        self.samples = int(samples)
        self.n_classes = int(n_classes)
        self.n_users = int(n_users)
        self.hidden = int(hidden)
        self.dtype = np.dtype(dtype)
        self.feature_dim = extractor.feature_dim(channels, samples)
        self.params = {}
        self._init_extractor_and_task(np.random.default_rng(seed))
        self._init_user_head(np.random.default_rng(seed + 1))

    def _add_param(self, name, arr):
        self.params[name] = ad.Tensor(arr.astype(self.dtype), requires_grad=True)

    def _init_extractor_and_task(self, rng):
        cfg = self.extractor
        f, k = cfg.temporal_filters, cfg.temporal_kernel
        mixed_in = self.channels * f
        self._add_param("temporal_kernels", _uniform_init(rng, (f, 1, k), k))
        self._add_param("spatial_mix", _uniform_init(rng, (cfg.spatial_filters, mixed_in), mixed_in))
        self._add_param("task_weight", _uniform_init(rng, (self.feature_dim, self.n_classes), self.feature_dim))
        self._add_param("task_bias", _uniform_init(rng, (self.n_classes,), self.feature_dim))

    def _init_user_head(self, rng):
        self._add_param("user_weight1", _uniform_init(rng, (self.feature_dim, self.hidden), self.feature_dim))
        self._add_param("user_bias1", _uniform_init(rng, (self.hidden,), self.feature_dim))
        self._add_param("user_weight2", _uniform_init(rng, (self.hidden, self.n_users), self.hidden))
        self._add_param("user_bias2", _uniform_init(rng, (self.n_users,), self.hidden))

    # -- forward pieces ----------------------------------------------------

    def features(self, x):
        x = ad.as_tensor(x)
        if x.data.ndim != 3 or x.data.shape[1] != self.channels or x.data.shape[2] != self.samples:
            raise DimensionError(
                f"batch shape {x.data.shape} does not match (b, {self.channels}, {self.samples})"
            )
        h = ad.conv_temporal(x, self.params["temporal_kernels"], stride=1)
        h = ad.conv_spatial(h, self.params["spatial_mix"])
        h = ad.activation(h, self.extractor.activation)
        h = ad.mean_pool_time(h, self.extractor.pool_window, self.extractor.pool_stride)
        return ad.flatten_trailing(h)

    def task_logits_from(self, feats):
        return ad.add(ad.matmul(feats, self.params["task_weight"]), self.params["task_bias"])

    def user_logits_from(self, feats):
        h = ad.add(ad.matmul(feats, self.params["user_weight1"]), self.params["user_bias1"])
        h = ad.activation(h, "relu")
        return ad.add(ad.matmul(h, self.params["user_weight2"]), self.params["user_bias2"])

    def forward(self, x):
        feats = self.features(x)
        return self.task_logits_from(feats), self.user_logits_from(feats), feats

    # -- gradient plumbing ---------------------------------------------------

    @contextmanager
    def frozen(self):
        """Temporarily stop gradients flowing into any parameter."""
        flags = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = flags[name]

    def trainable(self, names=None):
        names = PARAM_ORDER if names is None else names
        return {name: self.params[name] for name in names}

    # -- prediction ----------------------------------------------------------

    def _batched(self, x, fn, chunk=256):
        x = np.asarray(x, dtype=self.dtype)
        outs = []
        with self.frozen():
            for start in range(0, x.shape[0], chunk):
                feats = self.features(x[start : start + chunk])
                outs.append(fn(feats).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0,))

    def predict_task(self, x):
        return self._batched(x, self.task_logits_from).argmax(axis=1)

    def predict_user(self, x):
        return self._batched(x, self.user_logits_from).argmax(axis=1)

    def features_array(self, x):
        return self._batched(x, lambda f: f)

    def predict_task_from_features(self, feats):
        with self.frozen():
            return self.task_logits_from(ad.Tensor(feats)).data.argmax(axis=1)

    def predict_user_from_features(self, feats):
        with self.frozen():
            return self.user_logits_from(ad.Tensor(feats)).data.argmax(axis=1)

    # -- structural helpers ----------------------------------------------------

    def clone(self):
        out = object.__new__(SurrogateModels)
        out.extractor = self.extractor
        out.channels, out.samples = self.channels, self.samples
        out.n_classes, out.n_users = self.n_classes, self.n_users
        out.hidden, out.dtype = self.hidden, self.dtype
        out.feature_dim = self.feature_dim
        out.params = {
            name: ad.Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return out

    def with_new_user_head(self, n_users, seed):
        """Fresh user head for a new user count; extractor and task head kept."""
        out = self.clone()
        out.n_users = int(n_users)
        out._init_user_head(np.random.default_rng(seed))
        return out

    def reset_user_head(self, seed):
        self._init_user_head(np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be > 0")


def optimizer_step(state, params, grads):
    """Apply one update in place; returns (params, state).

    sgd: p <- p - lr * g.  adam: standard bias-corrected moments.  The
    step counter advances even when all gradients are zero.
    """
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if state.kind == "sgd":
            p.data = p.data - state.learning_rate * g
        else:
            m = state.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
            v = state.v[name]
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - state.beta1**state.step)
            v_hat = v / (1.0 - state.beta2**state.step)
            p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    batch_size: int = 64
    epochs: int = 150
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


def _check_labels(dataset, models):
    if dataset.n_trials == 0:
        raise ParameterError("cannot train on an empty dataset")
    if dataset.task_labels.max() >= models.n_classes:
        raise LabelError("task label outside the model's class range")
    if dataset.user_labels.max() >= models.n_users:
        raise LabelError("user label outside the model's user range")


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_joint(dataset, cfg, models, state=None, rng=None, epochs=None, on_epoch=None):
    """Minimize task CE plus ``alpha`` times user CE over both heads.

    Returns ``(models, per-epoch mean losses, optimizer state)``.  Pass
    ``state``/``rng`` back in to continue training deterministically.
    """
    _check_labels(dataset, models)
    if state is None:
        state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    x_all = np.asarray(dataset.trials, dtype=models.dtype)
    params = models.trainable()
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _epoch_batches(dataset.n_trials, cfg.batch_size, rng):
            task_logits, user_logits, _ = models.forward(x_all[idx])
            loss = ad.add(
                ad.softmax_cross_entropy(task_logits, dataset.task_labels[idx]),
                ad.scale(
                    ad.softmax_cross_entropy(user_logits, dataset.user_labels[idx]),
                    cfg.alpha,
                ),
            )
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"joint training loss became non-finite at epoch {epoch}")
            gs = ad.grad(loss, list(params.values()))
            optimizer_step(state, params, dict(zip(params.keys(), gs)))
            total += value * idx.size
        losses.append(total / dataset.n_trials)
        if on_epoch is not None:
            on_epoch(epoch, models)
    return models, losses, state


def train_task(dataset, cfg, models, state=None, rng=None, epochs=None, on_epoch=None):
    """Task-only training of extractor + task head (evaluation stage 1)."""
    _check_labels(dataset, models)
    if state is None:
        state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    x_all = np.asarray(dataset.trials, dtype=models.dtype)
    params = models.trainable(TASK_PARAMS)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _epoch_batches(dataset.n_trials, cfg.batch_size, rng):
            task_logits, _, _ = models.forward(x_all[idx])
            loss = ad.softmax_cross_entropy(task_logits, dataset.task_labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"task training loss became non-finite at epoch {epoch}")
            gs = ad.grad(loss, list(params.values()))
            optimizer_step(state, params, dict(zip(params.keys(), gs)))
            total += value * idx.size
        losses.append(total / dataset.n_trials)
        if on_epoch is not None:
            on_epoch(epoch, models)
    return models, losses, state


def train_user_head_on_features(features, user_labels, cfg, models, epochs=None, on_epoch=None):
    """Stage 2: optimize only the user head on fixed feature vectors."""
    if features.shape[0] != len(user_labels):
        raise DimensionError("features and labels disagree in length")
    state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    epochs = cfg.epochs if epochs is None else epochs
    params = models.trainable(USER_PARAMS)
    feats = np.asarray(features, dtype=models.dtype)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _epoch_batches(feats.shape[0], cfg.batch_size, rng):
            logits = models.user_logits_from(ad.Tensor(feats[idx]))
            loss = ad.softmax_cross_entropy(logits, user_labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"user-head loss became non-finite at epoch {epoch}")
            gs = ad.grad(loss, list(params.values()))
            optimizer_step(state, params, dict(zip(params.keys(), gs)))
            total += value * idx.size
        losses.append(total / feats.shape[0])
        if on_epoch is not None:
            on_epoch(epoch, models)
    return models, losses


def train_two_stage(dataset, cfg, extractor, hidden=64, stage1_hook=None, stage2_hook=None):
    """Evaluation-side protocol: task training, then a fresh user head on
    frozen task features.

    Returns ``(models, stage1 losses, stage2 losses)``; the extractor is
    bit-identical across stage 2.
    """
    models = SurrogateModels(
        extractor,
        channels=dataset.channels,
        samples=dataset.samples,
        n_classes=dataset.n_classes,
        n_users=dataset.n_users,
        hidden=hidden,
        seed=cfg.seed,
    )
    models, stage1_losses, _ = train_task(dataset, cfg, models, on_epoch=stage1_hook)
    models.reset_user_head(cfg.seed + 1)
    feats = models.features_array(np.asarray(dataset.trials, dtype=models.dtype))
    models, stage2_losses = train_user_head_on_features(
        feats, dataset.user_labels, cfg, models, on_epoch=stage2_hook
    )
    return models, stage1_losses, stage2_losses


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_models(models, path):
    """Write magic, a length-prefixed JSON config blob, then parameters in
    declaration order as little-endian float32 with u32 shape headers."""
    cfg = {
        "extractor": asdict(models.extractor),
        "channels": models.channels,
        "samples": models.samples,
        "n_classes": models.n_classes,
        "n_users": models.n_users,
        "hidden": models.hidden,
    }
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    for name in PARAM_ORDER:
        arr = models.params[name].data
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_models(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic; not a model checkpoint")
    buf = io.BytesIO(raw)
    buf.seek(len(CHECKPOINT_MAGIC))
    (blob_len,) = struct.unpack("<I", _read_or_corrupt(buf, 4))
    cfg = json.loads(_read_or_corrupt(buf, blob_len).decode("utf-8"))
    extractor = ExtractorConfig(**cfg["extractor"])
    models = SurrogateModels(
        extractor,
        channels=cfg["channels"],
        samples=cfg["samples"],
        n_classes=cfg["n_classes"],
        n_users=cfg["n_users"],
        hidden=cfg["hidden"],
        seed=0,
    )
    for name in PARAM_ORDER:
        (ndim,) = struct.unpack("<I", _read_or_corrupt(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read_or_corrupt(buf, 4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        flat = np.frombuffer(_read_or_corrupt(buf, 4 * count), dtype="<f4")
        expected = models.params[name].data.shape
        if tuple(shape) != expected:
            raise CorruptionError(f"checkpoint shape {shape} != expected {expected} for {name}")
        models.params[name].data = flat.reshape(shape).astype(models.dtype)
    if buf.read(1):
        raise CorruptionError("trailing bytes after checkpoint payload")
    return models


def _read_or_corrupt(buf, n):
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CorruptionError("truncated checkpoint")
    return chunk
