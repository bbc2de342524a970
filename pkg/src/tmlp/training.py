"""Multi-tail objectives, learning-rate schedules, the training loop and head probing."""

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, TrainingError
from .model import Architecture, ModelParams, backward, forward, init_siren
from .numerics import AdamState, adam_step, batched_affine

log = logging.getLogger(__name__)

L1_SDF = "l1_sdf"
L2_IMAGE = "l2_image"
LOSS_KINDS = (L1_SDF, L2_IMAGE)

SDF_WEIGHTS = (0.0, 0.5, 0.5, 0.5, 2.5)
IMAGE_WEIGHTS = (0.0, 0.0, 1.0, 1.0, 1.0)
SDF_SCHEDULE = ((7000, 0.25), (8000, 0.25), (9000, 0.25))


@dataclass(frozen=True)
class LossWeights:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ConfigError("loss weights must not be empty")
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise ConfigError(f"loss weights must be finite and >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = None
    initial_lr: float = 3e-4
    schedule: tuple = ()
    loss_kind: str = L2_IMAGE
    weights: LossWeights = field(default_factory=lambda: LossWeights(IMAGE_WEIGHTS))
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not isinstance(self.weights, LossWeights):
            object.__setattr__(self, "weights", LossWeights(tuple(self.weights)))
        sched = tuple((int(s), float(m)) for s, m in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be > 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        steps = [s for s, _ in sched]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"schedule steps must be strictly increasing, got {steps}")
        if any(not 0 < m <= 1 for _, m in sched):
            raise ConfigError("schedule multipliers must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def sdf_train_config(**overrides):
    base = TrainConfig(
        iterations=10_000,
        batch_size=100_000,
        initial_lr=3e-4,
        schedule=SDF_SCHEDULE,
        loss_kind=L1_SDF,
        weights=LossWeights(SDF_WEIGHTS),
    )
    return replace(base, **overrides)


def image_train_config(**overrides):
    base = TrainConfig(
        iterations=10_000,
        initial_lr=3e-4,
        loss_kind=L2_IMAGE,
        weights=LossWeights(IMAGE_WEIGHTS),
    )
    return replace(base, **overrides)


def lr_at(config, step):
    lr = config.initial_lr
    for s, mult in config.schedule:
        if s <= step:
            lr *= mult
    return lr


class LossResult(NamedTuple):
    total: float
    grads: list
    per_tail: list


def total_loss(tails, gt, weights, kind):
    """Weighted sum of per-level losses and the gradient w.r.t. each ``y_i``.

    ``tails`` is a :class:`TailOutputs` or a plain list of outputs. Each level's
    loss is a mean over samples and output channels.
    """
    ys = tails.y if hasattr(tails, "y") else list(tails)
    lam = weights.values if isinstance(weights, LossWeights) else tuple(weights)
    if len(lam) != len(ys):
        raise ConfigError(f"{len(lam)} loss weights for {len(ys)} outputs")
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    gt = np.asarray(gt)
    grads, per_tail = [], []
    total = 0.0
    for y, w in zip(ys, lam):
        if y.shape != gt.shape:
            raise ConfigError(f"output batch {y.shape} does not match targets {gt.shape}")
        diff = y - gt.astype(y.dtype, copy=False)
        if kind == L1_SDF:
            loss = float(np.mean(np.abs(diff), dtype=np.float64))
            g = np.sign(diff) if w else None
        else:
            loss = float(np.mean(np.square(diff), dtype=np.float64))
            g = 2.0 * diff if w else None
        if g is None:
            g = np.zeros_like(diff)
        else:
            g *= y.dtype.type(w / diff.size)
        per_tail.append(loss)
        grads.append(g)
        total += w * loss
    return LossResult(total, grads, per_tail)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    tail_losses: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def record(self, step, lr, per_tail, total):
        self.steps.append(step)
        self.lrs.append(lr)
        self.tail_losses.append(list(per_tail))
        self.totals.append(total)

    def __len__(self):
        return len(self.steps)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = len(self.tail_losses[0]) if self.tail_losses else 0
        writer.writerow(["step", "lr"] + [f"loss_{i}" for i in range(1, n + 1)] + ["total"])
        for row in zip(self.steps, self.lrs, self.tail_losses, self.totals):
            step, lr, per, tot = row
            writer.writerow([step, repr(lr)] + [repr(v) for v in per] + [repr(tot)])
        return buf.getvalue()


def _rng_for(seed, stream):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


SAMPLER_STREAM = 1


def train(config, model_config, sampler, init=None, log_every=1, callback=None):
    """Adam on the weighted multi-tail objective.

    ``sampler.batch(rng)`` must return a :class:`~tmlp.signals.SampleBatch`.
    ``init`` overrides the SIREN initialisation (its config must match).
    """
    dtype = np.dtype(config.dtype)
    if len(config.weights) != model_config.num_outputs:
        raise ConfigError(
            f"{len(config.weights)} loss weights, but {model_config.architecture.value} "
            f"with {model_config.num_hidden_layers} layers has {model_config.num_outputs} outputs"
        )
    params0 = init if init is not None else init_siren(model_config)
    if params0.config != model_config:
        raise ConfigError("initial parameters were built for a different model config")
    flat = params0.flatten().astype(dtype)
    params = ModelParams.view_flat(model_config, flat)
    state = AdamState.zeros(flat.size, dtype=dtype)
    rng = _rng_for(config.seed, SAMPLER_STREAM)
    history = TrainHistory()

    for step in range(config.iterations):
        batch = sampler.batch(rng)
        outs, trace = forward(params, batch.coords.astype(dtype, copy=False))
        res = total_loss(outs, batch.targets, config.weights, config.loss_kind)
        if not np.isfinite(res.total):
            raise TrainingError(
                f"non-finite loss at step {step}: per-level losses {res.per_tail}", step=step
            )
        grad = backward(params, trace, res.grads)
        lr = lr_at(config, step)
        if step % log_every == 0 or step == config.iterations - 1:
            history.record(step, lr, res.per_tail, res.total)
        if callback is not None:
            callback(step, res)
        adam_step(flat, grad, state, lr)
    return ModelParams.from_flat(model_config, flat), history


def _head_features(trunk, j, x):
    """Hidden state ``h_j`` of a frozen trunk, without touching its head."""
    cfg = trunk.config
    h = x.astype(trunk.dtype, copy=False)
    w0 = cfg.omega0
    for i in range(1, j + 1):
        s = np.sin(w0 * batched_affine(h, trunk.weight(i), trunk.bias(i)))
        if cfg.architecture is Architecture.RESIDUAL_MLP and i > 1:
            s += h
        h = s
    return h


def _attach_head(trunk, j, head_W, head_b):
    cfg = replace(trunk.config, num_hidden_layers=j)
    layers = [[a.copy() for a in trunk.layers[i][:2]] for i in range(j)]
    layers[-1] += [head_W, head_b]
    return ModelParams(cfg, layers)


def fit_head(features_fn, head_W, head_b, config):
    """Adam on an affine head over frozen features; returns (W, b, history).

    ``features_fn(rng)`` yields ``(features, targets)`` for one step.
    """
    dtype = np.dtype(config.dtype)
    flat = np.concatenate([head_W.ravel(), head_b.ravel()]).astype(dtype)
    W = flat[: head_W.size].reshape(head_W.shape)
    b = flat[head_W.size :]
    state = AdamState.zeros(flat.size, dtype=dtype)
    rng = _rng_for(config.seed, SAMPLER_STREAM)
    history = TrainHistory()
    for step in range(config.iterations):
        H, gt = features_fn(rng)
        y = batched_affine(H, W, b)
        res = total_loss([y], gt, (1.0,), config.loss_kind)
        if not np.isfinite(res.total):
            raise TrainingError(f"non-finite head loss at step {step}", step=step)
        g = res.grads[0]
        grad = np.concatenate([(g.T @ H).ravel(), g.sum(axis=0)])
        lr = lr_at(config, step)
        history.record(step, lr, res.per_tail, res.total)
        adam_step(flat, grad, state, lr)
    return W.copy(), b.copy(), history


def probe_retrain_heads(trunk, sampler, config):
    """Freeze a trained single-head trunk and refit an affine head on each hidden layer.

    For ``j = k .. 1`` a head is attached to hidden layer ``j`` and trained alone.
    The depth-``k`` head starts from the trunk's own head; shallower heads start
    from the SIREN last-layer initialisation. Returns ``(models, histories)``
    ordered ``M^1 .. M^k``.
    """
    cfg = trunk.config
    if not cfg.architecture.single_head:
        raise ConfigError(f"probing needs a plain_mlp or residual_mlp trunk, got {cfg.architecture.value}")
    k = cfg.num_hidden_layers
    dtype = np.dtype(config.dtype)
    frozen = trunk.astype(dtype)
    bound = np.sqrt(6.0 / cfg.hidden_width) / cfg.omega0
    init_rng = _rng_for(config.seed, 2)
    # finite signals (images) are probed full-batch on cached frozen features
    population = getattr(sampler, "population", None)

    models, histories = [None] * k, [None] * k
    for j in range(k, 0, -1):
        if j == k:
            W0, b0 = trunk.tail(k)[0].copy(), trunk.tail(k)[1].copy()
        else:
            W0 = init_rng.uniform(-bound, bound, size=(cfg.output_dim, cfg.hidden_width))
            b0 = init_rng.uniform(-bound, bound, size=(cfg.output_dim,))

        if population is not None:
            cached = (_head_features(frozen, j, population.coords), population.targets)

            def features_fn(rng, cached=cached):
                return cached
        else:

            def features_fn(rng, j=j):
                batch = sampler.batch(rng)
                return _head_features(frozen, j, batch.coords), batch.targets

        W, b, hist = fit_head(features_fn, W0, b0, config)
        models[j - 1] = _attach_head(trunk, j, W.astype(trunk.dtype), b.astype(trunk.dtype))
        histories[j - 1] = hist
        log.info("probe head %d: loss %.6g -> %.6g", j, hist.totals[0] if hist.totals else float("nan"),
                 hist.totals[-1] if hist.totals else float("nan"))
    return models, histories
