"""Desk-scale semi-supervised training on Gaussian-mixture data.

A softmax-regression (or one-hidden-layer tanh MLP) classifier with
hand-written gradients, trained on labeled cross-entropy plus a pseudo-label
consistency term driven by :mod:`tamatch.debiaser`. Augmentation is additive
isotropic Gaussian noise, weak and strong.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from . import debiaser, metrics, simplex
from .debiaser import DebiaserConfig, DebiaserState
from .errors import DegenerateSpec, DivergedTraining, InvalidGamma, NonFiniteLogit
from .parallel import ordered_map

# --- data ---------------------------------------------------------------------


def longtail_counts(n_head, gamma, n_classes):
    """Geometric class sizes ``round(n_head * gamma ** (-(i-1)/(C-1)))``, floored at 1.

    Rounds half up. At ``C = 10`` the exponent is the familiar ``(i-1)/9``.
    """
    if gamma < 1:
        raise InvalidGamma(f"imbalance ratio must be >= 1, got {gamma}")
    if n_head < 1:
        raise DegenerateSpec(f"head count must be >= 1, got {n_head}")
    if n_classes < 2:
        raise DegenerateSpec(f"need at least 2 classes, got {n_classes}")
    counts = []
    for i in range(n_classes):
        exact = n_head * gamma ** (-i / (n_classes - 1))
        counts.append(max(1, int(math.floor(exact + 0.5))))
    counts[0] = int(n_head)
    return counts


def circle_means(n_classes, dim, radius=2.0):
    """Class means evenly spaced on a circle in the first two coordinates."""
    if dim < 2:
        return [[radius * i] + [0.0] * (dim - 1) for i in range(n_classes)]
    means = np.zeros((n_classes, dim))
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means.tolist()


@dataclass(frozen=True)
class SynthDatasetSpec:
    n_classes: int = 4
    dim: int = 2
    means: list = None
    sigma_class: float = 1.0
    n_labeled_head: int = 10
    n_unlabeled_head: int = 500
    gamma: float = 1.0
    n_test_per_class: int = 200
    seed: int = 0
    radius: float = 2.0

    def resolved_means(self):
        m = self.means if self.means is not None else circle_means(self.n_classes, self.dim, self.radius)
        return np.asarray(m, dtype=np.float64)

    def sigmas(self):
        s = np.broadcast_to(np.asarray(self.sigma_class, dtype=np.float64), (self.n_classes,))
        return s.copy()


@dataclass
class TrainingView:
    """Everything the trainer may touch: no unlabeled ground truth."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray


@dataclass
class SynthDataset:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    p_truth: np.ndarray
    n_classes: int
    sigma: float
    # evaluation only; never handed to the trainer
    hidden_unlabeled_labels: np.ndarray = field(repr=False, default=None)

    def training_view(self):
        return TrainingView(self.x_labeled, self.y_labeled, self.x_unlabeled)


def _sample(rng, means, sigmas, counts):
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + sigmas[c] * rng.standard_normal((n, means.shape[1])))
        ys.append(np.full(n, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def generate_dataset(spec):
    means = spec.resolved_means()
    sigmas = spec.sigmas()
    C = spec.n_classes
    if means.shape != (C, spec.dim):
        raise DegenerateSpec(f"means must have shape {(C, spec.dim)}, got {means.shape}")
    if np.any(sigmas < 0) or not np.all(np.isfinite(means)):
        raise DegenerateSpec("sigma must be >= 0 and means finite")
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    if np.any(gaps[~np.eye(C, dtype=bool)] == 0):
        raise DegenerateSpec("class means must be pairwise distinct")
    if spec.n_test_per_class < 1:
        raise DegenerateSpec("need at least one test point per class")

    n_l = longtail_counts(spec.n_labeled_head, spec.gamma, C)
    n_u = longtail_counts(spec.n_unlabeled_head, spec.gamma, C)
    rng_l, rng_u, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    x_l, y_l = _sample(rng_l, means, sigmas, n_l)
    x_u, y_u = _sample(rng_u, means, sigmas, n_u)
    x_t, y_t = _sample(rng_t, means, sigmas, [spec.n_test_per_class] * C)
    totals = np.asarray(n_l, dtype=np.float64) + np.asarray(n_u, dtype=np.float64)
    return SynthDataset(
        x_labeled=x_l,
        y_labeled=y_l,
        x_unlabeled=x_u,
        x_test=x_t,
        y_test=y_t,
        p_truth=totals / simplex.ordered_sum(totals),
        n_classes=C,
        sigma=float(np.mean(sigmas)),
        hidden_unlabeled_labels=y_u,
    )


def augment(x, sigma, rng):
    """Additive N(0, sigma^2 I) noise. Always consumes draws, even at sigma = 0."""
    x = np.asarray(x, dtype=np.float64)
    return x + sigma * rng.standard_normal(x.shape)


# --- classifier ---------------------------------------------------------------


@dataclass
class ClassifierParams:
    """Output layer ``W`` (C x F), ``b`` (C); optional tanh layer ``W1`` (H x D), ``b1`` (H)."""

    W: np.ndarray
    b: np.ndarray
    W1: np.ndarray = None
    b1: np.ndarray = None

    def names(self):
        return ("W", "b") if self.W1 is None else ("W", "b", "W1", "b1")

    def arrays(self):
        return {k: getattr(self, k) for k in self.names()}

    def copy(self):
        return ClassifierParams(**{k: v.copy() for k, v in self.arrays().items()})

    def step(self, grads, lr):
        return ClassifierParams(**{k: v - lr * getattr(grads, k) for k, v in self.arrays().items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def init_params(n_classes, dim, model="linear", hidden=16, rng=None, scale=0.5):
    """Linear heads start at zero; the MLP's hidden layer gets N(0, scale^2/D) weights."""
    if model == "linear":
        return ClassifierParams(np.zeros((n_classes, dim)), np.zeros(n_classes))
    if model == "mlp":
        rng = rng if rng is not None else np.random.default_rng(0)
        W1 = scale / math.sqrt(dim) * rng.standard_normal((hidden, dim))
        W = scale / math.sqrt(hidden) * rng.standard_normal((n_classes, hidden))
        return ClassifierParams(W, np.zeros(n_classes), W1, np.zeros(hidden))
    raise ValueError(f"unknown model {model!r}")


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / simplex.ordered_sum(e)[..., None]


def _forward(params, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = x if params.W1 is None else np.tanh(x @ params.W1.T + params.b1)
    logits = h @ params.W.T + params.b
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogit("classifier produced a non-finite logit")
    return softmax(logits), (x, h)


def forward(params, x):
    """Class probabilities for one input or a batch of rows."""
    probs, _ = _forward(params, x)
    return probs[0] if np.ndim(x) == 1 else probs


def backward(params, cache, dlogits):
    x, h = cache
    grads = {"W": dlogits.T @ h, "b": simplex.ordered_sum(dlogits, axis=0)}
    if params.W1 is not None:
        dpre = (dlogits @ params.W) * (1.0 - h * h)
        grads["W1"] = dpre.T @ x
        grads["b1"] = simplex.ordered_sum(dpre, axis=0)
    return ClassifierParams(**grads)


def predict(params, x):
    return simplex.argmax_deterministic(forward(params, np.atleast_2d(x)))


# --- one training step --------------------------------------------------------


@dataclass
class Views:
    """Augmented inputs for one step: labeled weak view, unlabeled weak and strong views."""

    x_l: np.ndarray
    y_l: np.ndarray
    x_uw: np.ndarray
    x_us: np.ndarray


def make_views(train, batch_l, batch_u, sigma_weak, sigma_strong, rng_batch, rng_aug):
    idx_l = rng_batch.integers(0, len(train.y_labeled), batch_l)
    idx_u = rng_batch.integers(0, len(train.x_unlabeled), batch_u)
    x_l = augment(train.x_labeled[idx_l], sigma_weak, rng_aug)
    x_u = train.x_unlabeled[idx_u]
    x_uw = augment(x_u, sigma_weak, rng_aug)
    x_us = augment(x_u, sigma_strong, rng_aug)
    return Views(x_l, train.y_labeled[idx_l], x_uw, x_us)


@dataclass
class StepResult:
    loss: float
    loss_l: float
    loss_u: float
    grads: ClassifierParams
    pb: debiaser.PseudoBatch
    p_w: np.ndarray


def objective(params, views, pb):
    """Labeled CE plus pseudo-label CE on the strong view, with analytic gradients.

    ``pb`` is a constant here: nothing flows back through the weak branch that
    produced it.
    """
    n_l = len(views.y_l)
    n_u = pb.batch_size
    probs, cache = _forward(params, np.vstack([views.x_l, views.x_us]))
    p_l, p_s = probs[:n_l], probs[n_l:]

    loss_l = float(simplex.ordered_sum(debiaser.per_instance_ce(p_l, views.y_l))) / n_l if n_l else 0.0
    loss_u = debiaser.weighted_masked_ce(p_s, pb)

    C = probs.shape[1]
    d_l = (p_l - np.eye(C)[views.y_l]) / n_l if n_l else np.zeros((0, C))
    coef = pb.weights * pb.masks / n_u
    d_u = (p_s - np.eye(C)[pb.labels]) * coef[:, None]
    grads = backward(params, cache, np.vstack([d_l, d_u]))
    return loss_l, loss_u, grads


def loss_and_grad(params, views, state, p_w=None):
    """Generate pseudo-labels from the weak view under ``state``, then the objective."""
    if p_w is None:
        p_w = forward(params, views.x_uw)
    pb = debiaser.generate(state, p_w)
    loss_l, loss_u, grads = objective(params, views, pb)
    return StepResult(loss_l + loss_u, loss_l, loss_u, grads, pb, p_w)


def lr_schedule(lr0, k, total, warmup=0):
    """``lr0 * cos(7 pi k / (16 K))``, with a linear ramp from 0 over the first ``warmup`` steps."""
    if k < warmup:
        return lr0 * k / warmup
    if total <= 0:
        return lr0
    return lr0 * math.cos(7.0 * math.pi * k / (16.0 * total))


# --- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    debiaser: DebiaserConfig
    model: str = "linear"
    hidden: int = 16
    steps: int = 3000
    warmup: int = 0
    lr: float = 0.03
    batch_l: int = 64
    batch_u: int = 128
    sigma_weak: float = None
    sigma_strong: float = None
    seeds: tuple = (0,)
    eval_every: int = 100
    init_scale: float = 0.5

    def noise_scales(self, data_sigma):
        weak = self.sigma_weak if self.sigma_weak is not None else 0.1 * data_sigma
        strong = self.sigma_strong if self.sigma_strong is not None else 0.5 * data_sigma
        return weak, strong


def history_columns(n_classes):
    base = ["step", "lr", "loss_l", "loss_u", "util_ratio", "kl_model_truth", "kl_target_truth", "test_error"]
    return base + [f"acc_class_{c}" for c in range(n_classes)]


@dataclass
class MetricsHistory:
    rows: list
    n_classes: int
    seed: int = 0
    final_state: DebiaserState = None
    diverged: bool = False

    @property
    def columns(self):
        return history_columns(self.n_classes)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def final(self, name):
        return self.rows[-1][name]

    def time_average(self, name):
        return float(np.mean(self.column(name)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def seed_streams(seed):
    """Independent generators for parameter init, batch sampling and augmentation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3)]


class _Window:
    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, **vals):
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.count += 1

    def mean(self, key):
        return self.sums[key] / self.count if self.count else float("nan")


def evaluation_row(step, lr, window, params, state, data):
    preds = predict(params, data.x_test)
    acc = metrics.per_class_accuracy(preds, data.y_test, data.n_classes)
    row = {
        "step": step,
        "lr": lr,
        "loss_l": window.mean("loss_l"),
        "loss_u": window.mean("loss_u"),
        "util_ratio": window.mean("util_ratio"),
        "kl_model_truth": metrics.kl_to_truth(state.p_model, data.p_truth),
        "kl_target_truth": metrics.kl_to_truth(state.p_target, data.p_truth),
        "test_error": metrics.error_rate(preds, data.y_test),
    }
    row.update({f"acc_class_{c}": float(a) for c, a in enumerate(acc)})
    return row


def _is_eval_step(k, total, every):
    return k == total or (every > 0 and k % every == 0)


def train(cfg, data, seed=0):
    """Run ``cfg.steps`` SGD steps of debiased SSL for one seed.

    Each step: sample and augment batches, update p_model then p_target from
    the raw weak predictions, generate pseudo-labels, take an SGD step.
    Raises DivergedTraining (carrying the partial history) on a non-finite loss.
    """
    rng_init, rng_batch, rng_aug = seed_streams(seed)
    train_view = data.training_view()
    dim = train_view.x_labeled.shape[1]
    params = init_params(data.n_classes, dim, cfg.model, cfg.hidden, rng_init, cfg.init_scale)
    state = DebiaserState.initial(cfg.debiaser)
    sigma_w, sigma_s = cfg.noise_scales(data.sigma)
    K = cfg.steps

    window = _Window()
    history = MetricsHistory([], data.n_classes, seed)
    history.rows.append(evaluation_row(0, lr_schedule(cfg.lr, 0, K, cfg.warmup), window, params, state, data))

    for k in range(K):
        views = make_views(train_view, cfg.batch_l, cfg.batch_u, sigma_w, sigma_s, rng_batch, rng_aug)
        try:
            p_w = forward(params, views.x_uw)
            state = debiaser.advance(state, p_w)
            res = loss_and_grad(params, views, state, p_w)
        except NonFiniteLogit as exc:
            history.diverged, history.final_state = True, state
            raise DivergedTraining(f"step {k}: {exc}", history) from exc
        if not math.isfinite(res.loss):
            history.diverged, history.final_state = True, state
            raise DivergedTraining(f"step {k}: loss is {res.loss}", history)
        lr = lr_schedule(cfg.lr, k, K, cfg.warmup)
        params = params.step(res.grads, lr)
        state.step = k + 1
        window.add(loss_l=res.loss_l, loss_u=res.loss_u, util_ratio=metrics.utilization_ratio(res.pb))
        if _is_eval_step(k + 1, K, cfg.eval_every):
            history.rows.append(evaluation_row(k + 1, lr, window, params, state, data))
            window = _Window()

    history.final_state = state
    return history


def _train_task(cfg, data, seed):
    return train(cfg, data, seed)


def train_seeds(cfg, data, jobs=1):
    """One history per seed in ``cfg.seeds``, in seed-list order."""
    return ordered_map(partial(_train_task, cfg, data), list(cfg.seeds), jobs)


def with_debiaser(cfg, **flags):
    return replace(cfg, debiaser=replace(cfg.debiaser, **flags))
