"""Debiased pseudo-label generation and utilization.

Each training step the trainer calls, in this order::

    state = update_model_dist(state, p_w)   # EMA of the raw weak-view mean
    state = update_target_dist(state)       # EMA of p_target toward p_model
    pb = generate(state, p_w)               # rescale -> threshold -> label, weight
    loss_u = weighted_masked_ce(p_s, pb)

``generate`` and the other read-only functions never mutate ``state``; the
update functions return a fresh state.
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import simplex
from .errors import (
    DegenerateEntropy,
    DegenerateModelDistribution,
    DimensionMismatch,
    EmptyBatch,
    LambdaOutOfRange,
    ThresholdOutOfRange,
)

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12
UNCLIPPED_WEIGHT_CAP = 1e6
LOWER_MODES = ("paper_one", "symmetric_reciprocal")


@dataclass(frozen=True)
class DebiaserConfig:
    n_classes: int
    tau: float = 0.95
    lambda_model: float = 0.999
    lambda_target: float = 1.0
    enable_rescale: bool = True
    enable_reweight: bool = True
    enable_clipping: bool = True
    enable_target_update: bool = True
    weight_lower_mode: str = "paper_one"

    def __post_init__(self):
        simplex.uniform(self.n_classes)  # validates the class count
        if not 0.0 < self.tau < 1.0:
            raise ThresholdOutOfRange(f"tau must lie in (0, 1), got {self.tau}")
        for name in ("lambda_model", "lambda_target"):
            lam = getattr(self, name)
            if not 0.0 <= lam <= 1.0:
                raise LambdaOutOfRange(f"{name} must lie in [0, 1], got {lam}")
        if self.weight_lower_mode not in LOWER_MODES:
            raise ValueError(f"weight_lower_mode must be one of {LOWER_MODES}")

    @classmethod
    def imbalanced(cls, n_classes, **kwargs):
        """Defaults for long-tailed data, where the target slowly follows the model."""
        kwargs.setdefault("lambda_target", 0.99999)
        return cls(n_classes, **kwargs)

    @classmethod
    def baseline(cls, n_classes, **kwargs):
        """Every debiasing toggle off: plain fixed-threshold pseudo-labeling."""
        for flag in ("enable_rescale", "enable_reweight", "enable_clipping", "enable_target_update"):
            kwargs.setdefault(flag, False)
        return cls(n_classes, **kwargs)


@dataclass
class DebiaserState:
    p_model: np.ndarray
    p_target: np.ndarray
    config: DebiaserConfig
    step: int = 0

    @classmethod
    def initial(cls, config):
        return cls(
            p_model=simplex.uniform(config.n_classes),
            p_target=simplex.uniform(config.n_classes),
            config=config,
        )

    def copy(self):
        return replace(self, p_model=self.p_model.copy(), p_target=self.p_target.copy())

    def to_record(self):
        """JSON-ready snapshot; floats are exact (shortest repr round-trips)."""
        return {
            "step": self.step,
            "p_model": [float(x) for x in self.p_model],
            "p_target": [float(x) for x in self.p_target],
            "config": asdict(self.config),
        }

    @classmethod
    def from_record(cls, record):
        config = DebiaserConfig(**record["config"])
        return cls(
            p_model=simplex.check_simplex(record["p_model"], "p_model").copy(),
            p_target=simplex.check_simplex(record["p_target"], "p_target").copy(),
            config=config,
            step=int(record["step"]),
        )


@dataclass
class PseudoBatch:
    labels: np.ndarray
    masks: np.ndarray
    weights: np.ndarray
    bounds: tuple = field(default=(None, None))

    @property
    def batch_size(self):
        return len(self.labels)


def scaling_factor(state):
    """Per-class ratio ``p_target / p_model``."""
    if np.any(state.p_model <= DEGENERATE_EPS):
        raise DegenerateModelDistribution(
            f"p_model has a class at or below {DEGENERATE_EPS}: {state.p_model}"
        )
    return state.p_target / state.p_model


def rescale(p_w, r):
    """Normalize(p_w * r), row-wise for a batch."""
    p_w = np.asarray(p_w, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if p_w.shape[-1] != r.shape[-1]:
        raise DimensionMismatch(f"dimension {p_w.shape[-1]} vs {r.shape[-1]}")
    return simplex.normalize(p_w * r)


def adaptive_bound(state):
    """Clipping interval for instance weights.

    ``r_max = 1 + KL(p_model || p_target) / (H(p_model) / C)``. The lower end is 1,
    or ``1 / r_max`` in ``symmetric_reciprocal`` mode.
    """
    h = simplex.entropy(state.p_model)
    if h <= DEGENERATE_EPS:
        raise DegenerateEntropy("p_model has collapsed to a point mass")
    c = state.config.n_classes
    r_max = 1.0 + simplex.kl_divergence(state.p_model, state.p_target) / (h / c)
    if state.config.weight_lower_mode == "symmetric_reciprocal":
        return 1.0 / r_max, r_max
    return 1.0, r_max


def generate(state, batch_p_w):
    """Pseudo-labels, masks and instance weights for one unlabeled batch."""
    cfg = state.config
    p_w = np.atleast_2d(np.asarray(batch_p_w, dtype=np.float64))
    if p_w.shape[0] == 0:
        raise EmptyBatch("generate needs at least one instance")
    if p_w.shape[1] != cfg.n_classes:
        raise DimensionMismatch(f"expected {cfg.n_classes} classes, got {p_w.shape[1]}")

    need_r = cfg.enable_rescale or cfg.enable_reweight
    r = scaling_factor(state) if need_r else None
    q = rescale(p_w, r) if cfg.enable_rescale else p_w

    labels = simplex.argmax_deterministic(q)
    masks = (np.max(q, axis=1) > cfg.tau).astype(np.float64)

    bounds = (None, None)
    if not cfg.enable_reweight:
        weights = np.ones(len(labels))
    elif cfg.enable_clipping:
        bounds = adaptive_bound(state)
        weights = np.clip(r[labels], *bounds)
    else:
        weights = r[labels]
        if np.any(weights > UNCLIPPED_WEIGHT_CAP):
            log.warning("unclipped weight above %g capped", UNCLIPPED_WEIGHT_CAP)
            weights = np.minimum(weights, UNCLIPPED_WEIGHT_CAP)
    return PseudoBatch(labels=labels, masks=masks, weights=weights, bounds=bounds)


def update_model_dist(state, batch_p_w):
    """EMA of p_model toward the mean of the raw (un-rescaled) weak predictions."""
    p_w = np.atleast_2d(np.asarray(batch_p_w, dtype=np.float64))
    if p_w.shape[0] == 0:
        raise EmptyBatch("update_model_dist needs at least one instance")
    mean = simplex.ordered_sum(p_w, axis=0) / p_w.shape[0]
    new = state.copy()
    new.p_model = simplex.ema_update(state.p_model, mean, state.config.lambda_model)
    return new


def update_target_dist(state):
    """EMA of p_target toward the current (already updated) p_model."""
    cfg = state.config
    new = state.copy()
    if cfg.enable_target_update and cfg.lambda_target < 1.0:
        new.p_target = simplex.ema_update(state.p_target, state.p_model, cfg.lambda_target)
    return new


def advance(state, batch_p_w):
    """Both EMA updates for one step, in the fixed order."""
    return update_target_dist(update_model_dist(state, batch_p_w))


def per_instance_ce(p_s, labels):
    """``-ln p_s[i, labels[i]]``."""
    p_s = np.asarray(p_s, dtype=np.float64)
    picked = p_s[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return -np.log(picked)


def weighted_masked_ce(p_s, pb):
    """Mean over the FULL batch of ``w * m * CE(label, p_s)``."""
    p_s = np.atleast_2d(np.asarray(p_s, dtype=np.float64))
    if p_s.shape[0] != pb.batch_size:
        raise DimensionMismatch(f"{p_s.shape[0]} predictions for {pb.batch_size} pseudo-labels")
    coef = pb.weights * pb.masks
    # masked-out rows contribute exactly 0 even if their CE is infinite
    with np.errstate(invalid="ignore"):
        terms = np.where(coef > 0, coef * per_instance_ce(p_s, pb.labels), 0.0)
    return float(simplex.ordered_sum(terms)) / pb.batch_size
