"""Plain fixed-threshold pseudo-labeling loop, written without the debiaser.

Serves as the reference that the all-toggles-off debiased trainer must
reproduce bit for bit. It shares the data, classifier and evaluation helpers
with :mod:`tamatch.synth_ssl` but does its own pseudo-labeling, loss and
distribution tracking.
"""

import math

import numpy as np

from . import simplex
from .synth_ssl import (
    MetricsHistory,
    _Window,
    _forward,
    _is_eval_step,
    backward,
    evaluation_row,
    forward,
    init_params,
    lr_schedule,
    make_views,
    seed_streams,
)
from .errors import DivergedTraining


class _Tracker:
    """Carries p_model / p_target so ``evaluation_row`` can read them."""

    def __init__(self, n_classes):
        self.p_model = simplex.uniform(n_classes)
        self.p_target = simplex.uniform(n_classes)


def train_fixmatch(cfg, data, seed=0):
    tau = cfg.debiaser.tau
    lam = cfg.debiaser.lambda_model
    rng_init, rng_batch, rng_aug = seed_streams(seed)
    tv = data.training_view()
    C = data.n_classes
    params = init_params(C, tv.x_labeled.shape[1], cfg.model, cfg.hidden, rng_init, cfg.init_scale)
    track = _Tracker(C)
    sigma_w, sigma_s = cfg.noise_scales(data.sigma)
    K = cfg.steps
    eye = np.eye(C)

    window = _Window()
    history = MetricsHistory([], C, seed)
    history.rows.append(evaluation_row(0, lr_schedule(cfg.lr, 0, K, cfg.warmup), window, params, track, data))

    for k in range(K):
        v = make_views(tv, cfg.batch_l, cfg.batch_u, sigma_w, sigma_s, rng_batch, rng_aug)
        p_w = forward(params, v.x_uw)
        batch_mean = np.cumsum(p_w, axis=0)[-1] / len(p_w)
        track.p_model = lam * track.p_model + (1.0 - lam) * batch_mean

        pseudo = np.argmax(p_w, axis=1)
        mask = (p_w.max(axis=1) > tau).astype(np.float64)

        n_l, n_u = len(v.y_l), len(pseudo)
        probs, cache = _forward(params, np.vstack([v.x_l, v.x_us]))
        p_l, p_s = probs[:n_l], probs[n_l:]
        loss_l = float(np.cumsum(-np.log(p_l[np.arange(n_l), v.y_l]))[-1]) / n_l
        with np.errstate(divide="ignore"):
            ce_u = -np.log(p_s[np.arange(n_u), pseudo])
        loss_u = float(np.cumsum(np.where(mask > 0, mask * ce_u, 0.0))[-1]) / n_u
        if not math.isfinite(loss_l + loss_u):
            raise DivergedTraining(f"step {k}: non-finite loss", history)

        d_l = (p_l - eye[v.y_l]) / n_l
        d_u = (p_s - eye[pseudo]) * (mask / n_u)[:, None]
        grads = backward(params, cache, np.vstack([d_l, d_u]))
        lr = lr_schedule(cfg.lr, k, K, cfg.warmup)
        params = params.step(grads, lr)

        window.add(loss_l=loss_l, loss_u=loss_u, util_ratio=float(np.count_nonzero(mask)) / n_u)
        if _is_eval_step(k + 1, K, cfg.eval_every):
            history.rows.append(evaluation_row(k + 1, lr, window, params, track, data))
            window = _Window()
    return history
