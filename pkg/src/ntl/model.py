"""Plain and robust logistic regression: scores, likelihoods, losses, gradients.

The robust model treats the observed tag ``y`` as a noisy copy of a hidden
label ``z``::

    P(z=1 | s)   = sigmoid(s)
    P(y=1 | z=1) = pi
    P(y=0 | z=0) = gamma

All functions are vectorised over a batch given as ``X`` of shape (n, d) and
``y`` of shape (n,). Losses are summed over the batch, not averaged.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

# Above this score P(z=1|s) is 1 to double precision and the robust summand
# collapses to the pure noise term.
LARGE_SCORE = 35.0


class InputError(ValueError):
    """Rejected input (shape mismatch, non-finite values, bad labels)."""


@dataclass(frozen=True)
class TagModel:
    """Per-tag linear classifier with noise and calibration parameters."""

    tag: str
    w: np.ndarray
    b: float = 0.0
    pi: float = 1.0
    gamma: float = 1.0
    beta: float = 0.0
    flags: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise InputError(f"weight vector must be 1-D, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @classmethod
    def zeros(cls, tag: str, dim: int, **kw) -> "TagModel":
        return cls(tag=tag, w=np.zeros(dim), **kw)

    def replace(self, **changes) -> "TagModel":
        return dataclasses.replace(self, **changes)

    def same_params(self, other: "TagModel") -> bool:
        return (
            self.tag == other.tag
            and np.array_equal(self.w, other.w)
            and (self.b, self.pi, self.gamma, self.beta)
            == (other.b, other.pi, other.gamma, other.beta)
        )


def check_batch(X, y=None):
    """Coerce a batch to float64 arrays and validate it."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1:
        raise InputError(f"expected a non-empty (n, d) feature array, got {X.shape}")
    if not np.all(np.isfinite(X)):
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise InputError(f"non-finite feature values in example {bad}")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise InputError(f"labels have shape {y.shape}, expected ({X.shape[0]},)")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be exactly 0 or 1")
    return X, y


def sigmoid(s):
    """Logistic function, stable in both tails."""
    out = expit(s)
    return float(out) if np.ndim(out) == 0 else out


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def linear_score(w, b, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != np.shape(w)[0]:
        raise InputError(
            f"feature dimension {X.shape[-1]} does not match model dimension {np.shape(w)[0]}"
        )
    return X @ w + b


def score(model: TagModel, x):
    """``w.x + b + beta`` for one vector or each row of a matrix."""
    s = linear_score(model.w, model.b + model.beta, x)
    return float(s) if np.ndim(s) == 0 else s


def prob_y_given_score(s, pi, gamma):
    """Marginal tag probability ``pi*sigmoid(s) + (1-gamma)*(1-sigmoid(s))``."""
    return pi * expit(s) + (1.0 - gamma) * expit(-s)


def predict_y(model: TagModel, x):
    """Probability that the uploader supplies the tag."""
    p = prob_y_given_score(score(model, x), model.pi, model.gamma)
    return float(p) if np.ndim(p) == 0 else p


def predict_z(model: TagModel, x):
    """Probability that the concept is truly present, ``sigmoid(w.x + b + beta)``."""
    return sigmoid(score(model, x))


def lr_loss_grad(w, b, X, y):
    """Logistic negative log-likelihood and its gradient.

    Returns ``(loss, grad_w, grad_b)`` with
    ``loss = sum(log(1 + exp(-s)) + (1 - y) * s)``.
    """
    X, y = check_batch(X, y)
    s = linear_score(w, b, X)
    loss = float(np.sum(-log_expit(s) + (1.0 - y) * s))
    r = expit(s) - y
    return loss, X.T @ r, float(r.sum())


def rlr_loss_terms(s, y, pi, gamma):
    """Per-example robust negative log-likelihood.

    Uses ``-log sigmoid(s) - y log(pi + (1-gamma) e^-s) - (1-y) log(1-pi + gamma e^-s)``
    for non-negative scores and the equivalent ``e^s`` form for negative ones,
    so no exponential of a large positive number is ever taken.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lp, l1p = _log(pi), _log(1.0 - pi)
    lg, l1g = _log(gamma), _log(1.0 - gamma)
    pos = s >= 0
    t = np.where(pos, -s, s)  # always <= 0
    # log of the y=1 and y=0 factors after pulling out sigmoid(|s|)
    a1 = np.where(pos, np.logaddexp(lp, l1g + t), np.logaddexp(l1g, lp + t))
    a0 = np.where(pos, np.logaddexp(l1p, lg + t), np.logaddexp(lg, l1p + t))
    out = -log_expit(-t) - y * a1 - (1.0 - y) * a0
    big = s > LARGE_SCORE
    if np.any(big):
        with np.errstate(invalid="ignore"):
            limit = -np.where(y == 1, lp, 0.0) - np.where(y == 0, l1p, 0.0)
        # the pure-noise limit is infinite for pi == 1 with y == 0; keep the exact form there
        use = big & np.isfinite(limit)
        out = np.where(use, limit, out)
    return out


def rlr_loss(model: TagModel, X, y) -> float:
    """Summed robust negative log-likelihood of observed tags."""
    X, y = check_batch(X, y)
    s = linear_score(model.w, model.b + model.beta, X)
    return float(np.sum(rlr_loss_terms(s, y, model.pi, model.gamma)))


def rlr_score_terms(s, y, pi, gamma):
    """Per-example ``(dL/ds, dL/dpi, dL/dgamma)`` of the robust loss.

    Fractions are divided through by ``e^s`` (negative scores) or by
    ``e^-s`` (non-negative scores) to stay finite.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = s >= 0
    e = np.exp(np.where(pos, -s, s))  # in (0, 1]
    g1, p1 = 1.0 - gamma, 1.0 - pi
    with np.errstate(divide="ignore", invalid="ignore"):
        # y = 1 factor: (1-gamma) + pi e^s  ==  e^s (pi + (1-gamma) e^-s)
        d1 = np.where(pos, pi + g1 * e, g1 + pi * e)
        # y = 0 factor: gamma + (1-pi) e^s  ==  e^s (1-pi + gamma e^-s)
        d0 = np.where(pos, p1 + gamma * e, gamma + p1 * e)
        # (1-gamma)/((1-gamma) + pi e^s) and gamma/((1-pi) e^s + gamma)
        f1 = np.where(pos, g1 * e, g1) / d1
        f0 = np.where(pos, gamma * e, gamma) / d0
        ds = expit(s) - 1.0 + y * f1 + (1.0 - y) * f0
        dpi = -y * np.where(pos, 1.0, e) / d1 + (1.0 - y) * np.where(pos, 1.0, e) / d0
        dgamma = y * np.where(pos, e, 1.0) / d1 - (1.0 - y) * np.where(pos, e, 1.0) / d0
    big = s > LARGE_SCORE
    if np.any(big):
        ds = np.where(big, 0.0, ds)
        with np.errstate(divide="ignore"):
            dpi = np.where(big, -y / pi + (1.0 - y) / p1, dpi)
        dgamma = np.where(big, 0.0, dgamma)
    return ds, dpi, dgamma


def rlr_direct_grads(model: TagModel, X, y):
    """Gradients of the robust loss in ``w``, ``b``, ``pi`` and ``gamma``.

    Needs ``pi`` and ``gamma`` strictly inside (0, 1).
    """
    X, y = check_batch(X, y)
    if not (0.0 < model.pi < 1.0 and 0.0 < model.gamma < 1.0):
        raise InputError("pi and gamma must lie strictly inside (0, 1)")
    s = linear_score(model.w, model.b + model.beta, X)
    ds, dpi, dgamma = rlr_score_terms(s, y, model.pi, model.gamma)
    return X.T @ ds, float(ds.sum()), float(dpi.sum()), float(dgamma.sum())


def _slog(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def posterior_shifts(pi: float, gamma: float):
    """Log odds added to the score for tagged and untagged examples."""
    pi, gamma = float(pi), float(gamma)
    shift1 = _slog(pi) - _slog(1.0 - gamma) if pi > 0 else -math.inf
    shift0 = _slog(1.0 - pi) - _slog(gamma) if pi < 1 else -math.inf
    return shift1, shift0


def posterior_z(s, y, pi, gamma):
    """E-step responsibilities ``P(z=1 | y, s)``.

    ``pi sigma / (pi sigma + (1-gamma)(1-sigma))`` for tagged examples and
    ``(1-pi) sigma / ((1-pi) sigma + gamma (1-sigma))`` for untagged ones. Both
    are a sigmoid of the score shifted by a log odds ratio, which keeps the
    tails exact; with ``gamma == 1`` the tagged shift is ``+inf`` and the
    responsibility is exactly 1.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shift1, shift0 = posterior_shifts(pi, gamma)
    return expit(s + np.where(y == 1, shift1, shift0))
