"""Stochastic EM training for robust logistic regression, plus a batch EM oracle."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from .model import (
    InputError,
    TagModel,
    check_batch,
    linear_score,
    posterior_shifts,
    posterior_z,
    rlr_loss_terms,
)

log = logging.getLogger(__name__)

GAMMA_MODES = ("fixed_one", "learned")
LR_DECAYS = ("constant", "inverse_time")


class TrainingError(RuntimeError):
    """Training could not proceed (unidentifiable labels, numerical blow-up)."""


class DegenerateStats(TrainingError):
    pass


@dataclass(frozen=True)
class Clamps:
    pi_floor: float = 0.01
    pi_ceiling: float = 0.999
    gamma_floor: float = 0.01

    def clamp_pi(self, pi):
        return min(max(pi, self.pi_floor), self.pi_ceiling)

    def clamp_gamma(self, gamma):
        return min(max(gamma, self.gamma_floor), 1.0)


NO_CLAMPS = Clamps(0.0, 1.0, 0.0)


@dataclass
class TrainConfig:
    minibatch_size: int = 500
    num_minibatches: int = 20000
    eta: float = 0.01
    learning_rate: float = 0.01
    lr_decay: str = "constant"
    # inverse_time: lr_t = learning_rate / (1 + t / lr_decay_steps)
    lr_decay_steps: float = 1000.0
    weight_decay: float = 0.0
    gamma_mode: str = "fixed_one"
    pi_init_stats: float = 1.0
    seed: int = 0
    robust: bool = True
    pi_floor: float = 0.01
    pi_ceiling: float = 0.999
    gamma_floor: float = 0.01
    log_every: int = 1000

    def __post_init__(self):
        errors = []
        if self.minibatch_size < 1:
            errors.append("minibatch_size must be >= 1")
        if self.num_minibatches < 1:
            errors.append("num_minibatches must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            errors.append("eta must lie in (0, 1]")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be > 0")
        if self.lr_decay not in LR_DECAYS:
            errors.append(f"lr_decay must be one of {LR_DECAYS}")
        if self.lr_decay_steps <= 0:
            errors.append("lr_decay_steps must be > 0")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if self.gamma_mode not in GAMMA_MODES:
            errors.append(f"gamma_mode must be one of {GAMMA_MODES}")
        if not 0.0 < self.pi_init_stats <= 1.0:
            errors.append("pi_init_stats must lie in (0, 1]")
        if not 0.0 <= self.pi_floor <= self.pi_ceiling <= 1.0:
            errors.append("need 0 <= pi_floor <= pi_ceiling <= 1")
        if not 0.0 <= self.gamma_floor <= 1.0:
            errors.append("gamma_floor must lie in [0, 1]")
        if self.log_every < 1:
            errors.append("log_every must be >= 1")
        if errors:
            raise InputError("; ".join(errors))

    @property
    def clamps(self) -> Clamps:
        return Clamps(self.pi_floor, self.pi_ceiling, self.gamma_floor)

    def lr_at(self, t: int) -> float:
        if self.lr_decay == "inverse_time":
            return self.learning_rate / (1.0 + t / self.lr_decay_steps)
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SufficientStats:
    """Exponential moving averages of the per-example E-step statistics."""

    s_alpha: float = 1.0
    s_y_alpha: float = 1.0
    s_y: float = 1.0
    eta: float = 0.01

    @classmethod
    def initial(cls, eta: float, value: float = 1.0) -> "SufficientStats":
        return cls(value, value, value, eta)


@dataclass
class TrainResult:
    model: TagModel
    trace: list = field(default_factory=list)
    converged: bool = True
    iterations: int = 0


def e_step(model: TagModel, X, y):
    """Responsibilities ``alpha_i = P(z_i=1 | y_i, x_i)`` under the current model."""
    X, y = check_batch(X, y)
    s = linear_score(model.w, model.b + model.beta, X)
    return posterior_z(s, y, model.pi, model.gamma)


def update_stats(stats: SufficientStats, alpha, y) -> SufficientStats:
    alpha = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = alpha.shape[0]
    if n < 1:
        raise InputError("cannot update statistics from an empty minibatch")
    eta = stats.eta
    mb_alpha = float(alpha.sum()) / n
    mb_y_alpha = float(y @ alpha) / n
    mb_y = float(y.sum()) / n
    return replace(
        stats,
        s_alpha=(1.0 - eta) * stats.s_alpha + eta * mb_alpha,
        s_y_alpha=(1.0 - eta) * stats.s_y_alpha + eta * mb_y_alpha,
        s_y=(1.0 - eta) * stats.s_y + eta * mb_y,
    )


def _m_ratios(s_alpha, s_y_alpha, s_y, learn_gamma, clamps, prev_gamma):
    if not s_alpha > 0:
        raise DegenerateStats(f"s_alpha = {s_alpha}; pi is undefined")
    pi = clamps.clamp_pi(s_y_alpha / s_alpha)
    if not learn_gamma:
        return pi, 1.0
    denom = 1.0 - s_alpha
    if denom <= 0:
        log.debug("s_alpha >= 1, keeping gamma = %s", prev_gamma)
        return pi, prev_gamma
    return pi, clamps.clamp_gamma((1.0 - s_y - s_alpha + s_y_alpha) / denom)


def m_step(stats: SufficientStats, gamma_mode="fixed_one", clamps=Clamps(), prev_gamma=1.0):
    """Closed-form ``(pi, gamma)`` from the running statistics.

    ``pi = S_ya / S_a`` and, when learned, ``gamma = (1 - S_y - S_a + S_ya) / (1 - S_a)``.
    When ``S_a == 1`` the gamma ratio is 0/0 and ``prev_gamma`` is kept.
    """
    if gamma_mode not in GAMMA_MODES:
        raise InputError(f"unknown gamma_mode {gamma_mode!r}")
    return _m_ratios(
        stats.s_alpha, stats.s_y_alpha, stats.s_y, gamma_mode == "learned", clamps, prev_gamma
    )


def _offender(r, X) -> int:
    """Row blamed for a non-finite gradient: the first non-finite term, else the largest."""
    with np.errstate(over="ignore", invalid="ignore"):
        terms = np.abs(r[:, None] * X)
    bad = np.flatnonzero(~np.isfinite(terms).all(axis=1))
    if bad.size:
        return int(bad[0])
    return int(np.argmax(terms.max(axis=1)))


def sgd_step(model: TagModel, X, alpha, lr: float, weight_decay: float = 0.0) -> TagModel:
    """One gradient step on the expected complete negative log-likelihood.

    The gradient in ``w`` is ``sum_i (sigmoid(s_i) - alpha_i) x_i``; the bias
    uses a constant-1 feature and is not weight-decayed.
    """
    X = np.asarray(X, dtype=np.float64)
    r = expit(linear_score(model.w, model.b + model.beta, X)) - alpha
    gw = X.T @ r + weight_decay * model.w
    gb = float(r.sum())
    if not (np.all(np.isfinite(gw)) and math.isfinite(gb)):
        raise TrainingError(
            f"non-finite gradient for tag {model.tag!r} (minibatch example {_offender(r, X)})"
        )
    return model.replace(w=model.w - lr * gw, b=model.b - lr * gb)


def expected_complete_nll(model: TagModel, X, y, alpha) -> float:
    """Expected complete-data negative log-likelihood with ``alpha`` frozen."""
    X, y = check_batch(X, y)
    alpha = np.asarray(alpha, dtype=np.float64)
    s = linear_score(model.w, model.b + model.beta, X)
    with np.errstate(divide="ignore"):
        lp, l1p = np.log(model.pi), np.log(1.0 - model.pi)
        lg, l1g = np.log(model.gamma), np.log(1.0 - model.gamma)
    # 0 * log(0) terms are taken as 0
    def xlog(c, v):
        with np.errstate(invalid="ignore"):
            return np.where(c == 0, 0.0, c * v)

    noise = np.where(
        y == 1,
        xlog(alpha, lp) + xlog(1 - alpha, l1g),
        xlog(alpha, l1p) + xlog(1 - alpha, lg),
    )
    prior = alpha * log_expit(s) + (1 - alpha) * log_expit(-s)
    return float(-np.sum(noise + prior))


def _check_labels(tag, y):
    npos = int(np.count_nonzero(y))
    if npos == 0 or npos == y.shape[0]:
        kind = "no positive" if npos == 0 else "no negative"
        raise TrainingError(f"tag {tag!r} has {kind} examples; pi is unidentifiable")


def fit_tag(X, y, config: TrainConfig, tag: str = "tag", rng=None) -> TrainResult:
    """Run stochastic EM for one tag and keep the loss trace."""
    X, y = check_batch(X, y)
    _check_labels(tag, y)
    n, d = X.shape
    rng = np.random.default_rng(config.seed) if rng is None else rng
    clamps = config.clamps
    robust = config.robust
    learn_gamma = robust and config.gamma_mode == "learned"

    # weights and bias live in one vector against a constant-1 column
    X1 = np.hstack([X, np.ones((n, 1))])
    v = np.zeros(d + 1)
    decay = np.full(d + 1, config.weight_decay)
    decay[-1] = 0.0
    eta = config.eta
    sa = sya = sy = config.pi_init_stats
    pi, gamma = 1.0, 1.0
    if robust:
        pi, gamma = _m_ratios(sa, sya, sy, False, clamps, 1.0)
    trace = []
    m = config.minibatch_size
    total = config.num_minibatches
    chunk = None
    for t in range(total):
        if t % 1024 == 0:
            chunk = rng.integers(0, n, size=(min(1024, total - t), m))
        idx = chunk[t % 1024]
        Xb, yb = X1[idx], y[idx]
        s = Xb @ v
        if robust:
            shift1, shift0 = posterior_shifts(pi, gamma)
            alpha = expit(s + np.where(yb == 1, shift1, shift0))
            sa = (1.0 - eta) * sa + eta * float(alpha.sum()) / m
            sya = (1.0 - eta) * sya + eta * float(yb @ alpha) / m
            sy = (1.0 - eta) * sy + eta * float(yb.sum()) / m
            pi, gamma = _m_ratios(sa, sya, sy, learn_gamma, clamps, gamma)
        else:
            alpha = yb
        r = expit(s) - alpha
        g = Xb.T @ r
        if config.weight_decay:
            g += decay * v
        if not math.isfinite(float(g.sum())) and not np.all(np.isfinite(g)):
            where = int(idx[_offender(r, Xb)])
            raise TrainingError(f"non-finite gradient for tag {tag!r} at example {where}")
        v = v - config.lr_at(t) * g
        if (t + 1) % config.log_every == 0 or t + 1 == total:
            loss = float(np.mean(rlr_loss_terms(Xb @ v, yb, pi, gamma)))
            trace.append({"minibatch": t + 1, "loss": loss, "pi": pi, "gamma": gamma})
    model = TagModel(tag=tag, w=v[:-1], b=float(v[-1]), pi=float(pi), gamma=float(gamma), beta=0.0)
    return TrainResult(model=model, trace=trace, iterations=total)


def train_tag(X, y, config: TrainConfig, tag: str = "tag") -> TagModel:
    """Robust (or plain, with ``config.robust=False``) model for one tag."""
    return fit_tag(X, y, config, tag=tag).model


def _fit_w(X1, targets, w0, weight_decay, tol=1e-10, max_iter=100):
    """Minimise the soft-target logistic loss in the augmented weights by Newton's method."""
    w = w0.copy()
    reg = np.full(w.shape[0], weight_decay)
    reg[-1] = 0.0

    def objective(v):
        s = X1 @ v
        return float(
            -np.sum(targets * log_expit(s) + (1 - targets) * log_expit(-s)) + 0.5 * np.sum(reg * v * v)
        )

    f = objective(w)
    for _ in range(max_iter):
        s = X1 @ w
        p = expit(s)
        g = X1.T @ (p - targets) + reg * w
        if np.max(np.abs(g)) < tol * max(1.0, X1.shape[0]):
            break
        H = (X1 * (p * (1 - p))[:, None]).T @ X1 + np.diag(reg) + 1e-12 * np.eye(w.shape[0])
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = w - t * step
            fc = objective(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        if fc > f:
            break
        w, f = cand, fc
    return w


@dataclass
class BatchEMResult:
    model: TagModel
    converged: bool
    iterations: int
    losses: list


def batch_em_reference(
    X,
    y,
    gamma_mode="fixed_one",
    clamps=Clamps(),
    weight_decay=0.0,
    tol=1e-6,
    max_iter=500,
    pi_init=1.0,
    gamma_init=1.0,
    tag="tag",
) -> BatchEMResult:
    """Full-batch EM: exact E-steps, exact ``pi``/``gamma`` ratios, converged ``w``.

    ``losses`` holds the marginal robust loss (plus the weight penalty) after
    each iteration; EM guarantees it never increases.
    """
    X, y = check_batch(X, y)
    _check_labels(tag, y)
    n, d = X.shape
    X1 = np.hstack([X, np.ones((n, 1))])
    v = np.zeros(d + 1)
    pi, gamma = clamps.clamp_pi(pi_init), clamps.clamp_gamma(gamma_init)
    if gamma_mode == "fixed_one":
        gamma = 1.0

    def penalised(v, pi, gamma):
        terms = rlr_loss_terms(X1 @ v, y, pi, gamma)
        return float(np.sum(terms) + 0.5 * weight_decay * np.sum(v[:-1] ** 2))

    losses = [penalised(v, pi, gamma)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        alpha = posterior_z(X1 @ v, y, pi, gamma)
        sa = alpha.sum()
        if sa <= 0:
            raise DegenerateStats("all responsibilities are zero")
        new_pi = clamps.clamp_pi(float(y @ alpha) / sa)
        new_gamma = gamma
        if gamma_mode == "learned":
            na = float(np.sum(1 - alpha))
            if na > 0:
                new_gamma = clamps.clamp_gamma(float((1 - y) @ (1 - alpha)) / na)
        new_v = _fit_w(X1, alpha, v, weight_decay)
        change = max(
            float(np.max(np.abs(new_v - v))), abs(new_pi - pi), abs(new_gamma - gamma)
        )
        v, pi, gamma = new_v, new_pi, new_gamma
        losses.append(penalised(v, pi, gamma))
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("batch EM hit the iteration cap (%d) for tag %r", max_iter, tag)
    model = TagModel(tag=tag, w=v[:-1], b=float(v[-1]), pi=float(pi), gamma=float(gamma))
    return BatchEMResult(model=model, converged=converged, iterations=it, losses=losses)
