"""Intercept-only recalibration of trained tag models on curated labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .bundle import ModelBundle
from .model import InputError, TagModel, check_batch, linear_score

log = logging.getLogger(__name__)

BETA_LIMIT = 20.0


@dataclass
class InterceptFit:
    model: TagModel
    gradient: float
    iterations: int
    clamped: bool


def fit_intercept(model: TagModel, X, z, limit: float = BETA_LIMIT, rtol: float = 1e-8, max_iter=200) -> InterceptFit:
    """Fit ``beta`` to the logistic likelihood of ``z`` under ``sigmoid(w.x + b + beta)``.

    ``w`` and ``b`` stay fixed. The derivative ``sum(sigmoid(s_i + beta) - z_i)``
    is increasing in ``beta``, so a Newton iteration safeguarded by a bracket
    finds its root; the solve stops once ``|derivative| < rtol * n``. Separable
    label sets push the root past ``+-limit``; ``beta`` is then clamped and the
    fit flagged.
    """
    X, z = check_batch(X, z)
    n = X.shape[0]
    s = linear_score(model.w, model.b, X)
    target = float(z.sum())

    def grad(beta):
        return float(expit(s + beta).sum()) - target

    tol = rtol * n
    lo, hi = -limit, limit
    g_lo, g_hi = grad(lo), grad(hi)
    clamped = False
    it = 0
    if g_lo >= 0:
        beta, g, clamped = lo, g_lo, True
    elif g_hi <= 0:
        beta, g, clamped = hi, g_hi, True
    else:
        beta = 0.0
        g = grad(beta)
        while abs(g) >= tol and it < max_iter:
            it += 1
            if g > 0:
                hi = beta
            else:
                lo = beta
            p = expit(s + beta)
            h = float(np.sum(p * (1.0 - p)))
            cand = beta - g / h if h > 0 else 0.5 * (lo + hi)
            if not lo < cand < hi:
                cand = 0.5 * (lo + hi)
            beta = cand
            g = grad(beta)
    flags = tuple(f for f in model.flags if f != "beta_clamped")
    if clamped:
        flags += ("beta_clamped",)
    return InterceptFit(model.replace(beta=float(beta), flags=flags), g, it, clamped)


@dataclass
class CalibrationReport:
    subset_size: int
    fitted: list = field(default_factory=list)
    clamped: list = field(default_factory=list)
    passed_through: list = field(default_factory=list)

    def to_dict(self):
        return {
            "subset_size": self.subset_size,
            "fitted": self.fitted,
            "clamped": self.clamped,
            "passed_through": self.passed_through,
        }


def subset_rows(n: int, subset_size: int, seed: int) -> np.ndarray:
    """Sorted row indices of a seeded sample without replacement.

    Samples for different sizes are prefixes of one permutation, so smaller
    subsets are nested in larger ones.
    """
    if not 1 <= subset_size <= n:
        raise InputError(f"subset_size must lie in [1, {n}], got {subset_size}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:subset_size])


def calibrate_bundle(bundle: ModelBundle, X, Z, tags, subset_size=None, seed: int = 0):
    """Refit ``beta`` for every bundle tag that has calibration labels.

    ``Z`` is the (n, len(tags)) ground-truth matrix aligned with ``X``.
    Returns the new bundle and a :class:`CalibrationReport`.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z)
    tags = list(tags)
    n = X.shape[0]
    if Z.shape != (n, len(tags)):
        raise InputError(f"label matrix has shape {Z.shape}, expected {(n, len(tags))}")
    subset_size = n if subset_size is None else int(subset_size)
    rows = subset_rows(n, subset_size, seed)
    Xs, Zs = X[rows], Z[rows]
    col = {t: j for j, t in enumerate(tags)}
    report = CalibrationReport(subset_size)
    models = {}
    for t, m in bundle.models.items():
        j = col.get(t)
        if j is None:
            models[t] = m
            report.passed_through.append(t)
            continue
        fit = fit_intercept(m, Xs, Zs[:, j].astype(np.float64))
        models[t] = fit.model
        report.fitted.append(t)
        if fit.clamped:
            report.clamped.append(t)
    return bundle.with_models(models), report


def calibration_sweep(bundle: ModelBundle, X, Z, tags, sizes, seed: int = 0, evaluate=None):
    """Calibrate at each subset size; ``evaluate(bundle) -> dict`` adds metric columns.

    Returns ``(bundles, curve)`` where ``curve`` is a list of row dicts keyed by
    ``subset_size`` plus the metric names.
    """
    bundles, curve = {}, []
    for size in sizes:
        cal, rep = calibrate_bundle(bundle, X, Z, tags, subset_size=size, seed=seed)
        bundles[size] = cal
        row = {"subset_size": int(size), "clamped": len(rep.clamped)}
        if evaluate is not None:
            row.update(evaluate(cal))
        curve.append(row)
    return bundles, curve
