"""Closed-form reference estimators evaluated on a single prompt."""

from __future__ import annotations

import numpy as np

from .tasks import Prompt

BASELINE_KINDS = ("zero", "least_squares", "knn3", "averaging")


def zero_estimator(prompt: Prompt) -> float:
    """Constant 0; the floor any trained model must beat."""
    return 0.0


def least_squares_estimator(prompt: Prompt) -> float:
    """Minimum-norm least-squares fit w = X^+ y, predicting <w, x_query>.

    The pseudoinverse uses the standard numerical-rank cutoff
    max(k, d) * machine epsilon relative to the largest singular value, so
    rank-deficient contexts still give the minimum-norm solution.
    """
    X = prompt.context_xs
    rcond = max(X.shape) * np.finfo(np.float64).eps
    w_hat = np.linalg.pinv(X, rcond=rcond) @ prompt.ys
    return float(w_hat @ prompt.query_x)


def knn3_estimator(prompt: Prompt) -> float:
    """Unweighted mean label of the min(3, k) nearest context inputs.

    Distance ties at the cutoff are broken by lower context index (stable
    sort), so the estimate is deterministic.
    """
    diffs = prompt.context_xs - prompt.query_x
    dists = np.einsum("ij,ij->i", diffs, diffs)
    nearest = np.argsort(dists, kind="stable")[: min(3, prompt.k)]
    return float(np.mean(prompt.ys[nearest]))


def averaging_estimator(prompt: Prompt) -> float:
    """Inversion-free estimate w = (1/k) sum x_i y_i, predicting <w, x_query>."""
    w_hat = prompt.context_xs.T @ prompt.ys / prompt.k
    return float(w_hat @ prompt.query_x)


ESTIMATORS = {
    "zero": zero_estimator,
    "least_squares": least_squares_estimator,
    "knn3": knn3_estimator,
    "averaging": averaging_estimator,
}


def evaluate_baselines(prompt: Prompt) -> dict[str, float]:
    """All four predictions on one prompt, keyed by baseline tag."""
    return {name: fn(prompt) for name, fn in ESTIMATORS.items()}
