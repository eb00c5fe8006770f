"""
Exact t-SNE (no Barnes-Hut approximation) for desk-scale context matrices.
"""
import logging
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from utils import NudgeEngineError

logger = logging.getLogger(__name__)

MIN_POINTS = 5
PERPLEXITY_TOL = 1e-4
MAX_BISECTION_STEPS = 200
EXAGGERATION = 4.0
EXAGGERATION_ITERS = 100
MOMENTUM_SWITCH_ITER = 250
LEARNING_RATE = 200.0
MIN_GAIN = 0.01
PROB_FLOOR = 1e-12


class TooFewPoints(NudgeEngineError):
    pass


class TsneResult(NamedTuple):
    embedding: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float


def _row_distribution(distances: np.ndarray, beta: float):
    shifted = distances - distances.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    entropy = np.log(total) + beta * np.sum(shifted * p) / total
    return p / total, float(np.exp(entropy))


def conditional_probabilities(X, perplexity: float = 30.0, tol: float = PERPLEXITY_TOL):
    """
    p_{j|i} with per-row Gaussian precisions found by bisection so each row's
    perplexity matches the target within `tol`. Returns (P, achieved perplexities).
    """
    D = squareform(pdist(np.asarray(X, dtype=float), "sqeuclidean"))
    n = D.shape[0]
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0 / max(np.median(d), 1e-12), 0.0, np.inf
        for _ in range(MAX_BISECTION_STEPS):
            row, perp = _row_distribution(d, beta)
            if abs(perp - perplexity) < tol:
                break
            if perp > perplexity:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        else:
            logger.warning("Row %d: perplexity %.6f after %d bisection steps (target %.6f)", i, perp, MAX_BISECTION_STEPS, perplexity)
        P[i, np.arange(n) != i] = row
        achieved[i] = perp
    return P, achieved


def _floored(M: np.ndarray) -> np.ndarray:
    # floor the off-diagonal mass, then renormalise to a distribution
    M = np.maximum(M, PROB_FLOOR)
    np.fill_diagonal(M, 0.0)
    return M / M.sum()


def joint_probabilities(X, perplexity: float = 30.0) -> np.ndarray:
    """Symmetrised input affinities p_ij, summing to 1."""
    P_cond, _ = conditional_probabilities(X, perplexity)
    return _floored((P_cond + P_cond.T) / (2.0 * P_cond.shape[0]))


def low_dim_affinities(Y: np.ndarray):
    """Student-t affinities q_ij of the embedding, with their unnormalised kernel."""
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return _floored(num / num.sum()), num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    Q, _ = low_dim_affinities(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def _jitter_duplicates(X: np.ndarray, rng) -> np.ndarray:
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    duplicate = np.ones(len(X), dtype=bool)
    duplicate[first] = False
    if duplicate.any():
        scale = 1e-8 * max(float(np.abs(X).max()), 1.0)
        X = X.copy()
        X[duplicate] += rng.normal(0.0, scale, size=(int(duplicate.sum()), X.shape[1]))
    return X


def tsne_embed(X, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0, dims: int = 2) -> TsneResult:
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < MIN_POINTS:
        raise TooFewPoints(f"t-SNE needs at least {MIN_POINTS} points, got {n}")
    rng = np.random.default_rng(seed)
    X = _jitter_duplicates(X, rng)

    effective = min(perplexity, (n - 1) / 3.0)
    if effective < perplexity:
        logger.info("Perplexity %.1f is infeasible for %d points, using %.2f", perplexity, n, effective)
    P = joint_probabilities(X, effective)

    Y = rng.normal(0.0, 1e-4, size=(n, dims))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_initial = kl_divergence(P, Y)

    for it in range(iterations):
        exaggerated = P * EXAGGERATION if it < EXAGGERATION_ITERS else P
        Q, num = low_dim_affinities(Y)
        W = (exaggerated - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y

        momentum = 0.5 if it < MOMENTUM_SWITCH_ITER else 0.8
        gains = np.where(np.sign(grad) != np.sign(velocity), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, MIN_GAIN)
        velocity = momentum * velocity - LEARNING_RATE * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

    kl_final = kl_divergence(P, Y)
    logger.debug("t-SNE on %d points: KL %.4f -> %.4f", n, kl_initial, kl_final)
    return TsneResult(Y, kl_initial, kl_final, effective)
