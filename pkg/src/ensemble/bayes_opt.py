"""
Bayesian optimization of ensemble weights.

A Gaussian process with a fixed squared-exponential kernel models local
MAP as a function of the (unit-box scaled) weight vector; expected
improvement picks the next weights to evaluate. The loop runs a fixed
budget and keeps the best observed point.
"""

from typing import Callable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel
from tqdm import tqdm

from src.ensemble.fusion import fuse_tables, normalize_weights
from src.evaluation.predictions import PredictionTable
from src.tensor.random import make_rng
from src.utils.config import (
    BO_INIT_SAMPLES, BO_ITERATIONS, BO_JITTER, BO_LENGTH_SCALE, BO_NOISE, MAP_TOP_K,
)
from src.utils.errors import ConfigError
from src.utils.logging import logger


class GpSurrogate:
    """Fitted GP plus the observations it was conditioned on."""

    def __init__(self, regressor: GaussianProcessRegressor, X: np.ndarray, y: np.ndarray,
                 length_scale: float, signal_variance: float, noise: float):
        self.regressor = regressor
        self.X = X
        self.y = y
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise = noise


def gp_fit(
    X,
    y,
    length_scale: float = BO_LENGTH_SCALE,
    signal_variance: float = 1.0,
    noise: float = BO_NOISE,
) -> GpSurrogate:
    """Zero-mean GP, kernel hyperparameters held fixed."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ConfigError(f"{X.shape[0]} points but {y.shape[0]} observations")
    kernel = ConstantKernel(signal_variance, constant_value_bounds="fixed") * RBF(
        length_scale, length_scale_bounds="fixed"
    )
    regressor = GaussianProcessRegressor(kernel=kernel, alpha=noise + BO_JITTER, optimizer=None, normalize_y=False)
    regressor.fit(X, y)
    return GpSurrogate(regressor, X, y, length_scale, signal_variance, noise)


def gp_posterior(surrogate: GpSurrogate, w) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one point or a batch of points."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    mean, std = surrogate.regressor.predict(w, return_std=True)
    return mean, std ** 2


def ei_from_moments(mean, std, best: float) -> np.ndarray:
    """EI for maximization: (mu - best) Phi(z) + sigma phi(z); max(mu - best, 0) where sigma = 0."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    improvement = mean - best
    safe_std = np.where(std > 0, std, 1.0)
    z = improvement / safe_std
    ei = np.where(std > 0, improvement * norm.cdf(z) + std * norm.pdf(z), np.maximum(improvement, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(surrogate: GpSurrogate, w, best: float) -> np.ndarray:
    mean, variance = gp_posterior(surrogate, w)
    return ei_from_moments(mean, np.sqrt(np.maximum(variance, 0.0)), best)


class BayesOptResult(BaseModel):
    """Best observed point and every evaluation in order"""
    best_x: List[float]
    best_value: float
    xs: List[List[float]]
    values: List[float]


def _propose(surrogate: GpSurrogate, best: float, dim: int, rng: np.random.Generator,
             candidates: int, polish: int) -> np.ndarray:
    """Next point in the unit box: best EI over random candidates, then L-BFGS-B from the top few."""
    pool = rng.uniform(size=(candidates, dim))
    scores = expected_improvement(surrogate, pool, best)
    order = np.argsort(-scores, kind="stable")
    best_point, best_score = pool[order[0]], scores[order[0]]

    def negative_ei(u):
        return -float(expected_improvement(surrogate, u, best)[0])

    for index in order[:polish]:
        result = minimize(negative_ei, pool[index], method="L-BFGS-B", bounds=[(0.0, 1.0)] * dim)
        if result.success and -result.fun > best_score:
            best_point, best_score = np.clip(result.x, 0.0, 1.0), -result.fun
    logger.debug(f"Proposed {np.round(best_point, 4).tolist()} with EI {best_score:.3e}")
    return best_point


def maximize(
    objective: Callable[[np.ndarray], float],
    bounds,
    n_init: int = BO_INIT_SAMPLES,
    n_iter: int = BO_ITERATIONS,
    seed: int = 0,
    extra_points: Optional[Sequence[Sequence[float]]] = None,
    candidates: int = 1024,
    polish: int = 3,
    length_scale: float = BO_LENGTH_SCALE,
    noise: float = BO_NOISE,
) -> BayesOptResult:
    """
    Maximize ``objective`` over the box ``bounds`` (d x 2).

    Latin-hypercube initial samples (plus ``extra_points``) are evaluated,
    then each iteration fits the GP to the centered observations and
    evaluates the EI maximizer.
    """
    if n_init < 2:
        raise ConfigError(f"need at least 2 initial samples, got {n_init}")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    low, high = bounds[:, 0], bounds[:, 1]
    if np.any(high < low):
        raise ConfigError(f"invalid bounds {bounds.tolist()}")
    span = np.where(high > low, high - low, 1.0)
    dim = bounds.shape[0]
    rng = make_rng(seed, "bo")

    def to_box(u):
        return low + np.asarray(u) * span

    sampler = qmc.LatinHypercube(d=dim, seed=rng)
    unit_points = list(sampler.random(n_init))
    for point in extra_points or []:
        unit_points.append((np.asarray(point, dtype=np.float64) - low) / span)

    xs: List[np.ndarray] = []
    values: List[float] = []
    for u in unit_points:
        xs.append(to_box(u))
        values.append(float(objective(xs[-1])))

    units = [np.asarray(u, dtype=np.float64) for u in unit_points]
    for _ in tqdm(range(n_iter), desc="Bayesian optimization", leave=False):
        y = np.asarray(values)
        surrogate = gp_fit(np.stack(units), y - y.mean(), length_scale=length_scale, noise=noise)
        u = _propose(surrogate, float(np.max(y - y.mean())), dim, rng, candidates, polish)
        units.append(u)
        xs.append(to_box(u))
        values.append(float(objective(xs[-1])))
        logger.debug(f"BO step {len(values)}: value {values[-1]:.6f}, best {max(values):.6f}")

    best = int(np.argmax(values))
    logger.info(f"Bayesian optimization best value {values[best]:.6f} after {len(values)} evaluations")
    return BayesOptResult(
        best_x=xs[best].tolist(), best_value=values[best],
        xs=[x.tolist() for x in xs], values=values,
    )


class WeightTuning(BaseModel):
    """Tuned weights, their MAP, per-model MAP and the (weights, MAP) trajectory"""
    weights: List[float]
    map: float
    standalone: List[float]
    trajectory: List[Tuple[List[float], float]]


def default_bounds(standalone: Sequence[float]) -> np.ndarray:
    """Box [0.5 s_i, 1.5 s_i] around each model's normalized standalone MAP."""
    scores = np.asarray(standalone, dtype=np.float64)
    total = scores.sum()
    normalized = scores / total if total > 0 else np.full(len(scores), 1.0 / len(scores))
    return np.stack([0.5 * normalized, 1.5 * normalized], axis=1)


def tune_weights(
    tables: Sequence[PredictionTable],
    truth: Mapping[int, Set[str]],
    k: int = MAP_TOP_K,
    bounds=None,
    n_init: int = BO_INIT_SAMPLES,
    n_iter: int = BO_ITERATIONS,
    seed: int = 0,
    include_single_models: bool = True,
) -> WeightTuning:
    """
    Tune fusion weights against local MAP@K.

    Every candidate is normalized to the simplex before fusing. With
    ``include_single_models`` each model alone is evaluated alongside the
    initial samples.
    """
    if n_init < 2:
        raise ConfigError(f"need at least 2 initial samples, got {n_init}")
    if not tables:
        raise ConfigError("weight tuning needs at least one model")
    standalone = [table.map_at_k(truth, k) for table in tables]
    logger.info(f"Standalone MAP@{k}: {[round(s, 6) for s in standalone]}")
    if len(tables) == 1:
        return WeightTuning(weights=[1.0], map=standalone[0], standalone=standalone,
                            trajectory=[([1.0], standalone[0])])

    box = default_bounds(standalone) if bounds is None else np.asarray(bounds, dtype=np.float64)

    def local_map(x: np.ndarray) -> float:
        if np.all(np.maximum(x, 0.0) <= 0):
            return 0.0
        return fuse_tables(tables, normalize_weights(x), top_k=k).map_at_k(truth, k)

    extra = np.eye(len(tables)).tolist() if include_single_models else None
    result = maximize(local_map, box, n_init=n_init, n_iter=n_iter, seed=seed, extra_points=extra)
    trajectory = [
        (normalize_weights(x).tolist() if np.any(np.asarray(x) > 0) else list(x), value)
        for x, value in zip(result.xs, result.values)
    ]
    weights = normalize_weights(result.best_x).tolist()
    return WeightTuning(weights=weights, map=result.best_value, standalone=standalone, trajectory=trajectory)
