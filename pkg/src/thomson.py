"""
Spread k unit vectors over the sphere S^(d-1) by minimizing the Thomson energy
sum_{i != j} 1 / (1 - mu_i . mu_j) with projected gradient descent.
"""
from __future__ import annotations
from dataclasses import dataclass

import numpy as np

from console import log
from core import ValidationError

MAX_HALVINGS = 60
STEP_GROWTH = 1.2

@dataclass
class ThomsonConfig:
    k: int = 5
    d: int = 12
    steps: int = 2000
    step_size: float = 0.1
    rng_seed: int = 0
    epsilon: float = 1e-6
    """ distance floor for 1 - mu_i . mu_j """
    tolerance: float = 1e-12
    """ stop once the tangent gradient norm drops below this """
    log_every: int = 500

    def validate(self) -> list[str]:
        problems = []
        if self.k < 1:
            problems.append(f"k must be >= 1, got {self.k}")
        if self.d < 2:
            problems.append(f"d must be >= 2, got {self.d}")
        if self.steps < 0:
            problems.append("steps must be non-negative")
        if self.step_size <= 0:
            problems.append("step_size must be positive")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        return problems


def _cosine_distances(points: np.ndarray) -> np.ndarray:
    d = 1.0 - points @ points.T
    np.fill_diagonal(d, np.inf)
    return d

def thomson_energy(points, epsilon=1e-6) -> float:
    """ sum over ordered pairs i != j of 1 / d_cos(mu_i, mu_j) """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    d = _cosine_distances(points)
    closest = np.unravel_index(np.argmin(d), d.shape)
    if d[closest] < epsilon:
        raise ValidationError(f"points {closest[0]} and {closest[1]} coincide (d_cos = {d[closest]:.3g})")
    return float(np.sum(1.0 / d))

def thomson_gradient(points, epsilon=1e-6) -> tuple[float, np.ndarray]:
    """ (energy, euclidean gradient); pairs closer than `epsilon` are clamped and contribute no gradient """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0, np.zeros_like(points)
    d = _cosine_distances(points)
    clamped = d < epsilon
    safe = np.where(clamped, epsilon, d)
    energy = float(np.sum(1.0 / safe))
    weights = np.where(clamped, 0.0, 1.0 / np.square(safe))
    np.fill_diagonal(weights, 0.0)
    # d/dmu_i of 1/(1 - mu_i.mu_j) is mu_j / d_ij^2; each pair appears twice
    return energy, 2.0 * weights @ points

def _normalize(points: np.ndarray) -> np.ndarray:
    return points / np.linalg.norm(points, axis=1, keepdims=True)

def random_unit_vectors(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    points = rng.standard_normal((k, d))
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    while np.any(norms < 1e-12):
        points = rng.standard_normal((k, d))
        norms = np.linalg.norm(points, axis=1, keepdims=True)
    return points / norms

def thomson_init(config: ThomsonConfig | None = None) -> np.ndarray:
    """
    Seeded random start followed by Riemannian gradient descent with backtracking:
    a step that raises the energy is retried at half the step size, an accepted
    step grows the step size by STEP_GROWTH.
    """
    config = config or ThomsonConfig()
    problems = config.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    points = random_unit_vectors(config.k, config.d, rng)
    if config.k < 2:
        return points
    energy, grad = thomson_gradient(points, config.epsilon)
    initial = energy
    step = config.step_size
    for n in range(config.steps):
        tangent = grad - np.sum(grad * points, axis=1, keepdims=True) * points
        if np.linalg.norm(tangent) < config.tolerance:
            log.debug(f"converged after {n} steps")
            break
        for _ in range(MAX_HALVINGS):
            candidate = _normalize(points - step * tangent)
            candidate_energy, candidate_grad = thomson_gradient(candidate, config.epsilon)
            if candidate_energy <= energy:
                break
            step *= 0.5
        else:
            log.debug(f"line search stalled at step {n}")
            break
        points, energy, grad = candidate, candidate_energy, candidate_grad
        step *= STEP_GROWTH
        if config.log_every and (n + 1) % config.log_every == 0:
            log.info(f"thomson step {n + 1}/{config.steps}: energy {energy:.9f}")
    log.debug(f"thomson k={config.k} d={config.d}: energy {initial:.6f} -> {energy:.6f}")
    return points
