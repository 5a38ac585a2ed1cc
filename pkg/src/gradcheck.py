"""
Central finite differences against the analytic gradients.

Each entry of GRADIENT_PROBLEMS builds a small random problem: a point (named
parameter arrays) and a loss function returning `(loss, grads)` for it. The
lovasz losses are piecewise linear in the sorted errors, so points are resampled
until every error vector is free of near ties.
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import Callable

import numpy as np

from console import log
from core import ClassCatalog, Instance, LabelMap, ValidationError
from embed_model import (
    PixelFields, SemanticState, ae_baseline_loss, instance_loss, ins_var_loss, psi_scores,
    instance_scores, seed_loss, seg_mean_loss, semantic_cross_entropy_loss, semantic_loss,
)
from lovasz import errors, lovasz_binary, lovasz_softmax

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
MIN_GAP = 1e-3
MAX_TRIES = 1000

Params = dict[str, np.ndarray]
LossFn = Callable[[Params], tuple[float, Params]]

def finite_difference(func: Callable[[np.ndarray], float], x0: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """ centered differences of scalar `func` at `x0`, same shape as `x0` """
    x0 = np.asarray(x0, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        x = flat.copy()
        x[j] = flat[j] + h
        f_plus = func(x.reshape(x0.shape))
        x[j] = flat[j] - h
        f_minus = func(x.reshape(x0.shape))
        grad[j] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x0.shape)

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)

@dataclass
class GradientProblem:
    name: str
    params: Params
    loss: LossFn
    min_gap: Callable[[Params], float] | None = None
    """ smallest distance between two lovasz errors at this point """

@dataclass
class GradientCheck:
    name: str
    errors: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

def check_gradient(problem: GradientProblem, h: float = DEFAULT_STEP) -> GradientCheck:
    _, analytic = problem.loss(problem.params)
    result = {}
    for name, value in problem.params.items():
        def partial(x, name=name):
            return problem.loss({**problem.params, name: x})[0]
        numeric = finite_difference(partial, value, h)
        result[name] = relative_error(analytic.get(name, np.zeros_like(value)), numeric)
    return GradientCheck(problem.name, result)


# -------------------------------------------------------------
#  problem registry

GRADIENT_PROBLEMS: dict[str, Callable[[np.random.Generator], GradientProblem]] = {}

def gradient_problem(name: str):
    def register(builder):
        GRADIENT_PROBLEMS[name] = builder
        return builder
    return register

def _gap(values: np.ndarray) -> float:
    values = np.sort(np.asarray(values).reshape(-1))
    return float(np.min(np.diff(values))) if values.size > 1 else np.inf

def _unit_rows(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)

HEIGHT, WIDTH, DIM, CLASSES = 3, 4, 4, 3

# two instances of class 2 over stuff classes 0 and 1; class 2 pixel 5 has no instance
_CATALOG = ClassCatalog.of(('ground', 'stuff'), ('sky', 'stuff'), ('blob', 'thing'))
_LABELS = LabelMap(np.array([[2, 2, 1, 1],
                             [2, 2, 0, 2],
                             [0, 0, 2, 2]]))
_INSTANCES = [Instance(1, 2, np.array([0, 1, 4])), Instance(2, 2, np.array([7, 10, 11]))]

def _fields(params: Params, rng_fields: dict[str, np.ndarray]) -> PixelFields:
    merged = {**rng_fields, **params}
    return PixelFields(e=merged['e'], sigma=merged['sigma'], sigma_spatial=merged['sigma_spatial'], seed=merged['seed'])

def _random_fields(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        'e': _unit_rows(rng, (HEIGHT, WIDTH, DIM)),
        'sigma': rng.uniform(0.4, 0.9, (HEIGHT, WIDTH)),
        'sigma_spatial': rng.uniform(0.2, 0.6, (HEIGHT, WIDTH)),
        'seed': rng.uniform(0.0, 1.0, (HEIGHT, WIDTH)),
    }

def _random_state(rng: np.random.Generator) -> SemanticState:
    return SemanticState(_unit_rows(rng, (CLASSES, DIM)), rng.uniform(0.4, 0.9, CLASSES))

def _psi_gap(fields: PixelFields, state: SemanticState) -> float:
    psi = psi_scores(fields.flat_e(), state)
    flat = _LABELS.data.reshape(-1)
    return min(_gap(errors(psi[:, k], flat == k)) for k in range(CLASSES))

def _phi_gap(fields: PixelFields) -> float:
    gaps = []
    for inst in _INSTANCES:
        target = np.zeros(fields.num_pixels, dtype=bool)
        target[inst.pixels] = True
        gaps.append(_gap(errors(instance_scores(fields, inst), target)))
    return min(gaps)

@gradient_problem('lovasz_binary')
def _lovasz_binary_problem(rng: np.random.Generator) -> GradientProblem:
    t = np.zeros(8, dtype=bool)
    t[rng.choice(8, size=rng.integers(1, 8), replace=False)] = True
    def loss(x):
        value, g = lovasz_binary(x['p'], t)
        return value, {'p': g}
    return GradientProblem('lovasz_binary', {'p': rng.uniform(0.05, 0.95, 8)}, loss,
                           lambda x: _gap(errors(x['p'], t)))

@gradient_problem('lovasz_softmax')
def _lovasz_softmax_problem(rng: np.random.Generator) -> GradientProblem:
    labels = rng.integers(0, 3, 10)
    labels[rng.integers(0, 10)] = 255
    def loss(x):
        value, g = lovasz_softmax(x['probs'], labels, 3)
        return value, {'probs': g}
    def gap(x):
        return min(_gap(errors(x['probs'][labels != 255, k], labels[labels != 255] == k)) for k in range(3))
    return GradientProblem('lovasz_softmax', {'probs': rng.uniform(0.05, 0.95, (10, 3))}, loss, gap)

@gradient_problem('seg')
def _seg_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    state = _random_state(rng)
    def loss(x):
        return semantic_loss(_fields(x, base), _LABELS, SemanticState(x['mu_hat'], x['sigma_sem']), train_means=True)
    return GradientProblem('seg', {'e': base['e'], 'mu_hat': state.mu_hat, 'sigma_sem': state.sigma_sem}, loss,
                           lambda x: _psi_gap(_fields(x, base), SemanticState(x['mu_hat'], x['sigma_sem'])))

@gradient_problem('seg_ce')
def _seg_ce_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    state = _random_state(rng)
    def loss(x):
        return semantic_cross_entropy_loss(_fields(x, base), _LABELS, SemanticState(x['mu_hat'], x['sigma_sem']),
                                           train_means=True)
    return GradientProblem('seg_ce', {'e': base['e'], 'mu_hat': state.mu_hat, 'sigma_sem': state.sigma_sem}, loss)

@gradient_problem('seg_mean')
def _seg_mean_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    state = _random_state(rng)
    def loss(x):
        return seg_mean_loss(_fields({}, base), _LABELS, SemanticState(x['mu_hat'], state.sigma_sem))
    return GradientProblem('seg_mean', {'mu_hat': state.mu_hat}, loss)

@gradient_problem('ins')
def _ins_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    def loss(x):
        return instance_loss(_fields(x, base), _INSTANCES, _LABELS)
    params = {k: base[k] for k in ('e', 'sigma', 'sigma_spatial')}
    return GradientProblem('ins', params, loss, lambda x: _phi_gap(_fields(x, base)))

@gradient_problem('ins_var')
def _ins_var_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    def loss(x):
        return ins_var_loss(_fields(x, base), _INSTANCES)
    return GradientProblem('ins_var', {k: base[k] for k in ('sigma', 'sigma_spatial')}, loss)

@gradient_problem('seed')
def _seed_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    def loss(x):
        return seed_loss(_fields(x, base), _INSTANCES, _LABELS, _CATALOG)
    return GradientProblem('seed', {'seed': base['seed']}, loss)

@gradient_problem('ae')
def _ae_problem(rng: np.random.Generator) -> GradientProblem:
    base = _random_fields(rng)
    def loss(x):
        return ae_baseline_loss(_fields(x, base), _INSTANCES, 0.3, 2.5)
    def gap(x):
        # distance of every L1 term from its kinks (zero components and hinge corners)
        e = x['e'].reshape(-1, DIM)
        means = np.stack([e[i.pixels].mean(axis=0) for i in _INSTANCES])
        kinks = [np.abs(means[l] - e[i.pixels]).min() for l, i in enumerate(_INSTANCES)]
        kinks += [np.abs(means[0] - means[1]).min()]
        kinks += [np.abs(np.abs(means[l] - e[i.pixels]).sum(axis=1) - 0.3).min() for l, i in enumerate(_INSTANCES)]
        kinks += [abs(np.abs(means[0] - means[1]).sum() - 2.5)]
        return float(min(kinks))
    return GradientProblem('ae', {'e': base['e']}, loss, gap)


def sample_problem(name: str, rng: np.random.Generator, min_gap: float = MIN_GAP) -> GradientProblem:
    """ draw problems until the point is tie-free """
    if name not in GRADIENT_PROBLEMS:
        raise ValidationError(f"unknown gradient problem '{name}', expected one of {sorted(GRADIENT_PROBLEMS)}")
    for _ in range(MAX_TRIES):
        problem = GRADIENT_PROBLEMS[name](rng)
        if problem.min_gap is None or problem.min_gap(problem.params) > min_gap:
            return problem
    raise ValidationError(f"could not sample a tie-free point for '{name}'")

def run_gradcheck(names: list[str] | None = None, points: int = 100, rng_seed: int = 0,
                  h: float = DEFAULT_STEP) -> dict[str, list[GradientCheck]]:
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    results: dict[str, list[GradientCheck]] = {}
    for name in names or list(GRADIENT_PROBLEMS):
        results[name] = [check_gradient(sample_problem(name, rng), h) for _ in range(points)]
        worst = max(r.worst for r in results[name]) if results[name] else 0.0
        log.debug(f"{name}: worst relative error {worst:.3g} over {points} points")
    return results
