import itertools

import numpy as np
import pytest
from scipy.optimize import minimize

from core import ValidationError
from thomson import ThomsonConfig, random_unit_vectors, thomson_energy, thomson_gradient, thomson_init


def pairwise_dots(points):
    return [float(points[i] @ points[j]) for i, j in itertools.combinations(range(len(points)), 2)]

@pytest.mark.parametrize('k, d, expected', [(2, 2, -1.0), (2, 5, -1.0), (3, 2, -0.5), (3, 4, -0.5), (4, 3, -1 / 3)])
def test_regular_simplex(k, d, expected):
    points = thomson_init(ThomsonConfig(k=k, d=d))
    assert points.shape == (k, d)
    np.testing.assert_allclose(np.linalg.norm(points, axis=1), 1.0, atol=1e-9)
    for dot in pairwise_dots(points):
        assert dot == pytest.approx(expected, abs=1e-3)

def scipy_best_energy(k, d, restarts=5):
    def energy(flat):
        points = flat.reshape(k, d)
        return thomson_energy(points / np.linalg.norm(points, axis=1, keepdims=True))
    rng = np.random.default_rng(123)
    best = np.inf
    for _ in range(restarts):
        result = minimize(energy, rng.standard_normal(k * d), method='BFGS')
        best = min(best, result.fun)
    return best

def test_octahedron_matches_multistart_optimizer():
    points = thomson_init(ThomsonConfig(k=6, d=3, steps=3000))
    ours = thomson_energy(points)
    assert ours == pytest.approx(27.0, rel=1e-4)
    assert ours <= scipy_best_energy(6, 3) * (1 + 1e-4)

def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    points = random_unit_vectors(5, 4, rng)
    _, grad = thomson_gradient(points)
    h = 1e-6
    for i in range(5):
        for j in range(4):
            step = np.zeros_like(points)
            step[i, j] = h
            numeric = (thomson_energy(points + step) - thomson_energy(points - step)) / (2 * h)
            assert grad[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-6)

def test_energy_decreases_from_the_random_start():
    config = ThomsonConfig(k=7, d=5, steps=200, rng_seed=3)
    start = random_unit_vectors(7, 5, np.random.Generator(np.random.PCG64(3)))
    assert thomson_energy(thomson_init(config)) < thomson_energy(start)

def test_coincident_points_are_rejected():
    points = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        thomson_energy(points)
    energy, grad = thomson_gradient(points)
    assert np.isfinite(energy) and np.all(np.isfinite(grad))

def test_seeded_runs_are_reproducible():
    config = ThomsonConfig(k=5, d=6, steps=50, rng_seed=11)
    np.testing.assert_array_equal(thomson_init(config), thomson_init(config))
    other = thomson_init(ThomsonConfig(k=5, d=6, steps=50, rng_seed=12))
    assert not np.array_equal(thomson_init(config), other)

def test_single_point_and_zero_steps():
    single = thomson_init(ThomsonConfig(k=1, d=3))
    assert single.shape == (1, 3) and np.linalg.norm(single) == pytest.approx(1.0)
    assert thomson_energy(single) == 0.0
    start = random_unit_vectors(4, 3, np.random.Generator(np.random.PCG64(0)))
    np.testing.assert_array_equal(thomson_init(ThomsonConfig(k=4, d=3, steps=0)), start)

@pytest.mark.parametrize('bad', [dict(k=0), dict(d=1), dict(steps=-1), dict(step_size=0.0), dict(epsilon=0.0)])
def test_config_validation(bad):
    assert ThomsonConfig(**bad).validate()
    with pytest.raises(ValidationError):
        thomson_init(ThomsonConfig(**bad))
