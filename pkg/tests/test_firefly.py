from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from accelopt.design_space import DesignSpace, ParamSpec
from accelopt.firefly import (FireflyHyper, ObjectiveError, attractiveness, decode, init_swarm,
                              population_size, run, step)

CARDS = (8, 10, 6, 12, 9)
SPACE = DesignSpace(tuple(ParamSpec(f"p{k}", tuple(range(c))) for k, c in enumerate(CARDS)))
WEIGHTS = np.array([1.0, 0.5, 2.0, 0.3, 1.5])


def quadratic(center):
    center = np.asarray(center)
    return lambda X: ((X - center) ** 2 * WEIGHTS).sum(axis=1).astype(float)


def brute_force(f):
    grid = np.array(list(itertools.product(*(range(c) for c in CARDS))))
    vals = f(grid)
    return tuple(grid[np.argmin(vals)])


def test_population_size():
    assert population_size(10) == 23
    assert population_size(1) == 11
    assert population_size(5) == 10 + round((5 ** 1.2 + 5) * 0.5)
    with pytest.raises(ValueError):
        population_size(0)


def test_attractiveness():
    h = FireflyHyper(gamma=2.0, beta0=0.7)
    assert attractiveness(h, 0.0) == 0.7
    assert attractiveness(h, 1.5) == pytest.approx(0.7 * math.exp(-2.0 * 2.25))
    r = np.linspace(0, 3, 20)
    assert np.all(np.diff(attractiveness(h, r)) < 0)
    with pytest.raises(ValueError):
        attractiveness(h, -0.1)


def test_hyper_validation():
    with pytest.raises(ValueError):
        FireflyHyper(gamma=0)
    with pytest.raises(ValueError):
        FireflyHyper(noise_decay=1.5)


def test_decode_floors_and_clips():
    assert decode(SPACE, [0.99, 9.999, 5.5, 0.0, 8.99]).indices == (0, 9, 5, 0, 8)
    assert decode(SPACE, [-1.0, 12.0, 5.5, 0.0, 8.99]).indices == (0, 9, 5, 0, 8)


@pytest.mark.parametrize("center", [(2.2, 6.8, 1.4, 8.9, 3.3), (0.2, 9.4, 4.6, 1.1, 7.7)])
def test_finds_quadratic_optimum(center):
    f = quadratic(center)
    opt = brute_force(f)
    hits = sum(run(SPACE, f, FireflyHyper(), 500, seed, top_n=5).ranked[0][0].indices == opt
               for seed in range(5))
    assert hits >= 4


def test_positions_stay_in_bounds_and_trace_monotone():
    f = quadratic((1, 2, 3, 4, 5))
    res = run(SPACE, f, FireflyHyper(noise_scale=3.0), 50, 0, top_n=1000)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    keys = [c.indices for c, _ in res.ranked]
    assert len(set(keys)) == len(keys) == res.evaluations
    assert all(0 <= i < c for k in keys for i, c in zip(k, CARDS))
    vals = [v for _, v in res.ranked]
    assert vals == sorted(vals)


def test_deterministic_under_seed(tmp_path):
    f = quadratic((3, 3, 3, 3, 3))
    a = run(SPACE, f, FireflyHyper(), 40, 9, top_n=10)
    b = run(SPACE, f, FireflyHyper(), 40, 9, top_n=10)
    assert a.ranked == b.ranked and a.trace == b.trace
    a.write_trace(tmp_path / "a.csv")
    b.write_trace(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_best_particle_does_not_move_without_noise():
    f = quadratic((3, 3, 3, 3, 3))
    swarm = init_swarm(SPACE, f, FireflyHyper(noise_scale=0.0), 0)
    best = int(np.argmin(swarm.fitness))
    before = swarm.positions[best].copy()
    step(swarm, f, FireflyHyper(noise_scale=0.0))
    np.testing.assert_array_equal(swarm.positions[best], before)


def test_non_finite_objective_reverts_particles():
    f = quadratic((3, 3, 3, 3, 3))
    swarm = init_swarm(SPACE, f, FireflyHyper(), 0)
    before = swarm.positions.copy()

    def bad(X):
        return np.full(len(X), np.nan)

    with pytest.raises(ObjectiveError):
        step(swarm, bad, FireflyHyper())
    moved = (swarm.positions != before).any(axis=1)
    configs_changed = [tuple(c) for c in swarm.configs()]
    # particles whose new cell was cached keep moving; uncached ones are reverted
    for i, m in enumerate(moved):
        if m:
            assert configs_changed[i] in swarm.cache
    assert np.isfinite(swarm.fitness).all()


def test_init_rejects_non_finite():
    with pytest.raises(ObjectiveError):
        init_swarm(SPACE, lambda X: np.full(len(X), np.inf), FireflyHyper(), 0)
