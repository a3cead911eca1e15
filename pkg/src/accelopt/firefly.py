"""Firefly search over a discrete design space via a continuous relaxation.

Particles live in ``[0, cardinality_k)`` per coordinate and are decoded by
flooring. Each step, every particle is pulled toward all particles with a
strictly lower (better) cached objective, with attraction
``beta0 * exp(-gamma * r**2)``, and jittered by annealed Gaussian noise.
Distances are measured after dividing each coordinate by its cardinality so
the attraction length scale does not depend on how many levels a parameter has.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .design_space import AcceleratorConfig, DesignSpace

Objective = Callable[[np.ndarray], np.ndarray]

_UPPER_EPS = 1e-9


class ObjectiveError(RuntimeError):
    """The objective returned a non-finite value; offending particles were left in place."""


@dataclass(frozen=True)
class FireflyHyper:
    gamma: float = 1.0
    beta0: float = 1.0
    noise_scale: float = 0.1
    noise_decay: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0 or not self.beta0 > 0:
            raise ValueError("gamma and beta0 must be positive")
        if self.noise_scale < 0 or not 0 < self.noise_decay <= 1:
            raise ValueError("noise_scale must be >= 0 and noise_decay in (0, 1]")


def population_size(C: int) -> int:
    if C < 1:
        raise ValueError("parameter count must be >= 1")
    x = (C ** 1.2 + C) * 0.5
    return 10 + int(math.floor(x + 0.5))  # x > 0, so this rounds half away from zero


def attractiveness(hyper: FireflyHyper, r) -> float | np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if (r < 0).any():
        raise ValueError("distance must be non-negative")
    out = hyper.beta0 * np.exp(-hyper.gamma * r * r)
    return float(out) if out.ndim == 0 else out


def decode(space: DesignSpace, position) -> AcceleratorConfig:
    return AcceleratorConfig(tuple(decode_array(space, np.asarray(position)[None, :])[0]))


def decode_array(space: DesignSpace, positions: np.ndarray) -> np.ndarray:
    card = np.asarray(space.cardinalities)
    return np.clip(np.floor(positions).astype(np.int64), 0, card - 1)


@dataclass
class FireflySwarm:
    space: DesignSpace
    positions: np.ndarray
    rng: np.random.Generator
    noise: float
    fitness: np.ndarray = field(default=None)
    best_config: AcceleratorConfig | None = None
    best_value: float = math.inf
    cache: dict = field(default_factory=dict)
    iteration: int = 0

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def configs(self) -> np.ndarray:
        return decode_array(self.space, self.positions)

    def evaluate(self, objective: Objective, X: np.ndarray) -> np.ndarray:
        """Objective values for rows of X, served from the cache where possible."""
        keys = [tuple(r) for r in X.tolist()]
        missing = list(dict.fromkeys(k for k in keys if k not in self.cache))
        if missing:
            vals = np.asarray(objective(np.asarray(missing, dtype=np.int64)), dtype=np.float64)
            if vals.shape != (len(missing),):
                raise ObjectiveError(f"objective returned shape {vals.shape} for {len(missing)} configs")
            for k, v in zip(missing, vals.tolist()):
                if math.isfinite(v):
                    self.cache[k] = v
        out = np.array([self.cache.get(k, math.nan) for k in keys])
        self._update_best(X, out)
        return out

    def _update_best(self, X, vals):
        finite = np.isfinite(vals)
        if not finite.any():
            return
        i = int(np.flatnonzero(finite)[np.argmin(vals[finite])])
        if vals[i] < self.best_value:
            self.best_value = float(vals[i])
            self.best_config = AcceleratorConfig(tuple(X[i]))

    def refresh(self, objective: Objective) -> None:
        """Forget cached values and best-so-far (the objective changed) and re-score particles."""
        self.cache.clear()
        self.best_value = math.inf
        self.best_config = None
        self.fitness = self.evaluate(objective, self.configs())
        if not np.isfinite(self.fitness).all():
            raise ObjectiveError("non-finite objective at initial particle positions")

    def ranked(self, top_n: int | None = None) -> list[tuple[AcceleratorConfig, float]]:
        """Distinct configs evaluated since the last refresh, best first."""
        items = sorted(self.cache.items(), key=lambda kv: (kv[1], kv[0]))
        if top_n is not None:
            items = items[:top_n]
        return [(AcceleratorConfig(k), v) for k, v in items]


def init_swarm(space: DesignSpace, objective: Objective, hyper: FireflyHyper, rng_seed,
               size: int | None = None) -> FireflySwarm:
    rng = np.random.default_rng(rng_seed)
    size = size or population_size(space.K)
    card = np.asarray(space.cardinalities, dtype=np.float64)
    swarm = FireflySwarm(space, rng.random((size, space.K)) * card, rng, hyper.noise_scale)
    swarm.refresh(objective)
    return swarm


def reinitialize(swarm: FireflySwarm, objective: Objective, hyper: FireflyHyper) -> None:
    """Scatter all particles to fresh random positions, keeping rng state and cache."""
    card = np.asarray(swarm.space.cardinalities, dtype=np.float64)
    swarm.positions = swarm.rng.random(swarm.positions.shape) * card
    swarm.noise = hyper.noise_scale
    swarm.fitness = swarm.evaluate(objective, swarm.configs())


def step(swarm: FireflySwarm, objective: Objective, hyper: FireflyHyper) -> FireflySwarm:
    """One synchronous firefly sweep (minimization), in place."""
    card = np.asarray(swarm.space.cardinalities, dtype=np.float64)
    x = swarm.positions
    f = swarm.fitness
    diff = x[None, :, :] - x[:, None, :]                      # diff[i, j] = x_j - x_i
    r = np.sqrt(((diff / card) ** 2).sum(-1))
    beta = hyper.beta0 * np.exp(-hyper.gamma * r * r)
    better = f[None, :] < f[:, None]                          # better[i, j]: j beats i
    move = np.einsum("ij,ijk->ik", beta * better, diff)
    noise = swarm.noise * swarm.rng.standard_normal(x.shape)
    new = np.clip(x + move + noise, 0.0, card - _UPPER_EPS)

    vals = swarm.evaluate(objective, decode_array(swarm.space, new))
    bad = ~np.isfinite(vals)
    new[bad] = x[bad]
    vals[bad] = f[bad]
    swarm.positions = new
    swarm.fitness = vals
    swarm.noise *= hyper.noise_decay
    swarm.iteration += 1
    if bad.any():
        raise ObjectiveError(f"non-finite objective for {int(bad.sum())} particle(s); left unmoved")
    return swarm


@dataclass
class RunResult:
    ranked: list[tuple[AcceleratorConfig, float]]
    trace: list[float]
    evaluations: int

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "best_value"])
            for i, v in enumerate(self.trace):
                w.writerow([i, repr(v)])


def run(space: DesignSpace, objective: Objective, hyper: FireflyHyper, iterations: int,
        rng_seed, top_n: int, size: int | None = None) -> RunResult:
    """Initialize a swarm, take ``iterations`` steps and rank every distinct config seen."""
    if iterations < 1 or top_n < 1:
        raise ValueError("iterations and top_n must be >= 1")
    swarm = init_swarm(space, objective, hyper, rng_seed, size)
    trace = [swarm.best_value]
    for _ in range(iterations):
        step(swarm, objective, hyper)
        trace.append(swarm.best_value)
    return RunResult(swarm.ranked(top_n), trace, len(swarm.cache))
