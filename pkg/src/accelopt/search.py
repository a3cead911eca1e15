"""Design search against a trained surrogate, plus an online evolutionary baseline.

Surrogate search never touches the oracle until the final top-n evaluation,
which costs exactly ``n_top`` queries per context.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .contexts import ContextVector
from .design_space import AcceleratorConfig, DesignSpace
from .firefly import FireflyHyper, init_swarm, population_size, reinitialize, step as firefly_step
from .oracle import Oracle, OracleSpec, area_batch
from .surrogate import SurrogateParams, predict

LARGE = 100_000.0


class SearchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpec:
    contexts: tuple[ContextVector, ...]
    area_constraint: float = 29.0
    n_top: int = 256
    iterations: int = 1000
    rng_seed: int = 0
    hyper: FireflyHyper = field(default_factory=FireflyHyper)
    max_restarts: int = 20

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(self.contexts))
        if not self.area_constraint > 0:
            raise SearchConfigError("area constraint must be positive")
        if self.n_top < 1 or self.iterations < 1:
            raise SearchConfigError("n_top and iterations must be >= 1")
        if not self.contexts:
            raise SearchConfigError("at least one context is required")


@dataclass(frozen=True)
class Candidate:
    config: AcceleratorConfig
    surrogate_score: float
    area_mm2: float
    oracle_feasible: bool | None = None
    oracle_latency: float | None = None  # mean over contexts; None when infeasible in any


@dataclass
class SearchReport:
    candidates: list[Candidate]
    queries: int
    seed: int
    area_constraint: float
    failure: str | None = None
    trace: list[tuple[int, float]] = field(default_factory=list)  # (queries so far, best so far)

    @property
    def ok(self) -> bool:
        return self.failure is None

    def feasible_latencies(self) -> np.ndarray:
        return np.asarray([c.oracle_latency for c in self.candidates if c.oracle_feasible],
                          dtype=np.float64)

    @property
    def best(self) -> float:
        lat = self.feasible_latencies()
        return float(lat.min()) if lat.size else math.nan

    @property
    def median(self) -> float:
        lat = self.feasible_latencies()
        return float(np.median(lat)) if lat.size else math.nan

    @property
    def feasible_fraction(self) -> float:
        if not self.candidates:
            return 0.0
        return sum(bool(c.oracle_feasible) for c in self.candidates) / len(self.candidates)

    @property
    def overestimation_count(self) -> int:
        """Oracle-feasible candidates whose predicted latency is below the true latency."""
        return sum(1 for c in self.candidates
                   if c.oracle_feasible and c.surrogate_score < c.oracle_latency)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "indices", "surrogate_score", "area", "oracle_feasible",
                        "oracle_latency"])
            for r, c in enumerate(self.candidates, 1):
                w.writerow([r, " ".join(map(str, c.config.indices)), repr(c.surrogate_score),
                            repr(c.area_mm2), "" if c.oracle_feasible is None else int(c.oracle_feasible),
                            "" if c.oracle_latency is None else repr(c.oracle_latency)])
        tmp.replace(path)

    def write_trace(self, path: str | Path, cost_seconds: float = 1.0) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["queries", "sim_seconds", "best_so_far"])
            for q, b in self.trace:
                w.writerow([q, repr(q * cost_seconds), repr(float(b))])
        tmp.replace(path)

    def summary(self) -> dict:
        return {"seed": self.seed, "area_constraint": self.area_constraint, "best": self.best,
                "median": self.median, "feasible_fraction": self.feasible_fraction,
                "overestimated": self.overestimation_count, "queries": self.queries, "failure": self.failure or ""}


def write_summary(reports: Sequence[SearchReport], path: str | Path) -> dict:
    """Per-seed summary rows plus a cross-seed row (best = min, median = median of per-seed bests)."""
    bests = np.asarray([r.best for r in reports])
    finite = bests[np.isfinite(bests)]
    agg = {"seed": "all", "area_constraint": reports[0].area_constraint if reports else "",
           "best": float(finite.min()) if finite.size else math.nan,
           "median": float(np.median(finite)) if finite.size else math.nan,
           "feasible_fraction": float(np.median([r.feasible_fraction for r in reports])) if reports else 0.0,
           "overestimated": float(np.median([r.overestimation_count for r in reports])) if reports else 0.0,
           "queries": sum(r.queries for r in reports),
           "failure": "" if finite.size else "no feasible design in any seed"}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    keys = list(agg)
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in [r.summary() for r in reports] + [agg]:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in keys)])
    tmp.replace(path)
    return agg


def surrogate_objective(params: SurrogateParams, space: DesignSpace, spec: SearchSpec,
                        oracle_spec: OracleSpec):
    """Mean prediction over ``spec.contexts``, with LARGE added above the area budget.

    Area is closed-form in the config, so the penalty costs no oracle queries.
    """
    contextual = params.arch.context_dim > 0
    feats = [c.features for c in spec.contexts] if contextual else [None]

    def objective(X: np.ndarray) -> np.ndarray:
        score = np.mean([predict(params, X, c) for c in feats], axis=0)
        over = area_batch(oracle_spec, space, X) > spec.area_constraint
        return np.where(over, score + LARGE, score)

    return objective


def _collect(space: DesignSpace, objective, area_ok, spec: SearchSpec) -> tuple[list, list[float]]:
    """Run firefly (restarting from fresh seeds if short) until n_top area-feasible configs are seen."""
    seen: dict[tuple, float] = {}
    trace: list[float] = []
    for restart in range(spec.max_restarts + 1):
        swarm = init_swarm(space, objective, spec.hyper, [spec.rng_seed, restart])
        for _ in range(spec.iterations):
            firefly_step(swarm, objective, spec.hyper)
            trace.append(swarm.best_value)
        seen.update(swarm.cache)
        keys = list(seen)
        ok = area_ok(np.asarray(keys, dtype=np.int64))
        if int(ok.sum()) >= spec.n_top:
            break
    ranked = sorted((seen[k], k) for k, good in zip(keys, ok) if good)
    return ranked[: spec.n_top], trace


def optimize(params: SurrogateParams, space: DesignSpace, spec: SearchSpec,
             oracle: Oracle) -> SearchReport:
    """Search the surrogate, then evaluate the top n_top area-feasible configs once per context."""
    if tuple(params.cardinalities) != space.cardinalities:
        raise SearchConfigError("surrogate was trained on a different design space")
    objective = surrogate_objective(params, space, spec, oracle.spec)
    ranked, trace = _collect(
        space, objective, lambda X: area_batch(oracle.spec, space, X) <= spec.area_constraint, spec)
    if not ranked:
        return SearchReport([], 0, spec.rng_seed, spec.area_constraint,
                            failure=f"no config with area <= {spec.area_constraint} found "
                                    f"in {spec.max_restarts + 1} firefly runs",
                            trace=list(enumerate(trace)))
    X = np.asarray([k for _, k in ranked], dtype=np.int64)
    areas = area_batch(oracle.spec, space, X)
    feasible = np.ones(len(X), dtype=bool)
    total = np.zeros(len(X))
    before = oracle.ledger.total
    with oracle.ledger.phase("evaluation"):
        for ctx in spec.contexts:
            for i, res in enumerate(oracle.simulate_batch(X, ctx)):
                feasible[i] &= res.feasible
                if res.feasible:
                    total[i] += res.latency_ms
    cands = [Candidate(AcceleratorConfig(tuple(x)), float(s), float(a), bool(f),
                       float(t / len(spec.contexts)) if f else None)
             for (s, _), x, a, f, t in zip(ranked, X.tolist(), areas, feasible, total)]
    report = SearchReport(cands, oracle.ledger.total - before, spec.rng_seed, spec.area_constraint,
                          trace=list(enumerate(trace)))
    if not feasible.any():
        report.failure = "no oracle-feasible design among the evaluated candidates"
    return report


def optimize_zero_shot(params: SurrogateParams, trained_apps: Iterable[str], space: DesignSpace,
                       spec: SearchSpec, oracle: Oracle,
                       training_app_ids: Iterable[str] | None = None) -> SearchReport:
    """Optimize a contextual surrogate for applications it never saw in training."""
    if params.arch.context_dim == 0:
        raise SearchConfigError("zero-shot search needs a contextual surrogate")
    targets = {c.app_id for c in spec.contexts}
    overlap = targets & set(trained_apps)
    if training_app_ids is not None:
        overlap |= targets & set(training_app_ids)
    if overlap:
        raise SearchConfigError(f"target apps overlap the training apps: {sorted(overlap)}")
    return optimize(params, space, spec, oracle)


def reoptimize_constraint(params: SurrogateParams, space: DesignSpace, spec: SearchSpec,
                          oracle: Oracle) -> SearchReport:
    """Re-run the search under a new area budget with the trained surrogate unchanged."""
    return optimize(params, space, spec, oracle)


def evolutionary_baseline(space: DesignSpace, oracle: Oracle, context: ContextVector,
                          spec: SearchSpec, query_budget: int) -> SearchReport:
    """Firefly directly on the oracle: every distinct config costs one metered query.

    Infeasible or over-budget designs score LARGE. The swarm is re-scattered
    when a step finds no unseen config, and the run stops the moment the
    budget is spent, so the ledger shows exactly ``query_budget`` queries.
    """
    spent = 0
    lat_of: dict[tuple, float | None] = {}
    best = math.inf
    trace: list[tuple[int, float]] = []

    class _Budget(Exception):
        pass

    def objective(X: np.ndarray) -> np.ndarray:
        nonlocal spent, best
        rows = [tuple(r) for r in X.tolist()]
        new = [r for r in dict.fromkeys(rows) if r not in lat_of]
        room = query_budget - spent
        if len(new) > room:
            new = new[:room]
        if new:
            N = np.asarray(new, dtype=np.int64)
            over = area_batch(oracle.spec, space, N) > spec.area_constraint
            with oracle.ledger.phase("evolutionary"):
                results = oracle.simulate_batch(N, context)
            spent += len(new)
            for r, res, o in zip(new, results, over):
                lat_of[r] = res.latency_ms if res.feasible and not o else None
                if lat_of[r] is not None and lat_of[r] < best:
                    best = lat_of[r]
            trace.append((spent, best))
        out = np.asarray([LARGE if lat_of.get(r, math.nan) is None else lat_of.get(r, math.nan)
                          for r in rows], dtype=np.float64)
        if spent >= query_budget and np.isnan(out).any():
            raise _Budget
        return out

    if query_budget < population_size(space.K):
        raise SearchConfigError("query budget is smaller than the firefly population")
    swarm = init_swarm(space, objective, spec.hyper, spec.rng_seed)
    stale = 0
    try:
        while spent < query_budget:
            before = spent
            firefly_step(swarm, objective, spec.hyper)
            stale = stale + 1 if spent == before else 0
            if stale >= 20:
                reinitialize(swarm, objective, spec.hyper)
                stale = 0
    except _Budget:
        pass
    ranked = sorted((v, k) for k, v in lat_of.items() if v is not None)[: spec.n_top]
    areas = area_batch(oracle.spec, space, np.asarray([k for _, k in ranked], dtype=np.int64)
                       .reshape(-1, space.K)) if ranked else []
    cands = [Candidate(AcceleratorConfig(k), float(v), float(a), True, float(v))
             for (v, k), a in zip(ranked, areas)]
    return SearchReport(cands, spent, spec.rng_seed, spec.area_constraint,
                        failure=None if cands else "no feasible design within the query budget",
                        trace=trace)
