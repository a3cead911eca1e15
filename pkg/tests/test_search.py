from __future__ import annotations

import csv

import numpy as np
import pytest

from accelopt.design_space import sample_uniform_array
from accelopt.oracle import Oracle, OracleSpec, QueryLedger, area_batch
from accelopt.search import (LARGE, SearchConfigError, SearchSpec, evolutionary_baseline,
                             optimize, optimize_zero_shot, reoptimize_constraint,
                             surrogate_objective, write_summary)
from accelopt.surrogate import predict
from accelopt.trainer import TrainConfig, train, train_contextual

FAST = dict(n_top=24, iterations=40)


@pytest.fixture(scope="module")
def edge_params(edge_split, space, small_arch):
    return train(edge_split, space, small_arch,
                 TrainConfig(alpha=0.1, beta=1.0, lr=1e-3, total_gradient_steps=60,
                             checkpoint_interval=60, feasible_batch=32,
                             infeasible_batch=32)).params


@pytest.fixture(scope="module")
def ctx_params(multi_split, space, small_arch, library):
    return train_contextual(multi_split, space, small_arch,
                            TrainConfig(lr=1e-3, total_gradient_steps=60, checkpoint_interval=60,
                                        feasible_batch=32, infeasible_batch=32),
                            library).params


def test_optimize_contract(edge_params, space, library):
    ledger = QueryLedger()
    oracle = Oracle(OracleSpec(), space, ledger)
    spec = SearchSpec((library["mobilenet_edge"],), rng_seed=1, **FAST)
    rep = optimize(edge_params, space, spec, oracle)
    assert rep.queries == 24 and ledger.counts() == {"evaluation": 24}
    assert all(c.area_mm2 <= 29.0 for c in rep.candidates)
    keys = [c.config.indices for c in rep.candidates]
    assert len(set(keys)) == len(keys) == 24
    scores = [c.surrogate_score for c in rep.candidates]
    assert scores == sorted(scores)
    X = np.asarray(keys)
    np.testing.assert_allclose(scores, predict(edge_params, X))
    for c in rep.candidates:
        assert (c.oracle_latency is not None) == c.oracle_feasible
    feas = [c.oracle_latency for c in rep.candidates if c.oracle_feasible]
    if feas:
        assert rep.best == min(feas)


def test_optimize_deterministic(edge_params, space, library, tmp_path):
    spec = SearchSpec((library["mobilenet_edge"],), rng_seed=4, **FAST)
    a = optimize(edge_params, space, spec, Oracle(OracleSpec(), space))
    b = optimize(edge_params, space, spec, Oracle(OracleSpec(), space))
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "rank,indices,surrogate_score,area,oracle_feasible,oracle_latency"


def test_area_penalty(edge_params, space, library):
    spec = SearchSpec((library["mobilenet_edge"],), area_constraint=20.0)
    obj = surrogate_objective(edge_params, space, spec, OracleSpec())
    X = sample_uniform_array(space, 0, 200)
    over = area_batch(OracleSpec(), space, X) > 20.0
    np.testing.assert_allclose(obj(X), predict(edge_params, X) + LARGE * over)


def test_multi_context_objective_is_mean(ctx_params, space, library):
    ctxs = tuple(library[a] for a in ("m4", "m5"))
    obj = surrogate_objective(ctx_params, space, SearchSpec(ctxs, area_constraint=1e9),
                              OracleSpec())
    X = sample_uniform_array(space, 2, 50)
    expected = (predict(ctx_params, X, ctxs[0].features) + predict(ctx_params, X, ctxs[1].features)) / 2
    np.testing.assert_allclose(obj(X), expected)


def test_multi_context_queries(ctx_params, space, library):
    ledger = QueryLedger()
    spec = SearchSpec(tuple(library[a] for a in ("m4", "m5", "m6")), **FAST)
    rep = optimize(ctx_params, space, spec, Oracle(OracleSpec(), space, ledger))
    assert ledger.counts() == {"evaluation": 3 * 24}
    assert rep.queries == 72


def test_zero_shot(ctx_params, space, library):
    ledger = QueryLedger()
    oracle = Oracle(OracleSpec(), space, ledger)
    spec = SearchSpec((library["unet"],), **FAST)
    with pytest.raises(SearchConfigError, match="overlap"):
        optimize_zero_shot(ctx_params, ("m4", "unet"), space, spec, oracle)
    with pytest.raises(SearchConfigError, match="overlap"):
        optimize_zero_shot(ctx_params, ("m4",), space, spec, oracle, training_app_ids=["unet"])
    assert ledger.total == 0
    rep = optimize_zero_shot(ctx_params, ("m4", "m5", "m6"), space, spec, oracle)
    assert ledger.counts() == {"evaluation": 24} and rep.queries == 24


def test_zero_shot_needs_contextual_model(edge_params, space, library):
    with pytest.raises(SearchConfigError, match="contextual"):
        optimize_zero_shot(edge_params, (), space, SearchSpec((library["unet"],)),
                           Oracle(OracleSpec(), space))


def test_reoptimize_constraint(edge_params, space, library):
    before = edge_params.flat().copy()
    spec = SearchSpec((library["mobilenet_edge"],), area_constraint=18.0, **FAST)
    rep = reoptimize_constraint(edge_params, space, spec, Oracle(OracleSpec(), space))
    assert all(c.area_mm2 <= 18.0 for c in rep.candidates)
    np.testing.assert_array_equal(edge_params.flat(), before)


def test_search_failure_is_reported(edge_params, space, library):
    ledger = QueryLedger()
    spec = SearchSpec((library["mobilenet_edge"],), area_constraint=0.5, n_top=4, iterations=5,
                      max_restarts=1)
    rep = optimize(edge_params, space, spec, Oracle(OracleSpec(), space, ledger))
    assert not rep.ok and "area" in rep.failure
    assert rep.candidates == [] and ledger.total == 0


def test_search_spec_validation(library):
    with pytest.raises(SearchConfigError):
        SearchSpec(())
    with pytest.raises(SearchConfigError):
        SearchSpec((library["m4"],), area_constraint=0)
    with pytest.raises(SearchConfigError):
        SearchSpec((library["m4"],), n_top=0)


@pytest.mark.parametrize("budget", [23, 100, 257])
def test_evolutionary_budget_exact(space, library, budget, tmp_path):
    ledger = QueryLedger()
    oracle = Oracle(OracleSpec(), space, ledger)
    spec = SearchSpec((library["mobilenet_edge"],), rng_seed=0)
    rep = evolutionary_baseline(space, oracle, library["mobilenet_edge"], spec, budget)
    assert ledger.counts() == {"evolutionary": budget} and rep.queries == budget
    bests = [b for _, b in rep.trace]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
    assert rep.trace[-1][0] == budget
    if rep.ok:
        assert rep.best == bests[-1]
        assert all(c.area_mm2 <= 29.0 for c in rep.candidates)
    rep.write_trace(tmp_path / "t.csv", cost_seconds=2.0)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert float(rows[-1]["sim_seconds"]) == 2.0 * budget


def test_evolutionary_rejects_tiny_budget(space, library):
    with pytest.raises(SearchConfigError):
        evolutionary_baseline(space, Oracle(OracleSpec(), space), library["m4"],
                              SearchSpec((library["m4"],)), 5)


def test_summary(edge_params, space, library, tmp_path):
    reps = [optimize(edge_params, space, SearchSpec((library["mobilenet_edge"],), rng_seed=s,
                                                    **FAST), Oracle(OracleSpec(), space))
            for s in range(3)]
    agg = write_summary(reps, tmp_path / "s.csv")
    bests = [r.best for r in reps]
    assert agg["best"] == np.nanmin(bests)
    assert agg["median"] == np.median([b for b in bests if not np.isnan(b)])
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["seed"] for r in rows] == ["0", "1", "2", "all"]
