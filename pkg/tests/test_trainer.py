from __future__ import annotations

import numpy as np
import pytest

from accelopt import dataset as D
from accelopt.design_space import sample_uniform_array
from accelopt.surrogate import predict
from accelopt.trainer import (Checkpoint, CheckpointError, HyperGrid, TrainConfig, TrainingError,
                              kendall_tau, load_checkpoint, save_checkpoint, select_model, train,
                              train_contextual, write_log)


def test_kendall_tau_reference_cases():
    assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    assert kendall_tau([1, 2], [5, 5]) == -1.0  # ties count against agreement
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1])
    with pytest.raises(ValueError):
        kendall_tau([1], [1])


def test_kendall_tau_matches_brute_force():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 5, 40).astype(float), rng.integers(0, 5, 40).astype(float)
    n = len(y)
    s = sum(1 if (y[i] - y[j]) * (p[i] - p[j]) > 0 else -1
            for i in range(n) for j in range(n) if i != j)
    assert kendall_tau(y, p) == pytest.approx(s / (n * (n - 1)))
    big = rng.standard_normal(2500)
    assert kendall_tau(big, big) == 1.0


def test_hyper_grid():
    g = HyperGrid()
    assert g.alphas == (0.0, 0.01, 0.1, 0.5, 1.0, 5.0)
    assert g.betas == (0.0, 0.01, 5.0, 0.1, 1.0)
    assert len(g.cells()) == 30


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(miner_inner_steps=0)
    assert TrainConfig().label == "Standard"
    assert TrainConfig(alpha=0.1, beta=1).label == "a0.1_b1"


def _ck(tau, alpha, beta, step, params=None):
    return Checkpoint(params, step, tau, {}, alpha, beta)


def test_select_model():
    only = _ck(0.1, 1, 1, 5)
    assert select_model([only]) is only
    best = _ck(0.9, 5, 5, 100)
    assert select_model([_ck(0.5, 0, 0, 1), best, _ck(0.2, 0.1, 0, 2)]) is best
    a, b = _ck(0.5, 0.1, 1, 10), _ck(0.5, 0.01, 5, 20)
    assert select_model([a, b]) is b
    c, d = _ck(0.5, 0.1, 1, 10), _ck(0.5, 0.1, 1, 5)
    assert select_model([c, d]) is d
    with pytest.raises(ValueError):
        select_model([])


def cfg(**kw):
    base = dict(total_gradient_steps=40, checkpoint_interval=15, log_interval=5,
                feasible_batch=32, infeasible_batch=32, lr=1e-3, rng_seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_checkpoints_and_log(edge_split, space, small_arch, tmp_path):
    run = train(edge_split, space, small_arch, cfg(alpha=0.1, beta=1.0))
    assert [c.gradient_step for c in run.checkpoints] == [15, 30]
    assert all(-1 <= c.validation_tau <= 1 for c in run.checkpoints)
    assert all(c.per_app_tau.keys() == {"mobilenet_edge"} for c in run.checkpoints)
    assert [r["step"] for r in run.log] == [5, 10, 15, 20, 25, 30, 35, 40]
    write_log(run.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,mse_term,negative_term,infeasible_term,validation_tau"
    assert lines[3].split(",")[-1] != "" and lines[1].split(",")[-1] == ""


def test_train_deterministic(edge_split, space, small_arch):
    a = train(edge_split, space, small_arch, cfg(alpha=0.5, beta=0.1))
    b = train(edge_split, space, small_arch, cfg(alpha=0.5, beta=0.1))
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert a.log == b.log


def test_regression_only_reduces_mse(space, small_arch, library):
    from accelopt.oracle import OracleSpec
    ds = D.generate(space, OracleSpec(), [library["m6"]], 1000, 4)
    split = D.split_validation(D.select_training_subset(ds, 250))
    c = cfg(total_gradient_steps=1500, checkpoint_interval=1500, log_interval=1,
            feasible_batch=len(split.train), infeasible_batch=0)
    run = train(split, space, small_arch, c)
    first = np.mean([r["mse_term"] for r in run.log[:10]])
    last = np.mean([r["mse_term"] for r in run.log[-10:]])
    assert last <= 0.5 * first
    assert all(r["negative_term"] == pytest.approx(r["negative_term"]) for r in run.log)


def test_mined_negatives_score_below_random(edge_split, space, small_arch):
    run = train(edge_split, space, small_arch, cfg(total_gradient_steps=60, log_interval=1,
                                                   checkpoint_interval=60))
    mined = np.mean([r["negative_term"] for r in run.log[-5:]])
    rand = predict(run.params, sample_uniform_array(space, 0, 500)).mean()
    assert mined < rand


def test_conservatism_raises_predictions_on_mined_points(edge_split, space, small_arch):
    plain = train(edge_split, space, small_arch, cfg(total_gradient_steps=150, log_interval=1,
                                                     checkpoint_interval=150))
    cons = train(edge_split, space, small_arch, cfg(alpha=5.0, total_gradient_steps=150,
                                                    log_interval=1, checkpoint_interval=150))
    mean_neg = lambda run: np.mean([r["negative_term"] for r in run.log[-20:]])
    assert mean_neg(cons) > mean_neg(plain)


def test_train_rejects_multiple_apps(multi_split, space, small_arch):
    with pytest.raises(D.DatasetError, match="train_contextual"):
        train(multi_split, space, small_arch, cfg())


def test_contextual_training(multi_split, space, small_arch, library):
    run = train_contextual(multi_split, space, small_arch,
                           cfg(total_gradient_steps=30, checkpoint_interval=30), library)
    ck = run.checkpoints[0]
    assert set(ck.per_app_tau) == {"m4", "m5", "m6"}
    assert ck.validation_tau == pytest.approx(np.mean(list(ck.per_app_tau.values())))
    assert ck.params.arch.context_dim == 6
    assert ck.trained_apps == ("m4", "m5", "m6")
    with pytest.raises(D.DatasetError, match="no context"):
        train_contextual(multi_split, space, small_arch, cfg(), {"m4": library["m4"]})


def test_contextual_app_selection_uniform(multi_split, space, small_arch, library, monkeypatch):
    import accelopt.trainer as T
    seen = []
    real = T.value_and_gradient

    def spy(params, batch, alpha, beta):
        seen.append(tuple(batch.feasible_c))
        return real(params, batch, alpha, beta)

    monkeypatch.setattr(T, "value_and_gradient", spy)
    steps = 1500
    tiny = small_arch.__class__(embed_dim=2, attention_layers=0, prediction_heads=1,
                                head_hidden=2, mixing_hidden=(2,))
    train_contextual(multi_split, space, tiny,
                     cfg(total_gradient_steps=steps, checkpoint_interval=steps,
                         feasible_batch=4, infeasible_batch=4, miner_inner_steps=1), library)
    counts = np.array(list({k: seen.count(k) for k in set(seen)}.values()))
    assert len(counts) == 3
    p = 1 / 3
    assert np.all(np.abs(counts - steps * p) <= 3 * np.sqrt(steps * p * (1 - p)))


def test_single_app_contextual_matches_train(edge_split, space, small_arch, library):
    arch = small_arch.with_context(6)
    a = train(edge_split, space, arch, cfg(), library)
    b = train_contextual(edge_split, space, small_arch, cfg(), library)
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_step_and_hashes(edge_split, space, small_arch):
    bad = D.DatasetSplit(tuple(D.LabeledDesign(d.config, 1e300, d.app_id) for d in edge_split.train),
                         edge_split.validation, edge_split.infeasible_train, edge_split.apps)
    with pytest.raises(TrainingError, match=r"step 1 .*feasible=[0-9a-f]{16}"):
        train(bad, space, small_arch, cfg())


def test_training_makes_no_oracle_queries(edge_split, space, small_arch, monkeypatch):
    import accelopt.oracle as O

    def boom(*a, **k):
        raise AssertionError("oracle touched during training")

    monkeypatch.setattr(O, "evaluate_batch", boom)
    monkeypatch.setattr(O.Oracle, "simulate_batch", boom)
    train(edge_split, space, small_arch, cfg())


def test_checkpoint_roundtrip(edge_split, space, small_arch, tmp_path):
    run = train(edge_split, space, small_arch, cfg(alpha=0.1, beta=0.01))
    ck = run.checkpoints[-1]
    save_checkpoint(ck, space, tmp_path / "a.ckpt")
    save_checkpoint(ck, space, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "a.ckpt", space)
    np.testing.assert_array_equal(back.params.flat(), ck.params.flat())
    assert (back.alpha, back.beta, back.gradient_step, back.validation_tau) == \
        (ck.alpha, ck.beta, ck.gradient_step, ck.validation_tau)
    X = sample_uniform_array(space, 0, 20)
    np.testing.assert_array_equal(predict(back.params, X), predict(ck.params, X))


def test_checkpoint_errors(edge_split, space, small_arch, tmp_path):
    from accelopt.design_space import DesignSpace, ParamSpec
    run = train(edge_split, space, small_arch, cfg())
    save_checkpoint(run.checkpoints[0], space, tmp_path / "a.ckpt")
    other = DesignSpace(space.params[:-1] + (ParamSpec("dram_bandwidth_gbps", (1, 2)),))
    with pytest.raises(CheckpointError, match="different design space"):
        load_checkpoint(tmp_path / "a.ckpt", other)
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt", space)
    (tmp_path / "x.ckpt").write_bytes(b"junk")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.ckpt", space)
