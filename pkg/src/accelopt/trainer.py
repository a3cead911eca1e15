"""Conservative surrogate training with firefly negative mining, checkpointing and model selection."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .contexts import ContextVector
from .dataset import DatasetError, DatasetSplit, to_arrays
from .design_space import DesignSpace
from .firefly import FireflyHyper, init_swarm, reinitialize, step as firefly_step
from .surrogate import (
    AdamState,
    LossBatch,
    SurrogateArchitecture,
    SurrogateParams,
    adam_step,
    init_params,
    predict,
    value_and_gradient,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    beta: float = 0.0
    lr: float = 1e-4
    total_gradient_steps: int = 50_000
    miner_inner_steps: int = 5
    miner_refresh_period: int = 20_000
    feasible_batch: int = 128
    infeasible_batch: int = 128
    checkpoint_interval: int = 2_500
    log_interval: int = 100
    rng_seed: int = 0
    miner: FireflyHyper = field(default_factory=FireflyHyper)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.miner_inner_steps < 1 or self.miner_refresh_period < 1:
            raise ValueError("miner_inner_steps and miner_refresh_period must be >= 1")
        if self.total_gradient_steps < 1 or self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("step counts and intervals must be >= 1")
        if self.feasible_batch < 1 or self.infeasible_batch < 0:
            raise ValueError("feasible_batch must be >= 1 and infeasible_batch >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    @property
    def label(self) -> str:
        return "Standard" if self.alpha == 0 and self.beta == 0 else f"a{self.alpha:g}_b{self.beta:g}"


@dataclass(frozen=True)
class HyperGrid:
    alphas: tuple[float, ...] = (0.0, 0.01, 0.1, 0.5, 1.0, 5.0)
    betas: tuple[float, ...] = (0.0, 0.01, 5.0, 0.1, 1.0)

    def cells(self) -> list[tuple[float, float]]:
        return [(a, b) for a in self.alphas for b in self.betas]


@dataclass
class Checkpoint:
    params: SurrogateParams
    gradient_step: int
    validation_tau: float
    per_app_tau: dict[str, float] = field(default_factory=dict)
    alpha: float = 0.0
    beta: float = 0.0
    trained_apps: tuple[str, ...] = ()


@dataclass
class TrainRun:
    checkpoints: list[Checkpoint]
    log: list[dict]
    params: SurrogateParams

    def write_log(self, path: str | Path) -> None:
        write_log(self.log, path)


LOG_FIELDS = ("step", "train_loss", "mse_term", "negative_term", "infeasible_term", "validation_tau")


def write_log(rows: Sequence[Mapping], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"], *(_fmt(r.get(k)) for k in LOG_FIELDS[1:])])
    tmp.replace(path)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def kendall_tau(truths: Sequence[float], preds: Sequence[float]) -> float:
    """Rank agreement over ordered pairs i != j; tied pairs count as disagreements."""
    y = np.asarray(truths, dtype=np.float64).ravel()
    p = np.asarray(preds, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} truths vs {p.size} predictions")
    n = y.size
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 points")
    concordant = 0
    for lo in range(0, n, 1024):  # chunked to bound memory at O(1024 * n)
        dy = y[lo : lo + 1024, None] - y[None, :]
        dp = p[lo : lo + 1024, None] - p[None, :]
        concordant += int(np.count_nonzero(dy * dp > 0))
    pairs = n * (n - 1)
    return (concordant - (pairs - concordant)) / pairs


def select_model(candidates: Sequence[Checkpoint]) -> Checkpoint:
    """Highest validation tau; ties go to lower alpha, then lower beta, then earlier step."""
    if not candidates:
        raise ValueError("no checkpoints to select from")
    return min(candidates, key=lambda c: (-c.validation_tau, c.alpha, c.beta, c.gradient_step))


# ---------------------------------------------------------------- training loop


@dataclass
class _AppData:
    app_id: str
    context: np.ndarray | None
    train_x: np.ndarray
    train_y: np.ndarray
    infeasible_x: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def _app_data(split: DatasetSplit, space: DesignSpace, app_ids: Sequence[str],
              contexts: Mapping[str, ContextVector] | None) -> list[_AppData]:
    out = []
    for app in app_ids:
        tx, ty = to_arrays([d for d in split.train if d.app_id == app])
        vx, vy = to_arrays([d for d in split.validation if d.app_id == app])
        inf = [c.indices for c, a in split.infeasible_train if a == app]
        ix = np.asarray(inf, dtype=np.int64).reshape(-1, space.K)
        if len(tx) == 0:
            raise DatasetError(f"app {app!r} has no training points")
        ctx = None
        if contexts is not None:
            if app not in contexts:
                raise DatasetError(f"no context for app {app!r}")
            ctx = contexts[app].features
        out.append(_AppData(app, ctx, tx, ty, ix, vx, vy))
    return out


def _batch_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _validation_tau(params: SurrogateParams, apps: list[_AppData]) -> dict[str, float]:
    out = {}
    for a in apps:
        if len(a.val_y) >= 2:
            out[a.app_id] = kendall_tau(a.val_y, predict(params, a.val_x, a.context))
    return out


def _run(space: DesignSpace, arch: SurrogateArchitecture, cfg: TrainConfig,
         apps: list[_AppData]) -> TrainRun:
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(3 + len(apps))
    params = init_params(space, arch, seeds[0])
    all_y = np.concatenate([a.train_y for a in apps])
    params.output_shift = float(all_y.mean())
    params.output_scale = float(all_y.std()) or 1.0
    state = AdamState.zeros_like(params)
    batch_rng = np.random.default_rng(seeds[1])
    app_rng = np.random.default_rng(seeds[2])

    def objective_for(a: _AppData):
        return lambda X: predict(params, X, a.context)

    objectives = [objective_for(a) for a in apps]
    swarms = [init_swarm(space, objectives[i], cfg.miner, seeds[3 + i]) for i in range(len(apps))]

    checkpoints: list[Checkpoint] = []
    log: list[dict] = []
    trained = tuple(a.app_id for a in apps)
    for step in range(1, cfg.total_gradient_steps + 1):
        k = int(app_rng.integers(len(apps))) if len(apps) > 1 else 0
        a, swarm, obj = apps[k], swarms[k], objectives[k]
        if step > 1 and (step - 1) % cfg.miner_refresh_period == 0:
            reinitialize(swarm, obj, cfg.miner)
        # params moved since the last visit, so cached fitness values are stale
        swarm.refresh(obj)
        for _ in range(cfg.miner_inner_steps):
            firefly_step(swarm, obj, cfg.miner)
        neg = np.asarray([swarm.best_config.indices], dtype=np.int64)

        fi = batch_rng.integers(len(a.train_y), size=min(cfg.feasible_batch, len(a.train_y)))
        if len(a.infeasible_x) and cfg.infeasible_batch:
            ii = batch_rng.integers(len(a.infeasible_x),
                                    size=min(cfg.infeasible_batch, len(a.infeasible_x)))
            inf_x = a.infeasible_x[ii]
        else:
            inf_x = np.zeros((0, space.K), dtype=np.int64)
        batch = LossBatch(a.train_x[fi], a.train_y[fi], neg, inf_x,
                          a.context, a.context, a.context)
        terms, grad = value_and_gradient(params, batch, cfg.alpha, cfg.beta)
        if not math.isfinite(terms.total) or not all(np.isfinite(g).all() for g in grad.values()):
            raise TrainingError(
                f"non-finite loss at step {step} (app {a.app_id!r}); batch hashes: feasible="
                f"{_batch_hash(a.train_x[fi], a.train_y[fi])} negative={_batch_hash(neg)} "
                f"infeasible={_batch_hash(inf_x)}")
        adam_step(params, grad, state, lr=cfg.lr)

        row = None
        if step % cfg.log_interval == 0:
            row = {"step": step, "train_loss": terms.total, "mse_term": terms.mse,
                   "negative_term": terms.negative, "infeasible_term": terms.infeasible,
                   "validation_tau": None}
        if step % cfg.checkpoint_interval == 0:
            per_app = _validation_tau(params, apps)
            tau = float(np.mean(list(per_app.values()))) if per_app else -1.0
            checkpoints.append(Checkpoint(params.copy(), step, tau, per_app,
                                          cfg.alpha, cfg.beta, trained))
            if row is None:
                row = {"step": step, "train_loss": terms.total, "mse_term": terms.mse,
                       "negative_term": terms.negative, "infeasible_term": terms.infeasible}
            row["validation_tau"] = tau
        if row is not None:
            log.append(row)
    return TrainRun(checkpoints, log, params)


def train(split: DatasetSplit, space: DesignSpace, arch: SurrogateArchitecture, cfg: TrainConfig,
          contexts: Mapping[str, ContextVector] | None = None) -> TrainRun:
    """Single-application training; pass ``contexts`` only for a contextual architecture."""
    app_ids = sorted({d.app_id for d in split.train})
    if not app_ids:
        raise DatasetError("training split is empty")
    if len(app_ids) > 1:
        raise DatasetError(f"train() expects one application, got {app_ids}; use train_contextual")
    if arch.context_dim and contexts is None:
        raise DatasetError("contextual architecture needs contexts")
    return _run(space, arch, cfg, _app_data(split, space, app_ids,
                                            contexts if arch.context_dim else None))


def train_contextual(split: DatasetSplit, space: DesignSpace, arch: SurrogateArchitecture,
                     cfg: TrainConfig, contexts: Mapping[str, ContextVector]) -> TrainRun:
    """Each step draws one application uniformly and trains on its data and context only."""
    app_ids = split.app_ids()
    if not app_ids:
        raise DatasetError("training split is empty")
    missing = [a for a in app_ids if a not in contexts]
    if missing:
        raise DatasetError(f"no context for apps {missing}")
    dims = {contexts[a].dim for a in app_ids}
    if len(dims) != 1 or 0 in dims:
        raise DatasetError("contexts must be normalized and share one dimension")
    arch = arch.with_context(dims.pop())
    return _run(space, arch, cfg, _app_data(split, space, app_ids, contexts))


def train_grid(split: DatasetSplit, space: DesignSpace, arch: SurrogateArchitecture,
               base: TrainConfig, grid: HyperGrid,
               contexts: Mapping[str, ContextVector] | None = None,
               contextual: bool = False) -> dict[tuple[float, float], TrainRun]:
    runs = {}
    for a, b in grid.cells():
        cfg = TrainConfig(**{**base.__dict__, "alpha": a, "beta": b})
        if contextual:
            runs[(a, b)] = train_contextual(split, space, arch, cfg, contexts)
        else:
            runs[(a, b)] = train(split, space, arch, cfg, contexts)
    return runs


# ---------------------------------------------------------------- checkpoint files

_MAGIC = b"ACCKPT1\n"


def save_checkpoint(ckpt: Checkpoint, space: DesignSpace, path: str | Path) -> None:
    """Magic line, JSON header line, then every tensor as little-endian float64 in layout order."""
    p = ckpt.params
    header = {
        "arch": p.arch.to_dict(),
        "space": [list(space.names), list(space.cardinalities)],
        "output_shift": p.output_shift,
        "output_scale": p.output_scale,
        "gradient_step": ckpt.gradient_step,
        "validation_tau": ckpt.validation_tau,
        "per_app_tau": ckpt.per_app_tau,
        "alpha": ckpt.alpha,
        "beta": ckpt.beta,
        "trained_apps": list(ckpt.trained_apps),
        "tensors": [[k, list(v.shape)] for k, v in p.tensors.items()],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in p.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, space: DesignSpace) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    nl = data.index(b"\n", len(_MAGIC))
    header = json.loads(data[len(_MAGIC) : nl])
    names, cards = header["space"]
    if tuple(names) != space.names or tuple(cards) != space.cardinalities:
        raise CheckpointError(f"{path}: checkpoint was trained on a different design space")
    arch = SurrogateArchitecture.from_dict(header["arch"])
    raw = np.frombuffer(data[nl + 1 :], dtype="<f8")
    tensors, i = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        if i + n > raw.size:
            raise CheckpointError(f"{path}: truncated tensor data")
        tensors[name] = raw[i : i + n].reshape(shape).astype(np.float64)
        i += n
    if i != raw.size:
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    params = SurrogateParams(arch, tuple(cards), tensors,
                             header["output_shift"], header["output_scale"])
    return Checkpoint(params, header["gradient_step"], header["validation_tau"],
                      header["per_app_tau"], header["alpha"], header["beta"],
                      tuple(header["trained_apps"]))
