"""Offline dataset: oracle-labelled random designs, worst-k selection, validation split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .contexts import ContextVector
from .design_space import AcceleratorConfig, DesignSpace, sample_uniform_array
from .oracle import Oracle, OracleSpec, QueryLedger


class DatasetError(ValueError):
    """Configuration problem with a dataset (too few points, unknown app, ...)."""


class DatasetParseError(DatasetError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class LabeledDesign:
    config: AcceleratorConfig
    latency_ms: float
    app_id: str

    def __post_init__(self):
        if not (math.isfinite(self.latency_ms) and self.latency_ms > 0):
            raise DatasetError(f"latency must be finite and > 0, got {self.latency_ms}")


@dataclass(frozen=True)
class OfflineDataset:
    feasible: tuple[LabeledDesign, ...]
    infeasible: tuple[tuple[AcceleratorConfig, str], ...]
    apps: Mapping[str, ContextVector]

    def __post_init__(self):
        object.__setattr__(self, "feasible", tuple(self.feasible))
        object.__setattr__(self, "infeasible", tuple(self.infeasible))
        object.__setattr__(self, "apps", dict(self.apps))
        referenced = {d.app_id for d in self.feasible} | {a for _, a in self.infeasible}
        missing = referenced - set(self.apps)
        if missing:
            raise DatasetError(f"records reference apps without a context: {sorted(missing)}")
        both = {(d.config, d.app_id) for d in self.feasible} & set(self.infeasible)
        if both:
            raise DatasetError(f"{len(both)} (config, app) pairs are both feasible and infeasible")

    def app_ids(self) -> list[str]:
        return list(self.apps)

    def for_app(self, app_id: str) -> "OfflineDataset":
        return OfflineDataset(
            tuple(d for d in self.feasible if d.app_id == app_id),
            tuple(r for r in self.infeasible if r[1] == app_id),
            {app_id: self.apps[app_id]},
        )

    def counts(self) -> dict[str, tuple[int, int]]:
        """app_id -> (feasible, infeasible) record counts."""
        out = {a: [0, 0] for a in self.apps}
        for d in self.feasible:
            out[d.app_id][0] += 1
        for _, a in self.infeasible:
            out[a][1] += 1
        return {a: (f, i) for a, (f, i) in out.items()}


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledDesign, ...]
    validation: tuple[LabeledDesign, ...]
    infeasible_train: tuple[tuple[AcceleratorConfig, str], ...]
    apps: Mapping[str, ContextVector] = field(default_factory=dict)

    def app_ids(self) -> list[str]:
        return list(self.apps) or sorted({d.app_id for d in self.train})


def generate(space: DesignSpace, oracle_spec: OracleSpec, contexts: Sequence[ContextVector],
             n_samples: int, rng_seed, ledger: QueryLedger | None = None) -> OfflineDataset:
    """Sample ``n_samples`` uniform configs per app and label each with one oracle query."""
    if n_samples < 1:
        raise DatasetError("n_samples must be >= 1")
    if not contexts:
        raise DatasetError("at least one application context is required")
    oracle = Oracle(oracle_spec, space, ledger)
    rng = np.random.default_rng(rng_seed)
    feasible, infeasible = [], []
    with oracle.ledger.phase("gen_data"):
        for ctx in contexts:
            X = sample_uniform_array(space, rng, n_samples)
            for row, res in zip(X.tolist(), oracle.simulate_batch(X, ctx)):
                cfg = AcceleratorConfig(tuple(row))
                if res.feasible:
                    feasible.append(LabeledDesign(cfg, res.latency_ms, ctx.app_id))
                else:
                    infeasible.append((cfg, ctx.app_id))
    # The same config can be drawn twice for an app; labels agree, so drop nothing.
    return OfflineDataset(tuple(feasible), tuple(infeasible), {c.app_id: c for c in contexts})


def select_training_subset(ds: OfflineDataset, max_feasible: int = 8000) -> OfflineDataset:
    """Keep the ``max_feasible`` highest-latency feasible points per app, plus all infeasible."""
    if max_feasible < 1:
        raise DatasetError("max_feasible must be >= 1")
    keep: set[int] = set()
    for app in ds.apps:
        idx = [i for i, d in enumerate(ds.feasible) if d.app_id == app]
        idx.sort(key=lambda i: -ds.feasible[i].latency_ms)  # stable: ties keep insertion order
        keep.update(idx[:max_feasible])
    return OfflineDataset(tuple(d for i, d in enumerate(ds.feasible) if i in keep),
                          ds.infeasible, ds.apps)


def split_validation(ds: OfflineDataset, fraction: float = 0.2) -> DatasetSplit:
    """Hold out, per app, the ceil(fraction * N) lowest-latency feasible points."""
    if not 0 < fraction < 1:
        raise DatasetError("fraction must lie in (0, 1)")
    val_idx: set[int] = set()
    for app in ds.apps:
        idx = [i for i, d in enumerate(ds.feasible) if d.app_id == app]
        if len(idx) < 5:
            raise DatasetError(f"app {app!r} has {len(idx)} feasible points; need >= 5 to split")
        idx.sort(key=lambda i: ds.feasible[i].latency_ms)
        val_idx.update(idx[:math.ceil(fraction * len(idx))])
    train = tuple(d for i, d in enumerate(ds.feasible) if i not in val_idx)
    val = tuple(d for i, d in enumerate(ds.feasible) if i in val_idx)
    return DatasetSplit(train, val, ds.infeasible, ds.apps)


def save(ds: OfflineDataset, space: DesignSpace, path: str | Path) -> None:
    """Write one record per design: app_id, x1..xK, feasible, latency (empty if infeasible)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["app_id", *(f"x{k + 1}" for k in range(space.K)), "feasible", "latency"])
        for d in ds.feasible:
            w.writerow([d.app_id, *d.config.indices, 1, repr(d.latency_ms)])
        for cfg, app in ds.infeasible:
            w.writerow([app, *cfg.indices, 0, ""])
    tmp.replace(path)


def load(path: str | Path, space: DesignSpace,
         contexts: Mapping[str, ContextVector]) -> OfflineDataset:
    """Parse a dataset file; every app id must be present in ``contexts``."""
    feasible, infeasible, apps = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    expected = ["app_id", *(f"x{k + 1}" for k in range(space.K)), "feasible", "latency"]
    if not rows or rows[0] != expected:
        raise DatasetParseError(path, 1, f"header must be {','.join(expected)}")
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != space.K + 3:
            raise DatasetParseError(path, lineno, f"expected {space.K + 3} fields, got {len(row)}")
        app, *idx, flag, lat = row
        try:
            cfg = space.validate(tuple(int(v) for v in idx))
        except ValueError as exc:
            raise DatasetParseError(path, lineno, f"bad config: {exc}") from None
        if app not in contexts:
            raise DatasetError(f"{path}:{lineno}: unknown app_id {app!r}")
        apps.setdefault(app, contexts[app])
        if flag == "1":
            try:
                latency = float(lat)
            except ValueError:
                raise DatasetParseError(path, lineno, f"bad latency {lat!r}") from None
            if not (math.isfinite(latency) and latency > 0):
                raise DatasetParseError(path, lineno, f"latency must be finite and > 0, got {lat!r}")
            feasible.append(LabeledDesign(cfg, latency, app))
        elif flag == "0":
            if lat != "":
                raise DatasetError(f"{path}:{lineno}: infeasible record carries a latency")
            infeasible.append((cfg, app))
        else:
            raise DatasetParseError(path, lineno, f"feasible flag must be 0 or 1, got {flag!r}")
    return OfflineDataset(tuple(feasible), tuple(infeasible), apps)


def to_arrays(records: Sequence[LabeledDesign]) -> tuple[np.ndarray, np.ndarray]:
    """(n, K) int64 configs and (n,) latencies."""
    if not records:
        return np.zeros((0, 0), dtype=np.int64), np.zeros(0)
    X = np.asarray([d.config.indices for d in records], dtype=np.int64)
    return X, np.asarray([d.latency_ms for d in records], dtype=np.float64)

