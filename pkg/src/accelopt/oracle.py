"""Synthetic ground-truth simulator with metered queries.

The latency model is a roofline stand-in: the slower of compute time and DRAM
traffic time, plus per-op dispatch overhead, with a multiplicative step when the
model parameters do not fit in on-chip memory. Feasibility combines
structural rules (parameter and instruction capacity, and a dispatch limit
on how many PE lanes the cores can schedule) with a hash band that
emulates unpredictable compile/mapping failures.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .contexts import ContextVector
from .design_space import AcceleratorConfig, DesignSpace

REQUIRED_PARAMS = (
    "pes_x", "pes_y", "pe_memory", "cores", "core_memory", "compute_lanes",
    "instruction_memory", "parameter_memory", "activation_memory", "dram_bandwidth_gbps",
)

MB = 1024.0 * 1024.0
KB = 1024.0

DEFAULT_AREA = {
    "base": 1.0,
    "lane": 0.09,           # per PE compute lane
    "pe_memory_mb": 0.16,   # per MB of PE memory, summed over PEs
    "core": 0.09,           # per core
    "core_memory_mb": 0.08, # per MB of core memory, summed over cores
    "instruction_kb": 0.05,
    "parameter_kb": 0.05,
    "activation_kb": 0.05,
    "bandwidth_gbps": 0.03,
}

DEFAULT_LATENCY = {
    "ops_per_s": 2.6e8,             # compute ops per second for a single lane
    "lane_exponent": 0.5,           # throughput ~ (PEs * lanes) ** lane_exponent
    "core_scale": 8.0,
    "core_exponent": 0.25,          # throughput ~ (cores / core_scale) ** core_exponent
    "dw_penalty": 0.25,             # utilization loss per extra lane, depthwise share
    "activation_bytes_per_op": 2e-3,
    "activation_ref_kb": 4.0,
    "parameter_ref_kb": 4.0,
    "refetch_factor": 8.0,          # parameter re-streaming when the model does not fit
    "step_penalty": 1.6,            # multiplicative latency step when it does not fit
    "op_overhead_ms": 0.4,
    "fit_slack": 0.3,               # below slack * model size: cannot be mapped at all
    "instr_slack": 0.15,            # instruction storage needed, fraction of binary size
    "dispatch_free_lanes": 100.0,   # PE lanes that map without scheduling support
    "lanes_per_core": 1.0,          # beyond that, each core can schedule this many PE lanes
}


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    area_coefficients: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_AREA))
    latency_model_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_LATENCY))
    infeasibility_hash_rate: float = 0.25
    seed: int = 0
    query_cost_seconds: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.infeasibility_hash_rate < 1.0:
            raise OracleError("infeasibility_hash_rate must lie in [0, 1)")
        for table, defaults in ((self.area_coefficients, DEFAULT_AREA),
                                (self.latency_model_weights, DEFAULT_LATENCY)):
            missing = set(defaults) - set(table)
            if missing:
                raise OracleError(f"missing coefficients: {sorted(missing)}")
            for k, v in table.items():
                if not np.isfinite(v) or v <= 0:
                    raise OracleError(f"coefficient {k!r} must be finite and positive, got {v}")
        if not self.query_cost_seconds > 0:
            raise OracleError("query_cost_seconds must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area_coefficients"] = dict(self.area_coefficients)
        d["latency_model_weights"] = dict(self.latency_model_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "OracleSpec":
        return cls(
            area_coefficients=dict(d.get("area_coefficients", DEFAULT_AREA)),
            latency_model_weights=dict(d.get("latency_model_weights", DEFAULT_LATENCY)),
            infeasibility_hash_rate=float(d.get("infeasibility_hash_rate", 0.25)),
            seed=int(d.get("seed", 0)),
            query_cost_seconds=float(d.get("query_cost_seconds", 1.0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "OracleSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class SimResult:
    feasible: bool
    area_mm2: float
    latency_ms: float | None = None

    def __post_init__(self):
        if self.feasible and (self.latency_ms is None or not self.latency_ms > 0):
            raise OracleError("feasible result needs a positive latency")
        if not self.feasible and self.latency_ms is not None:
            raise OracleError("infeasible result must not carry a latency")


class QueryLedger:
    """Counts simulator queries per phase. Thread-safe; counts only grow."""

    def __init__(self, cost_seconds: float = 1.0):
        self.cost_seconds = float(cost_seconds)
        self._counts: dict[str, int] = {}
        self._phase = "default"
        self._lock = threading.Lock()

    @property
    def current_phase(self) -> str:
        return self._phase

    @contextmanager
    def phase(self, name: str) -> Iterator["QueryLedger"]:
        prev = self._phase
        self._phase = name
        try:
            yield self
        finally:
            self._phase = prev

    def record(self, n: int = 1, phase: str | None = None) -> None:
        if n < 0:
            raise ValueError("query count increments must be non-negative")
        with self._lock:
            key = phase or self._phase
            self._counts[key] = self._counts.get(key, 0) + n

    def count(self, phase: str | None = None) -> int:
        with self._lock:
            if phase is None:
                return sum(self._counts.values())
            return self._counts.get(phase, 0)

    @property
    def total(self) -> int:
        return self.count()

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


def ledger_report(ledger: QueryLedger) -> list[dict]:
    """Per-phase rows of queries and simulated seconds, plus a ``total`` row."""
    rows = [{"phase": p, "queries": n, "sim_seconds": n * ledger.cost_seconds}
            for p, n in sorted(ledger.counts().items())]
    total = sum(r["queries"] for r in rows)
    rows.append({"phase": "total", "queries": total, "sim_seconds": total * ledger.cost_seconds})
    return rows


def ledger_csv(ledger: QueryLedger) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "queries", "sim_seconds"])
    for r in ledger_report(ledger):
        w.writerow([r["phase"], r["queries"], repr(float(r["sim_seconds"]))])
    return buf.getvalue()


def read_ledger_csv(path: str | Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["phase"]: int(r["queries"]) for r in csv.DictReader(fh) if r["phase"] != "total"}


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _context_salt(context: ContextVector) -> int:
    h = np.array([0x243F6A8885A308D3], dtype=np.uint64)
    for v in context.raw:
        h = _mix64(h ^ np.array([int(round(v)) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)) + _GOLDEN
    return int(h[0])


def hash_uniform(seed: int, salt: int, X: np.ndarray) -> np.ndarray:
    """Deterministic per-row uniform in [0, 1) from (seed, salt, indices)."""
    X = np.asarray(X, dtype=np.int64)
    with np.errstate(over="ignore"):
        h = np.full(X.shape[0], np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
        h = _mix64(h ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)) + _GOLDEN
        for k in range(X.shape[1]):
            h = _mix64(h ^ X[:, k].astype(np.uint64)) + _GOLDEN
        h = _mix64(h)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _columns(space: DesignSpace, X: np.ndarray) -> dict[str, np.ndarray]:
    missing = [n for n in REQUIRED_PARAMS if n not in space.names]
    if missing:
        raise OracleError(f"design space lacks oracle parameters: {missing}")
    raw = space.raw_matrix(X)
    return {n: raw[:, space.index_of(n)] for n in REQUIRED_PARAMS}


def area_batch(spec: OracleSpec, space: DesignSpace, X: np.ndarray) -> np.ndarray:
    c = _columns(space, X)
    a = spec.area_coefficients
    pes = c["pes_x"] * c["pes_y"]
    return (a["base"]
            + a["lane"] * pes * c["compute_lanes"]
            + a["pe_memory_mb"] * pes * c["pe_memory"] / MB
            + a["core"] * c["cores"]
            + a["core_memory_mb"] * c["cores"] * c["core_memory"] / MB
            + a["instruction_kb"] * c["instruction_memory"] / KB
            + a["parameter_kb"] * c["parameter_memory"] / KB
            + a["activation_kb"] * c["activation_memory"] / KB
            + a["bandwidth_gbps"] * c["dram_bandwidth_gbps"])


def area(spec: OracleSpec, space: DesignSpace, config: AcceleratorConfig) -> float:
    config = space.validate(config)
    return float(area_batch(spec, space, np.asarray([config.indices]))[0])


def _structure(spec: OracleSpec, c: dict[str, np.ndarray], ctx: ContextVector):
    w = spec.latency_model_weights
    on_chip = c["pes_x"] * c["pes_y"] * c["pe_memory"] + c["cores"] * c["core_memory"]
    fits = on_chip >= ctx.param_bytes
    mappable = on_chip >= w["fit_slack"] * ctx.param_bytes
    instr_ok = c["cores"] * c["instruction_memory"] >= w["instr_slack"] * ctx.instr_bytes
    pe_lanes = c["pes_x"] * c["pes_y"] * c["compute_lanes"]
    dispatch_ok = (pe_lanes <= w["dispatch_free_lanes"]) | (pe_lanes <= w["lanes_per_core"] * c["cores"])
    return fits, mappable & instr_ok & dispatch_ok


def latency_batch(spec: OracleSpec, space: DesignSpace, X: np.ndarray,
                  context: ContextVector) -> np.ndarray:
    """Roofline latency in ms for every row, ignoring feasibility."""
    c = _columns(space, X)
    w = spec.latency_model_weights
    lanes = c["compute_lanes"]
    total_ops = context.conv_ops + context.dw_ops + context.ff_ops
    dw_share = context.dw_ops / total_ops if total_ops > 0 else 0.0
    utilization = 1.0 / (1.0 + w["dw_penalty"] * dw_share * (lanes - 1.0))
    throughput = (w["ops_per_s"] * (c["pes_x"] * c["pes_y"] * lanes) ** w["lane_exponent"]
                  * (c["cores"] / w["core_scale"]) ** w["core_exponent"] * utilization)
    compute_ms = 1e3 * context.compute_ops / throughput

    fits, _ = _structure(spec, c, context)
    param_traffic = context.param_bytes * np.where(fits, 1.0, w["refetch_factor"])
    staging = 1.0 + w["parameter_ref_kb"] * KB / c["parameter_memory"]
    act_traffic = (context.compute_ops * w["activation_bytes_per_op"]
                   * np.sqrt(w["activation_ref_kb"] * KB / c["activation_memory"]))
    bytes_per_s = c["dram_bandwidth_gbps"] * 1e9 / 8.0
    memory_ms = 1e3 * (param_traffic * staging + act_traffic) / bytes_per_s

    overhead_ms = w["op_overhead_ms"] * total_ops
    lat = np.maximum(compute_ms, memory_ms) + overhead_ms
    return np.where(fits, lat, lat * w["step_penalty"])


def evaluate_batch(spec: OracleSpec, space: DesignSpace, X: np.ndarray,
                   context: ContextVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unmetered (feasible, latency-or-nan, area) for an (n, K) index matrix."""
    X = space.validate_array(X)
    c = _columns(space, X)
    _, structural_ok = _structure(spec, c, context)
    hashed_ok = hash_uniform(spec.seed, _context_salt(context), X) >= spec.infeasibility_hash_rate
    feasible = structural_ok & hashed_ok
    lat = np.where(feasible, latency_batch(spec, space, X, context), np.nan)
    return feasible, lat, area_batch(spec, space, X)


class Oracle:
    """Metered simulator bound to a spec, a design space and a ledger.

    Every call to :meth:`simulate` or :meth:`simulate_batch` records one query
    per design on the ledger; invalid configs raise before anything is counted.
    """

    def __init__(self, spec: OracleSpec | None = None, space: DesignSpace | None = None,
                 ledger: QueryLedger | None = None):
        from .design_space import default_space

        self.spec = spec or OracleSpec()
        self.space = space or default_space()
        self.ledger = ledger or QueryLedger(self.spec.query_cost_seconds)
        _columns(self.space, np.zeros((1, self.space.K), dtype=np.int64))

    def simulate(self, config: AcceleratorConfig, context: ContextVector) -> SimResult:
        config = self.space.validate(config)
        return self.simulate_batch(np.asarray([config.indices]), context)[0]

    def simulate_batch(self, X: np.ndarray, context: ContextVector) -> list[SimResult]:
        feasible, lat, ar = evaluate_batch(self.spec, self.space, X, context)
        self.ledger.record(len(feasible))
        return [SimResult(bool(f), float(a), float(l) if f else None)
                for f, l, a in zip(feasible, lat, ar)]

    def area(self, config: AcceleratorConfig) -> float:
        return area(self.spec, self.space, config)

    def area_batch(self, X: np.ndarray) -> np.ndarray:
        return area_batch(self.spec, self.space, self.space.validate_array(X))


def simulate(spec: OracleSpec, space: DesignSpace, config: AcceleratorConfig,
             context: ContextVector, ledger: QueryLedger) -> SimResult:
    return Oracle(spec, space, ledger).simulate(config, context)
