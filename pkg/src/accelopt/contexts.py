"""Per-application context vectors used to condition the surrogate and the oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MB = 1024 * 1024

# Fixed divisor for the small op-count columns so they sit near the unit range.
OP_COUNT_SCALE = 100.0

RAW_FIELDS = ("conv_ops", "dw_ops", "ff_ops", "param_bytes", "instr_bytes", "compute_ops")
SUM_NORMALIZED = ("param_bytes", "instr_bytes", "compute_ops")


@dataclass(frozen=True)
class ContextVector:
    app_id: str
    conv_ops: float
    dw_ops: float
    ff_ops: float
    param_bytes: float
    instr_bytes: float
    compute_ops: float
    normalized: tuple[float, ...] = field(default=(), compare=True)

    def __post_init__(self):
        for name in RAW_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"context {self.app_id!r}: {name} must be finite and >= 0, got {v}")
        object.__setattr__(self, "normalized", tuple(float(v) for v in self.normalized))

    @property
    def raw(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, f)) for f in RAW_FIELDS)

    @property
    def features(self) -> np.ndarray:
        if not self.normalized:
            raise ValueError(f"context {self.app_id!r} has not been normalized")
        return np.asarray(self.normalized, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.normalized)


def normalize(contexts: Iterable[ContextVector]) -> dict[str, ContextVector]:
    """Attach feature vectors; large-magnitude columns are divided by their sum over the set."""
    contexts = list(contexts)
    if not contexts:
        return {}
    sums = {f: sum(getattr(c, f) for c in contexts) for f in SUM_NORMALIZED}
    out = {}
    for c in contexts:
        feats = [c.conv_ops / OP_COUNT_SCALE, c.dw_ops / OP_COUNT_SCALE, c.ff_ops / OP_COUNT_SCALE]
        for f in SUM_NORMALIZED:
            feats.append(getattr(c, f) / sums[f] if sums[f] > 0 else 0.0)
        out[c.app_id] = ContextVector(c.app_id, *c.raw, normalized=tuple(feats))
    return out


def _row(app_id, ops, param_mb, instr, compute):
    return ContextVector(app_id, *map(float, ops), param_mb * MB, float(instr), float(compute))


# The nine reference applications: (conv, depthwise, feed-forward) op counts,
# parameter size, instruction bytes, compute ops.
_TABLE = (
    _row("mobilenet_edge", (45, 13, 1), 3.87, 476_736, 1_989_811_168),
    _row("mobilenet_v2", (35, 17, 1), 3.31, 416_032, 609_353_376),
    _row("mobilenet_v3", (32, 15, 17), 5.20, 1_331_360, 449_219_600),
    _row("m4", (32, 13, 2), 6.23, 317_600, 3_471_920_128),
    _row("m5", (47, 27, 0), 2.16, 328_672, 939_752_960),
    _row("m6", (53, 33, 2), 0.41, 369_952, 228_146_848),
    _row("unet", (35, 0, 0), 3.69, 224_992, 13_707_214_848),
    _row("trnn_dec", (0, 0, 19), 19.0, 915_008, 40_116_224),
    _row("trnn_enc", (0, 0, 18), 21.62, 909_696, 45_621_248),
)


def builtin_library() -> dict[str, ContextVector]:
    """The reference applications, normalized over the whole library."""
    return normalize(_TABLE)


def load_contexts(path: str | Path) -> dict[str, ContextVector]:
    """Read a JSON list of objects with ``app_id`` plus the six raw fields."""
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return normalize(ContextVector(r["app_id"], *(float(r[f]) for f in RAW_FIELDS)) for r in rows)


def save_contexts(contexts: Mapping[str, ContextVector], path: str | Path) -> None:
    rows = [{"app_id": c.app_id, **dict(zip(RAW_FIELDS, c.raw))} for c in contexts.values()]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")


def resolve(names: Iterable[str], library: Mapping[str, ContextVector]) -> list[ContextVector]:
    out = []
    for n in names:
        if n not in library:
            raise KeyError(f"unknown application {n!r}; known: {sorted(library)}")
        out.append(library[n])
    return out
