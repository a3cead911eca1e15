"""Discrete accelerator design space: parameter ladders, one-hot codec, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DesignSpaceError(ValueError):
    """Raised for malformed spaces or configs that fall outside them."""


class DecodeError(DesignSpaceError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.levels) < 2:
            raise DesignSpaceError(f"parameter {self.name!r} needs at least 2 levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise DesignSpaceError(f"levels of {self.name!r} must be strictly increasing")

    @property
    def cardinality(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class AcceleratorConfig:
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class DesignSpace:
    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise DesignSpaceError("design space needs at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise DesignSpaceError("parameter names must be unique")

    @property
    def K(self) -> int:
        return len(self.params)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(p.cardinality for p in self.params)

    @property
    def onehot_size(self) -> int:
        return sum(self.cardinalities)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def validate(self, config: AcceleratorConfig | Sequence[int]) -> AcceleratorConfig:
        if not isinstance(config, AcceleratorConfig):
            config = AcceleratorConfig(tuple(config))
        if len(config.indices) != self.K:
            raise DesignSpaceError(
                f"config has {len(config.indices)} indices, space has {self.K} parameters"
            )
        for p, i in zip(self.params, config.indices):
            if not 0 <= i < p.cardinality:
                raise DesignSpaceError(
                    f"index {i} out of range for parameter {p.name!r} (cardinality {p.cardinality})"
                )
        return config

    def validate_array(self, X: np.ndarray) -> np.ndarray:
        """Check an (n, K) integer index matrix; returns it as int64."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.K:
            raise DesignSpaceError(f"expected shape (n, {self.K}), got {X.shape}")
        X = X.astype(np.int64, copy=False)
        card = np.asarray(self.cardinalities)
        bad = (X < 0) | (X >= card)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DesignSpaceError(
                f"index {X[row, col]} out of range for parameter {self.params[col].name!r} "
                f"(cardinality {card[col]})"
            )
        return X

    def raw_values(self, config: AcceleratorConfig) -> dict[str, float]:
        config = self.validate(config)
        return {p.name: p.levels[i] for p, i in zip(self.params, config.indices)}

    def raw_matrix(self, X: np.ndarray) -> np.ndarray:
        """Map an (n, K) index matrix to raw level values, column per parameter."""
        X = self.validate_array(X)
        out = np.empty(X.shape, dtype=np.float64)
        for k, p in enumerate(self.params):
            out[:, k] = np.asarray(p.levels, dtype=np.float64)[X[:, k]]
        return out


def total_size(space: DesignSpace) -> int:
    return math.prod(space.cardinalities)


def encode_onehot(space: DesignSpace, config: AcceleratorConfig | Sequence[int]) -> np.ndarray:
    config = space.validate(config)
    vec = np.zeros(space.onehot_size, dtype=np.float64)
    offset = 0
    for p, i in zip(space.params, config.indices):
        vec[offset + i] = 1.0
        offset += p.cardinality
    return vec


def decode_onehot(space: DesignSpace, vec: Sequence[float]) -> AcceleratorConfig:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (space.onehot_size,):
        raise DecodeError(f"expected vector of length {space.onehot_size}, got shape {vec.shape}")
    indices = []
    offset = 0
    for b, p in enumerate(space.params):
        block = vec[offset : offset + p.cardinality]
        offset += p.cardinality
        ones = np.flatnonzero(block == 1.0)
        if len(ones) != 1 or np.count_nonzero(block) != 1:
            raise DecodeError(f"block {b} ({p.name!r}) is not one-hot: {block.tolist()}")
        indices.append(int(ones[0]))
    return AcceleratorConfig(tuple(indices))


def sample_uniform(space: DesignSpace, rng_seed, n: int) -> list[AcceleratorConfig]:
    """Draw n configs, each index uniform and independent per parameter.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator`` owned by the caller.
    """
    return [AcceleratorConfig(tuple(row)) for row in sample_uniform_array(space, rng_seed, n)]


def sample_uniform_array(space: DesignSpace, rng_seed, n: int) -> np.ndarray:
    if n < 1:
        raise DesignSpaceError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return rng.integers(0, np.asarray(space.cardinalities), size=(n, space.K), dtype=np.int64)


KB = 1024

# Cardinalities follow the ten-parameter template; the raw ladders are a frozen
# stand-in consistent with the published best configurations (v1).
DEFAULT_LEVELS_VERSION = 1
_DEFAULT_PARAMS = (
    ("pes_x", tuple(range(1, 11))),
    ("pes_y", tuple(range(1, 11))),
    ("pe_memory", tuple(32 * KB * 2**i for i in range(7))),
    ("cores", tuple(2 * 2**i for i in range(7))),
    ("core_memory", tuple(2 * KB * 2**i for i in range(11))),
    ("compute_lanes", tuple(range(1, 11))),
    ("instruction_memory", tuple(4 * KB * 2**i for i in range(4))),
    ("parameter_memory", tuple(1 * KB * 2**i for i in range(5))),
    ("activation_memory", tuple(256 * 2**i for i in range(7))),
    ("dram_bandwidth_gbps", (5, 10, 15, 20, 25, 30)),
)


def default_space() -> DesignSpace:
    return DesignSpace(tuple(ParamSpec(name, tuple(float(v) for v in levels))
                             for name, levels in _DEFAULT_PARAMS))


def load_space(path: str | Path) -> DesignSpace:
    """Read a space file: one ``name,level1,level2,...`` record per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    params = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, *levels = [f.strip() for f in line.split(",")]
        try:
            values = tuple(float(v) for v in levels)
        except ValueError as exc:
            raise DesignSpaceError(f"{path}:{lineno}: bad level value ({exc})") from None
        params.append(ParamSpec(name, values))
    return DesignSpace(tuple(params))


def save_space(space: DesignSpace, path: str | Path) -> None:
    lines = [",".join([p.name, *(repr(v) for v in p.levels)]) for p in space.params]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
