"""Named trainable parameters and reproducible random state."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_array


@dataclass(frozen=True)
class RngState:
    """Seed plus algorithm tag; same state gives the same stream anywhere."""

    seed: int
    algorithm: str = "pcg64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ConfigurationError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, tag: str) -> "RngState":
        """A decorrelated child state, stable across platforms."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode("utf-8")).digest()
        return RngState(int.from_bytes(digest[:8], "little"), self.algorithm)


def hash_seed(key: str) -> int:
    """Platform-stable 64-bit seed derived from a string key."""
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


class ParameterStore:
    """Ordered map of name -> (value, gradient, regularizable, frozen).

    Iteration order is insertion order and is what checkpoint files and
    the optimizer walk, so runs are reproducible. One trainer owns a store
    at a time; concurrent read-only inference is safe.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.regularizable: dict[str, bool] = {}
        self.frozen: dict[str, bool] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def add(self, name: str, value, regularizable: bool = True, frozen: bool = False):
        if name in self.values:
            raise ConfigurationError(f"parameter {name!r} already exists")
        arr = as_array(value).copy()
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError(f"parameter {name!r} has non-finite entries")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.regularizable[name] = regularizable
        self.frozen[name] = frozen

    def get(self, name: str, shape: tuple | None = None) -> np.ndarray:
        if name not in self.values:
            raise DimensionError(f"unknown parameter {name!r}")
        v = self.values[name]
        if shape is not None and v.shape != tuple(shape):
            raise DimensionError(f"parameter {name!r} has shape {v.shape}, expected {tuple(shape)}")
        return v

    def tensor(self, name: str, shape: tuple | None = None) -> Tensor:
        """Graph leaf for a parameter; backward() flushes into grads[name]."""
        return Tensor(self.get(name, shape), slot=(self, name))

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def freeze_all(self):
        for name in self.frozen:
            self.frozen[name] = True

    def trainable_names(self) -> list[str]:
        return [n for n in self.values if not self.frozen[n]]


def init_linear(store: ParameterStore, name: str, out_dim: int, in_dim: int,
                rng: np.random.Generator):
    """Weight uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], bias zero."""
    bound = 1.0 / np.sqrt(in_dim)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(out_dim, in_dim)))
    store.add(f"{name}.b", np.zeros(out_dim), regularizable=False)


def init_embedding(store: ParameterStore, name: str, vocab: int, dim: int,
                   rng: np.random.Generator):
    bound = 1.0 / np.sqrt(dim)
    store.add(name, rng.uniform(-bound, bound, size=(vocab, dim)))


def init_gru(store: ParameterStore, prefix: str, in_dim: int, hidden_dim: int,
             rng: np.random.Generator):
    """Reset/update/candidate gate parameters for one GRU cell."""
    for gate in ("r", "z", "h"):
        wb = 1.0 / np.sqrt(in_dim)
        ub = 1.0 / np.sqrt(hidden_dim)
        store.add(f"{prefix}.w_{gate}", rng.uniform(-wb, wb, size=(hidden_dim, in_dim)))
        store.add(f"{prefix}.u_{gate}", rng.uniform(-ub, ub, size=(hidden_dim, hidden_dim)))
        store.add(f"{prefix}.b_{gate}", np.zeros(hidden_dim), regularizable=False)
