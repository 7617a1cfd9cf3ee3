"""Named parameter storage, initialisation and seeded randomness."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from .tensor import DEFAULT_DTYPE, Tensor


def child_rng(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of a run's root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF,
                                                         zlib.crc32(name.encode())]))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self._params: dict[str, Tensor] = {}
        self.dtype = dtype

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}", key=name)
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def get(self, name: str, default=None) -> Tensor | None:
        return self._params.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self, prefix: str = "") -> int:
        """Total number of scalar parameters, optionally under ``prefix``."""
        return int(sum(t.size for n, t in self._params.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=self.dtype)
            if arr.shape != t.shape:
                raise ConfigError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}", key=n)
            t.data = arr.copy()

    def checksum(self) -> int:
        h = 0
        for n, t in self._params.items():
            h = zlib.crc32(n.encode(), h)
            h = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), h)
        return h
