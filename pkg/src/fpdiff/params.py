"""Named parameter store with optimizer moment buffers."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Parameter


class ParamStore:
    """Flat registry of named Parameters plus per-name optimizer moments.

    Names are unique; shapes are fixed at creation (updates happen in place
    through ``assign``). Insertion order is preserved so serialization is
    deterministic.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def create(self, name, data) -> Parameter:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def assign(self, name, data):
        """Overwrite a parameter's values; the shape must not change."""
        p = self[name]
        arr = np.asarray(data, dtype=p.data.dtype)
        if arr.shape != p.data.shape:
            raise UsageError(
                f"shape change for {name!r}: {p.data.shape} -> {arr.shape}")
        p.data[...] = arr

    def total_count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def randomize(self, rng, scale=0.05):
        """Overwrite every parameter with small Gaussian noise.

        Gradient checks use this to break the zero-init symmetry of gates
        and output heads; never called by training code.
        """
        for p in self._params.values():
            p.data[...] = rng.normal(0.0, scale, size=p.data.shape).astype(p.data.dtype)
