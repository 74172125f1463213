"""Parameter containers: a tiny tree of named tensors."""

from __future__ import annotations

import copy
import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Anything holding Tensors, Modules, or lists of Modules as attributes.

    Parameters are discovered by attribute order, so names are stable and
    ``named_parameters`` is deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_trainable(self, flag: bool):
        for t in self.parameters():
            t.trainable = flag
            t.needs_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=state[name].dtype)

    def astype(self, dtype):
        """Return a deep copy whose parameters are cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for t in clone.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return clone

    def clone(self):
        return copy.deepcopy(self)


def hash_tensors(named: Iterator[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in named:
        h.update(name.encode())
        h.update(str(t.data.dtype).encode())
        h.update(np.asarray(t.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
