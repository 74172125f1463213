"""Per-request key/value cache covering backbone and insertion layers."""

from __future__ import annotations

import numpy as np


class CacheError(RuntimeError):
    pass


class KVSlot:
    """Append-only keys/values for one attention layer, shaped [B, H, T, dh]."""

    __slots__ = ("k", "v")

    def __init__(self):
        self.k = None
        self.v = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray):
        if self.k is None:
            self.k, self.v = k, v
            return
        if k.shape[:2] != self.k.shape[:2] or k.shape[3] != self.k.shape[3]:
            raise CacheError(f"cache shape mismatch: have {self.k.shape}, appending {k.shape}")
        self.k = np.concatenate([self.k, k], axis=2)
        self.v = np.concatenate([self.v, v], axis=2)


class KVCache:
    """Entries keyed by ("backbone", i) or ("insertion", j), one per active layer."""

    def __init__(self):
        self.entries: dict[tuple[str, int], KVSlot] = {}

    def slot(self, kind: str, index: int) -> KVSlot:
        key = (kind, index)
        if key not in self.entries:
            self.entries[key] = KVSlot()
        return self.entries[key]

    @property
    def length(self) -> int:
        lengths = {s.length for s in self.entries.values()}
        if not lengths:
            return 0
        if len(lengths) != 1:
            raise CacheError(f"incoherent cache lengths {sorted(lengths)}")
        return lengths.pop()

    def check_coherent(self, n_backbone: int, n_insertion: int) -> bool:
        want = {("backbone", i) for i in range(n_backbone)} | {("insertion", j) for j in range(n_insertion)}
        if set(self.entries) != want:
            return False
        try:
            self.length
        except CacheError:
            return False
        return True
