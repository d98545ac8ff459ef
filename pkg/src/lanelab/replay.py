"""Replay buffer with proportional sampling over a SumTree of importance ratios."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np


class SumTree:
    """Array-backed binary tree whose internal nodes hold sums of leaf priorities.

    The leaf layer is padded to the next power of two so leaves sit in array
    order and prefix-sum intervals follow leaf index order.  Node i has
    children 2i+1 and 2i+2; updates and descents are O(log N).
    """

    REBUILD_EVERY = 1_000_000  # exact bottom-up rebuild to cancel float drift

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.n_leaves = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self.n_leaves - 1)
        self._ops = 0

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def get(self, leaf: int) -> float:
        return float(self.nodes[self.n_leaves - 1 + leaf])

    def set(self, leaf: int, value: float) -> None:
        if not (0 <= leaf < self.capacity):
            raise IndexError(f"leaf {leaf} out of range")
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"priority must be finite and >= 0, got {value}")
        idx = self.n_leaves - 1 + leaf
        change = value - self.nodes[idx]
        self.nodes[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] += change
        self._ops += 1
        if self._ops >= self.REBUILD_EVERY:
            self.rebuild()

    def rebuild(self) -> None:
        """Recompute every internal node exactly from the leaves."""
        for i in range(self.n_leaves - 2, -1, -1):
            self.nodes[i] = self.nodes[2 * i + 1] + self.nodes[2 * i + 2]
        self._ops = 0

    def find_prefix(self, value: float) -> int:
        """Leaf index whose cumulative-priority interval contains `value`."""
        idx = 0
        n = len(self.nodes)
        while 2 * idx + 1 < n:
            left = 2 * idx + 1
            if value <= self.nodes[left]:
                idx = left
            else:
                value -= self.nodes[left]
                idx = left + 1
        return idx - (self.n_leaves - 1)

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Vectorized i.i.d. proportional draws (with replacement)."""
        if self.total <= 0:
            raise ValueError("cannot sample from an empty tree")
        values = rng.random(batch) * self.nodes[0]
        idx = np.zeros(batch, dtype=np.int64)
        levels = self.n_leaves.bit_length() - 1
        for _ in range(levels):
            left = 2 * idx + 1
            go_left = values <= self.nodes[left]
            values = np.where(go_left, values, values - self.nodes[left])
            idx = np.where(go_left, left, left + 1)
        return idx - (self.n_leaves - 1)


class ReplayBuffer:
    """Ring buffer of transitions with priorities equal to importance ratios.

    Oldest entries are evicted once full.  Entries are addressed by monotonously
    increasing ids so stale handles are detectable after eviction.  Field
    storage is struct-of-arrays, laid out from the first inserted transition.
    """

    def __init__(self, capacity: int, warmup: int = 10_000):
        self.capacity = capacity
        self.warmup = warmup
        self.tree = SumTree(capacity)
        self.size = 0
        self.next_id = 0
        self._fields: Optional[dict] = None
        self._scalar_fields: Optional[list] = None

    def _allocate(self, t) -> None:
        self._fields = {}
        self._scalar_fields = []
        for f in dataclasses.fields(t):
            v = getattr(t, f.name)
            if isinstance(v, np.ndarray):
                self._fields[f.name] = np.zeros((self.capacity,) + v.shape, dtype=v.dtype)
            elif isinstance(v, (bool, np.bool_)):
                self._fields[f.name] = np.zeros(self.capacity, dtype=bool)
                self._scalar_fields.append(f.name)
            else:
                self._fields[f.name] = np.zeros(self.capacity, dtype=np.float64)
                self._scalar_fields.append(f.name)

    def insert(self, t, rho: float) -> int:
        """Store a transition with priority rho; returns its id."""
        if not math.isfinite(rho) or rho < 0:
            raise ValueError(f"rho must be finite and >= 0, got {rho}")
        if self._fields is None:
            self._allocate(t)
        slot = self.next_id % self.capacity
        for name, arr in self._fields.items():
            arr[slot] = getattr(t, name)
        self.tree.set(slot, rho)
        self.next_id += 1
        self.size = min(self.size + 1, self.capacity)
        return self.next_id - 1

    @property
    def is_warm(self) -> bool:
        return self.size >= self.warmup

    def _slot(self, id_: int) -> int:
        if not (self.next_id - self.size <= id_ < self.next_id):
            raise IndexError(f"stale or unknown transition id {id_}")
        return id_ % self.capacity

    def rho(self, id_: int) -> float:
        return self.tree.get(self._slot(id_))

    def update_priority(self, id_: int, rho: float) -> None:
        if not math.isfinite(rho) or rho < 0:
            raise ValueError(f"rho must be finite and >= 0, got {rho}")
        self.tree.set(self._slot(id_), rho)

    def mean_priority(self) -> float:
        """Average importance ratio over live entries."""
        if self.size == 0:
            raise ValueError("empty buffer has no mean priority")
        return self.tree.total / self.size

    def sample_proportional(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Ids of `batch` i.i.d. draws with P(i) proportional to rho_i."""
        if self.size < self.warmup:
            raise ValueError(f"buffer below warmup ({self.size} < {self.warmup})")
        slots = self.tree.sample(batch, rng)
        return np.array([self._id_for_slot(int(s)) for s in slots], dtype=np.int64)

    def _id_for_slot(self, slot: int) -> int:
        head = self.next_id % self.capacity
        if self.size < self.capacity:
            return slot
        return self.next_id - self.capacity + (slot - head) % self.capacity

    def get_field(self, name: str, ids) -> np.ndarray:
        slots = np.asarray([self._slot(int(i)) for i in ids])
        return self._fields[name][slots]

    def get_batch(self, ids) -> dict:
        """Stacked field arrays for the given ids."""
        slots = np.asarray([self._slot(int(i)) for i in ids])
        return {name: arr[slots] for name, arr in self._fields.items()}
