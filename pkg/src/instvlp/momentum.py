"""EMA shadow parameters and the FIFO queue of momentum representations."""

from __future__ import annotations

import numpy as np


class ShapeDriftError(RuntimeError):
    pass


def copy_params(params) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=np.float64) for k, v in params.items()}


def ema_update(base_params, shadow, m: float) -> None:
    """shadow <- m * shadow + (1 - m) * base, for every parameter, in place."""
    if set(base_params) != set(shadow):
        raise ShapeDriftError("momentum model and base model have different parameter names")
    for name, theta in base_params.items():
        xi = shadow[name]
        if np.shape(theta) != np.shape(xi):
            raise ShapeDriftError(f"shape drift in {name!r}: base {np.shape(theta)} vs shadow {np.shape(xi)}")
        shadow[name] = m * xi + (1.0 - m) * theta


class RepresentationQueue:
    """Fixed-capacity FIFO ring buffer of D-vectors."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = np.zeros((self.capacity, self.dim))
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def enqueue(self, reps) -> None:
        reps = np.asarray(reps, dtype=np.float64).reshape(-1, self.dim)
        if self.capacity == 0:
            return
        if len(reps) > self.capacity:
            reps = reps[-self.capacity :]
        for row in reps:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.capacity, self.size + len(reps))

    def contents(self) -> np.ndarray:
        """Entries oldest first."""
        if self.size < self.capacity:
            return self.buffer[: self.size].copy()
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]])

    def state(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "cursor": self.cursor, "size": self.size}

    @classmethod
    def from_state(cls, state: dict, buffer: np.ndarray) -> "RepresentationQueue":
        q = cls(state["capacity"], state["dim"])
        q.buffer = np.array(buffer, dtype=np.float64).reshape(q.capacity, q.dim)
        q.cursor = int(state["cursor"])
        q.size = int(state["size"])
        return q
