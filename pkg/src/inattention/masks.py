"""Attention visibility patterns and per-row attended counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("dense", "sliding", "inattention")


@dataclass(frozen=True)
class MaskSpec:
    """Which keys each query row may see.

    ``dense`` is the causal mask, ``sliding`` is causal restricted to the last
    ``window`` earlier positions (plus the diagonal), ``inattention`` is the
    single-query inference mask where the final position sees all ``T`` keys.
    """

    kind: str
    T: int
    window: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.kind == "sliding":
            if self.window is None or self.window < 1:
                raise ValueError("sliding mask needs window >= 1")
        elif self.window is not None:
            raise ValueError(f"{self.kind} mask takes no window")

    @classmethod
    def parse(cls, text: str, T: int) -> "MaskSpec":
        """Parse ``dense``, ``inattention`` or ``sliding:<w>``."""
        if text.startswith("sliding:"):
            return cls("sliding", T, int(text.split(":", 1)[1]))
        return cls(text, T)

    @property
    def query_positions(self) -> np.ndarray:
        if self.kind == "inattention":
            return np.array([self.T - 1])
        return np.arange(self.T)

    def sigma(self, t: int) -> int:
        """Attended-key count for the query at position ``t``."""
        if not 0 <= t < self.T:
            raise IndexError(f"position {t} outside [0, {self.T})")
        if self.kind == "sliding":
            return 1 + min(t, self.window)
        return t + 1

    def row_counts(self) -> list[int]:
        return [self.sigma(int(t)) for t in self.query_positions]

    def visible(self) -> np.ndarray:
        """Boolean matrix [queries x T], True where the key is attended."""
        q = self.query_positions[:, None]
        k = np.arange(self.T)[None, :]
        vis = k <= q
        if self.kind == "sliding":
            vis &= (q - k) <= self.window
        return vis


def causal_visibility(q_pos: np.ndarray, k_pos: np.ndarray, window: int | None = None) -> np.ndarray:
    q = np.asarray(q_pos)[:, None]
    k = np.asarray(k_pos)[None, :]
    vis = k <= q
    if window is not None:
        vis &= (q - k) <= window
    return vis
