"""Synthetic instruction strings for the language channel.

A sparse first-order Markov chain over a small vocabulary: every token has a
handful of allowed successors, so next-token prediction is learnable but not
trivial. Token 0 starts every string.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

BOS = 0


@dataclass(frozen=True)
class Grammar:
    vocab_size: int = 32
    branching: int = 3
    length: int = 12
    seed: int = 1234

    def __post_init__(self):
        if self.vocab_size < 2 or not 1 <= self.branching < self.vocab_size or self.length < 2:
            raise ConfigError("grammar needs vocab >= 2, 1 <= branching < vocab, length >= 2")

    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        """Successor table ``(V, branching)`` and its probabilities."""
        rng = np.random.default_rng(self.seed)
        V, b = self.vocab_size, self.branching
        succ = np.stack([rng.choice(np.arange(1, V), size=b, replace=False) for _ in range(V)])
        probs = rng.dirichlet(np.full(b, 2.0), size=V)
        return succ, probs

    def sample(self, rng_seed) -> np.ndarray:
        """One string of ``length`` ids starting with ``BOS``."""
        succ, probs = self.transitions()
        rng = np.random.default_rng(rng_seed)
        ids = [BOS]
        for _ in range(self.length - 1):
            prev = ids[-1]
            ids.append(int(succ[prev, rng.choice(self.branching, p=probs[prev])]))
        return np.asarray(ids, dtype=np.int64)


def split_next_token(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``ids[:-1]`` and next-token targets ``ids[1:]``."""
    ids = np.asarray(ids, dtype=np.int64)
    return ids[:-1], ids[1:]
