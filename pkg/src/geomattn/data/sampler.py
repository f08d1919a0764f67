"""P x K identity batch sampling for batch-hard triplet mining."""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, Iterator, List, Sequence

import numpy as np


class PKSampler:
    """Yield batches of ``P`` identities with ``K`` images each.

    One epoch is one pass over the images: each identity's images are shuffled
    and cut into chunks of ``K``, and every batch takes one chunk from each of
    ``P`` identities that still have chunks left. When fewer than ``P`` such
    identities remain, the last batch is topped up with other identities so
    that every identity appears at least once. Identities with fewer than
    ``K`` images are sampled with replacement.
    """

    def __init__(self, labels: Sequence[int], P: int, K: int, seed: int = 0):
        if P < 2 or K < 2:
            raise ValueError(f"P and K must both be >= 2, got P={P}, K={K}")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.by_id: Dict[int, np.ndarray] = {}
        groups = defaultdict(list)
        for i, y in enumerate(self.labels):
            groups[int(y)].append(i)
        self.by_id = {k: np.array(v) for k, v in sorted(groups.items())}
        self.ids = np.array(sorted(self.by_id))
        if len(self.ids) < P:
            raise ValueError(f"only {len(self.ids)} identities available, need P={P}")
        self.P, self.K = P, K
        self.rng = np.random.default_rng(seed)

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def _draw(self, identity: int) -> np.ndarray:
        pool = self.by_id[identity]
        return self.rng.choice(pool, size=self.K, replace=len(pool) < self.K)

    def _chunks(self, identity: int) -> List[np.ndarray]:
        pool = self.by_id[identity]
        if len(pool) < self.K:
            return [self._draw(identity)]
        shuffled = self.rng.permutation(pool)
        n = len(pool) // self.K
        return [shuffled[i * self.K:(i + 1) * self.K] for i in range(n)]

    def epoch(self) -> List[np.ndarray]:
        chunks = {int(i): self._chunks(int(i)) for i in self.ids}
        batches = []
        while chunks:
            live = np.array(sorted(chunks))
            if len(live) >= self.P:
                group = list(self.rng.choice(live, size=self.P, replace=False))
            else:
                rest = np.setdiff1d(self.ids, live)
                group = list(live) + list(self.rng.choice(rest, size=self.P - len(live),
                                                          replace=False))
            parts = []
            for i in group:
                i = int(i)
                if i in chunks:
                    parts.append(chunks[i].pop())
                    if not chunks[i]:
                        del chunks[i]
                else:
                    parts.append(self._draw(i))
            batches.append(np.concatenate(parts))
            if len(live) < self.P:
                break
        return batches

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield from self.epoch()


def pk_sampler(labels: Sequence[int], P: int, K: int, seed: int = 0) -> Iterator[np.ndarray]:
    """Endless stream of index batches; see :class:`PKSampler`."""
    return iter(PKSampler(labels, P, K, seed))
