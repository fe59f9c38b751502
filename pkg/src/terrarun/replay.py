"""Ring buffer of episode traces with k-aligned segment sampling.

Episodes are stored whole, so a sampled segment can never straddle a
terminate-and-reset boundary. Eviction drops the oldest episode first once
the total step count exceeds capacity.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .autodiff import ConfigurationError, F32
from .rssm import TrajectorySegment


class ReplayBuffer:
    def __init__(self, capacity_steps: int = 2_000_000):
        if capacity_steps < 1:
            raise ConfigurationError("capacity must be positive")
        self.capacity = int(capacity_steps)
        self.episodes: deque[dict] = deque()
        self.total_steps = 0

    def add_episode(self, proprio: np.ndarray, depth: np.ndarray,
                    actions: np.ndarray):
        if not (len(proprio) == len(depth) == len(actions)):
            raise ConfigurationError("episode streams must have equal length")
        if len(proprio) == 0:
            return
        self.episodes.append({
            "proprio": np.asarray(proprio, dtype=F32),
            "depth": np.asarray(depth, dtype=F32),
            "actions": np.asarray(actions, dtype=F32),
        })
        self.total_steps += len(proprio)
        while self.total_steps > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.popleft()
            self.total_steps -= len(dropped["proprio"])

    def _window_counts(self, length: int, k: int) -> np.ndarray:
        """Number of valid k-aligned windows of `length` per episode."""
        counts = np.empty(len(self.episodes), dtype=np.int64)
        for i, ep in enumerate(self.episodes):
            slack = len(ep["proprio"]) - length
            counts[i] = 0 if slack < 0 else slack // k + 1
        return counts

    def num_windows(self, length: int, k: int) -> int:
        return int(self._window_counts(length, k).sum())

    def sample_segment(self, rng: np.random.Generator, length: int,
                       k: int) -> TrajectorySegment | None:
        """Uniformly random valid window, or None if no episode is long enough."""
        if length % k != 0:
            raise ConfigurationError("segment length must be a multiple of k")
        counts = self._window_counts(length, k)
        total = counts.sum()
        if total == 0:
            return None
        pick = int(rng.integers(0, total))
        ep_idx = int(np.searchsorted(np.cumsum(counts), pick, side="right"))
        offset_idx = pick - int(np.cumsum(counts)[ep_idx - 1]) if ep_idx else pick
        start = offset_idx * k
        ep = self.episodes[ep_idx]
        return TrajectorySegment(
            proprio=ep["proprio"][start:start + length],
            depth=ep["depth"][start:start + length],
            actions=ep["actions"][start:start + length],
        )

    def sample_batch(self, rng: np.random.Generator, batch: int, length: int,
                     k: int):
        """Stacked [B, L, ...] arrays, or None as the empty-batch signal."""
        segments = []
        for _ in range(batch):
            seg = self.sample_segment(rng, length, k)
            if seg is None:
                return None
            segments.append(seg)
        return (
            np.stack([s.proprio for s in segments]),
            np.stack([s.depth for s in segments]),
            np.stack([s.actions for s in segments]),
        )
