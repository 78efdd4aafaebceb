"""Episodic replay memory with per-step behaviour-policy metadata."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

PROB_TOL = 1e-9


class ReplayNotReady(RuntimeError):
    """Sampling from an empty memory."""


class MalformedEpisode(ValueError):
    pass


def others_product(pi: np.ndarray) -> np.ndarray:
    """Joint probability of every other agent's action, per agent.

    `pi` has shape (..., n); entry [..., a] of the result is the product of
    pi[..., i] over i != a (1.0 when n == 1).
    """
    n = pi.shape[-1]
    out = np.ones_like(pi)
    for a in range(n):
        for i in range(n):
            if i != a:
                out[..., a] *= pi[..., i]
    return out


@dataclass
class Episode:
    """One fully unrolled episode.

    Arrays are indexed [t] or [t, agent]: obs (T, n, D), actions (T, n),
    reward (T,), pi (T, n) per-agent behaviour probability of the taken
    action, pi_others (T, n) joint probability of the other agents' actions,
    alive (T, n), terminal (T,).
    """

    obs: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    pi: np.ndarray
    pi_others: np.ndarray
    alive: np.ndarray
    terminal: np.ndarray
    collection_episode: int
    collection_epsilon: float

    def __post_init__(self):
        for name in ("obs", "actions", "reward", "pi", "pi_others", "alive", "terminal"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.reward)

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]

    @classmethod
    def build(cls, obs, actions, reward, pi, alive, collection_episode: int,
              collection_epsilon: float, pi_others=None) -> "Episode":
        pi = np.asarray(pi, dtype=np.float64)
        T = len(reward)
        terminal = np.zeros(T, dtype=bool)
        terminal[-1] = True
        return cls(
            obs=np.asarray(obs, dtype=np.float64),
            actions=np.asarray(actions, dtype=np.int64),
            reward=np.asarray(reward, dtype=np.float64),
            pi=pi,
            pi_others=others_product(pi) if pi_others is None else np.asarray(pi_others, dtype=np.float64),
            alive=np.asarray(alive, dtype=bool),
            terminal=terminal,
            collection_episode=int(collection_episode),
            collection_epsilon=float(collection_epsilon),
        )


def validate(ep: Episode) -> None:
    T = len(ep.reward)
    if T == 0:
        raise MalformedEpisode("empty episode")
    n = ep.actions.shape[1] if ep.actions.ndim == 2 else -1
    for name, shape in (("actions", (T, n)), ("pi", (T, n)), ("pi_others", (T, n)),
                        ("alive", (T, n)), ("terminal", (T,))):
        if getattr(ep, name).shape != shape:
            raise MalformedEpisode(f"{name} has shape {getattr(ep, name).shape}, expected {shape}")
    if ep.obs.ndim != 3 or ep.obs.shape[:2] != (T, n):
        raise MalformedEpisode(f"obs has shape {ep.obs.shape}")
    for name in ("pi", "pi_others"):
        p = getattr(ep, name)
        if not np.all((p > 0) & (p <= 1)):
            raise MalformedEpisode(f"{name} outside (0, 1]: min {p.min()}, max {p.max()}")
    if not np.allclose(ep.pi_others, others_product(ep.pi), rtol=0, atol=PROB_TOL):
        err = np.max(np.abs(ep.pi_others - others_product(ep.pi)))
        raise MalformedEpisode(f"pi_others disagrees with the product of per-agent probabilities by {err:.3g}")
    if not ep.terminal[-1] or ep.terminal[:-1].any():
        raise MalformedEpisode("exactly one terminal step, at the end, is required")


class ReplayMemory:
    """FIFO ring of episodes; the oldest episode is evicted first."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._episodes: deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self._episodes)

    def __getitem__(self, i: int) -> Episode:
        return self._episodes[i]

    def store(self, ep: Episode) -> None:
        validate(ep)
        if self._episodes and ep.collection_episode < self._episodes[-1].collection_episode:
            raise MalformedEpisode("collection episodes must be nondecreasing")
        self._episodes.append(ep)

    def sample(self, b: int, rng: np.random.Generator) -> list[Episode]:
        """`b` episodes drawn uniformly with replacement."""
        if not self._episodes:
            raise ReplayNotReady("replay memory is empty")
        idx = rng.integers(0, len(self._episodes), size=b)
        return [self._episodes[i] for i in idx]

    def dump(self, path: str | Path) -> None:
        """One JSON record per stored step."""
        with open(path, "w") as fh:
            for k, ep in enumerate(self._episodes):
                for t in range(len(ep)):
                    rec = {
                        "episode": k,
                        "collection_episode": ep.collection_episode,
                        "collection_epsilon": ep.collection_epsilon,
                        "tick": t,
                        "actions": ep.actions[t].tolist(),
                        "reward": float(ep.reward[t]),
                        "obs": ep.obs[t].tolist(),
                        "pi": ep.pi[t].tolist(),
                        "pi_others": ep.pi_others[t].tolist(),
                        "alive": ep.alive[t].tolist(),
                        "terminal": bool(ep.terminal[t]),
                    }
                    fh.write(json.dumps(rec) + "\n")

    @classmethod
    def restore(cls, path: str | Path, capacity: int = 500) -> "ReplayMemory":
        groups: dict[int, list[dict]] = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    groups.setdefault(rec["episode"], []).append(rec)
        mem = cls(capacity)
        for k in sorted(groups):
            recs = sorted(groups[k], key=lambda r: r["tick"])
            ep = Episode(
                obs=np.array([r["obs"] for r in recs], dtype=np.float64),
                actions=np.array([r["actions"] for r in recs], dtype=np.int64),
                reward=np.array([r["reward"] for r in recs], dtype=np.float64),
                pi=np.array([r["pi"] for r in recs], dtype=np.float64),
                pi_others=np.array([r["pi_others"] for r in recs], dtype=np.float64),
                alive=np.array([r["alive"] for r in recs], dtype=bool),
                terminal=np.array([r["terminal"] for r in recs], dtype=bool),
                collection_episode=recs[0]["collection_episode"],
                collection_epsilon=recs[0]["collection_epsilon"],
            )
            mem.store(ep)
        return mem
