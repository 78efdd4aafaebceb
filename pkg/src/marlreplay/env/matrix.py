"""Small fully cooperative two-agent stochastic games with an exact oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import ConfigError


@dataclass
class MatrixGame:
    """Shared payoff r[s, u1, u2] and transitions P[s, u1, u2, s']."""

    payoff: np.ndarray
    transitions: np.ndarray
    gamma: float
    start_state: int = 0
    horizon: int = 1

    def __post_init__(self):
        self.payoff = np.asarray(self.payoff, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        S, U1, U2 = self.payoff.shape
        if self.transitions.shape != (S, U1, U2, S):
            raise ConfigError(f"transition table shape {self.transitions.shape} != {(S, U1, U2, S)}")
        if not np.allclose(self.transitions.sum(axis=-1), 1.0, atol=1e-12) or (self.transitions < 0).any():
            raise ConfigError("transition rows must be distributions")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.payoff.shape[0]

    @property
    def n_actions(self) -> tuple[int, int]:
        return self.payoff.shape[1], self.payoff.shape[2]

    def from_agent(self, agent: int) -> tuple[np.ndarray, np.ndarray]:
        """Payoff and transitions with `agent`'s action on axis 1."""
        if agent == 0:
            return self.payoff, self.transitions
        return self.payoff.transpose(0, 2, 1), self.transitions.transpose(0, 2, 1, 3)


def single_state_game(payoff, horizon: int = 1) -> MatrixGame:
    payoff = np.asarray(payoff, dtype=np.float64)[None]
    return MatrixGame(payoff, np.ones(payoff.shape + (1,)), gamma=0.0, horizon=horizon)


def climbing_game() -> MatrixGame:
    """Classic cooperative coordination game, one state, three actions each."""
    return single_state_game([[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]])


def bellman_backup(game: MatrixGame, partner_policy: np.ndarray, q: np.ndarray,
                   agent: int = 0) -> np.ndarray:
    """One application of the optimality operator given the partner's policy."""
    r, P = game.from_agent(agent)
    v_next = q.max(axis=1)  # (S,)
    inner = r + game.gamma * P @ v_next  # (S, Ua, Up)
    return np.einsum("sap,sp->sa", inner, partner_policy)


def exact_q(game: MatrixGame, partner_policy: np.ndarray, tol: float = 1e-10,
            agent: int = 0, max_iter: int = 100_000) -> np.ndarray:
    """Value iteration for one agent's optimal Q given a fixed partner policy.

    `partner_policy[s, u]` is the partner's probability of action u in state s.
    Iterates until the sup-norm change drops below `tol`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 <= game.gamma < 1:
        raise ConfigError("gamma must lie in [0, 1)")
    pi = np.asarray(partner_policy, dtype=np.float64)
    n_partner = game.n_actions[1 - agent]
    if pi.shape != (game.n_states, n_partner) or not np.allclose(pi.sum(axis=1), 1.0):
        raise ConfigError("partner policy must be a distribution per state")
    q = np.zeros((game.n_states, game.n_actions[agent]))
    for _ in range(max_iter):
        q_new = bellman_backup(game, pi, q, agent)
        change = np.max(np.abs(q_new - q))
        q = q_new
        if change < tol:
            return q
    raise RuntimeError("value iteration did not converge")


@dataclass
class MatrixState:
    tick: int
    state: int
    seed: int = 0
    done: bool = False
    optimal: bool = True

    @property
    def units(self) -> list:
        return []


class MatrixEnv:
    """Episodic wrapper: both agents observe the one-hot abstract state."""

    def __init__(self, game: MatrixGame | None = None):
        self.game = game or climbing_game()
        u1, u2 = self.game.n_actions
        if u1 != u2:
            raise ConfigError("the episodic wrapper needs equal action counts")
        self.n_agents = 2
        self.n_actions = u1
        self.obs_dim = self.game.n_states

    def reset(self, seed: int) -> tuple[MatrixState, np.ndarray]:
        s = MatrixState(tick=0, state=self.game.start_state, seed=seed)
        return s, self.observe_all(s)

    def observe_all(self, s: MatrixState) -> np.ndarray:
        obs = np.zeros((2, self.game.n_states))
        obs[:, s.state] = 1.0
        return obs

    def agent_alive(self, s: MatrixState, agent: int) -> bool:
        return True

    def legal_actions(self, s: MatrixState, agent: int) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)

    def step(self, s: MatrixState, actions) -> tuple[MatrixState, np.ndarray, float, bool]:
        if s.done:
            raise RuntimeError("step called on a finished episode")
        u1, u2 = (int(a) for a in actions)
        r = float(self.game.payoff[s.state, u1, u2])
        rng = np.random.default_rng([s.seed, s.tick])
        nxt = int(rng.choice(self.game.n_states, p=self.game.transitions[s.state, u1, u2]))
        tick = s.tick + 1
        out = MatrixState(tick=tick, state=nxt, seed=s.seed, done=tick >= self.game.horizon,
                          optimal=s.optimal and r == self.game.payoff[s.state].max())
        return out, self.observe_all(out), r, out.done

    def won(self, s: MatrixState) -> bool:
        return s.optimal
