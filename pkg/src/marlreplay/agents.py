"""Independent Q-learners with importance-weighted replay and fingerprints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .nn import ConfigError, ParamSet
from .replay import Episode, others_product

MODELS = ("ff", "rnn")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_anneal_episodes: int = 1500
    e_max: int = 2500
    replay: bool = True
    capacity: int = 500
    is_correction: bool = False
    fingerprint: bool = False
    model: str = "ff"
    n_agents: int = 3
    batch_size: int = 0  # 0 means 30 // n_agents
    clip_lo: float = 0.01
    clip_hi: float = 2.0
    is_avg_decay: float = 0.999
    target_period: int = 100
    lr: float = 5e-4
    rms_decay: float = 0.99
    rms_damping: float = 1e-6
    grad_clip: float = 10.0
    hidden: int = 128
    reward_scale: float = 1.0
    last_action: bool = True  # recurrent models also see their previous action
    force_unit_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.eps_end > self.eps_start:
            raise ConfigError("eps_end must not exceed eps_start")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if not 0 < self.clip_lo <= self.clip_hi:
            raise ConfigError("clip bounds must satisfy 0 < lo <= hi")
        if self.capacity < 1 or self.e_max < 1 or self.eps_anneal_episodes < 1:
            raise ConfigError("capacity, e_max and anneal length must be positive")
        if not self.replay:
            self.capacity = 1
        if self.batch_size <= 0:
            self.batch_size = max(1, 30 // self.n_agents)

    @property
    def uses_last_action(self) -> bool:
        return self.model == "rnn" and self.last_action

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def anneal_epsilon(e: int, cfg: TrainConfig) -> float:
    if e < 0:
        raise ValueError("episode index must be nonnegative")
    frac = min(1.0, e / cfg.eps_anneal_episodes)
    return cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac


def greedy_action(q: np.ndarray, legal: np.ndarray) -> int:
    masked = np.where(legal, q, -np.inf)
    return int(np.argmax(masked))  # first maximum wins ties


def act(q: np.ndarray, eps: float, rng: np.random.Generator,
        legal: np.ndarray | None = None) -> tuple[int, float]:
    """Epsilon-greedy choice over legal actions and its exact probability."""
    legal = np.ones(len(q), dtype=bool) if legal is None else np.asarray(legal, dtype=bool)
    if not legal.any():
        raise ValueError("no legal action")
    if not 0 <= eps <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    choices = np.flatnonzero(legal)
    k = len(choices)
    g = greedy_action(q, legal)
    if eps > 0 and rng.random() < eps:
        u = int(choices[rng.integers(k)])
    else:
        u = g
    p = eps / k + (1.0 - eps if u == g else 0.0)
    return u, p


def behaviour_probs(q: np.ndarray, actions: np.ndarray, eps: float, n_legal) -> np.ndarray:
    """Vectorised epsilon-greedy probability of `actions` given Q-values (..., U).

    All actions are assumed legal; `n_legal` broadcasts against `actions`.
    """
    greedy = np.argmax(q, axis=-1)
    return np.where(actions == greedy, 1.0 - eps, 0.0) + eps / n_legal


def fingerprint_augment(z: np.ndarray, eps: float, e: int, cfg: TrainConfig) -> np.ndarray:
    if not cfg.fingerprint:
        return z
    return np.concatenate([z, [eps, e / cfg.e_max]])


def td_target(r: float, next_q_target: np.ndarray, terminal: bool, gamma: float) -> float:
    if terminal:
        return float(r)
    return float(r + gamma * np.max(next_q_target))


@dataclass
class ISWeightState:
    """Exponential running average of clipped importance weights."""

    average: float = 1.0
    count: int = 0


def _normalised_clipped(pi_stored, pi_current, n: int, cfg: TrainConfig):
    pi_stored = np.asarray(pi_stored, dtype=np.float64)
    if np.any(pi_stored <= 0):
        raise ValueError("stored behaviour probability must be positive")
    raw = np.asarray(pi_current, dtype=np.float64) / pi_stored
    if n < 2:
        raise ValueError("importance weights need at least two agents")
    if n > 2:
        raw = raw ** (1.0 / (n - 1))
    return np.clip(raw, cfg.clip_lo, cfg.clip_hi)


def importance_weight(pi_stored: float, pi_current: float, n: int, cfg: TrainConfig,
                      ws: ISWeightState) -> float:
    """ratio -> power 1/(n-1) -> clip -> divide by running average, then update the average."""
    clipped = float(_normalised_clipped(pi_stored, pi_current, n, cfg))
    w = clipped / ws.average
    ws.average = cfg.is_avg_decay * ws.average + (1.0 - cfg.is_avg_decay) * clipped
    ws.count += 1
    return w


def importance_weights(pi_stored: np.ndarray, pi_current: np.ndarray, n: int,
                       cfg: TrainConfig, ws: ISWeightState) -> np.ndarray:
    """Batch form of `importance_weight`.

    The whole batch is divided by the average held before the batch; the
    clipped values are then folded into the average in array order.
    """
    clipped = np.ravel(_normalised_clipped(pi_stored, pi_current, n, cfg))
    w = clipped / ws.average
    k = clipped.size
    if k:
        d = cfg.is_avg_decay
        powers = d ** np.arange(k - 1, -1, -1, dtype=np.float64)
        ws.average = d ** k * ws.average + (1.0 - d) * float(powers @ clipped)
        ws.count += k
    return w.reshape(np.shape(pi_stored))


# batches ---------------------------------------------------------------------

@dataclass
class Batch:
    """Episodes padded to a common length; arrays are time-major [t, b, ...]."""

    obs: np.ndarray        # (T, B, n, D)
    actions: np.ndarray    # (T, B, n)
    reward: np.ndarray     # (T, B)
    pi_others: np.ndarray  # (T, B, n)
    valid: np.ndarray      # (T, B, n) step exists and agent alive
    bootstrap: np.ndarray  # (T, B, n) the next step exists, is not after a terminal, agent alive there
    exists: np.ndarray     # (T, B)

    @property
    def n_agents(self) -> int:
        return self.actions.shape[2]


def pad_batch(episodes: list[Episode]) -> Batch:
    T = max(len(ep) for ep in episodes)
    B = len(episodes)
    n = episodes[0].n_agents
    D = episodes[0].obs.shape[2]
    obs = np.zeros((T, B, n, D))
    actions = np.zeros((T, B, n), dtype=np.int64)
    reward = np.zeros((T, B))
    pi_others = np.ones((T, B, n))
    alive = np.zeros((T, B, n), dtype=bool)
    exists = np.zeros((T, B), dtype=bool)
    for b, ep in enumerate(episodes):
        L = len(ep)
        obs[:L, b] = ep.obs
        actions[:L, b] = ep.actions
        reward[:L, b] = ep.reward
        pi_others[:L, b] = ep.pi_others
        alive[:L, b] = ep.alive
        exists[:L, b] = True
    bootstrap = np.zeros_like(alive)
    bootstrap[:-1] = alive[1:]  # padding past the terminal step is never alive
    return Batch(obs, actions, reward, pi_others, alive, bootstrap, exists)


def q_all_steps(params: ParamSet, xs: np.ndarray, keep_tape: bool = False):
    """Q-values for a (T, B, D) block: FF per step, GRU unrolled from zeros."""
    T, B, D = xs.shape
    if params.kind == "mlp":
        if keep_tape:
            q, tape = nn.mlp_forward_tape(params, xs.reshape(T * B, D))
            return q.reshape(T, B, -1), tape
        return nn.mlp_forward(params, xs.reshape(T * B, D)).reshape(T, B, -1), None
    q, _, tape = nn.gru_unroll(params, xs, keep_tape=keep_tape)
    return q, tape


def _upstream_flat(params: ParamSet, up: np.ndarray) -> np.ndarray:
    return up.reshape(-1, up.shape[-1]) if params.kind == "mlp" else up


def with_fingerprint(obs: np.ndarray, eps: float, e_frac: float) -> np.ndarray:
    out = obs.copy()
    out[..., -2] = eps
    out[..., -1] = e_frac
    return out


def compute_pi_current(params_all: list[ParamSet], batch: Batch, eps_now: float,
                       fingerprint: tuple[float, float] | None = None,
                       q_all: list[np.ndarray] | None = None) -> np.ndarray:
    """Joint probability of the other agents' stored actions under today's policies.

    Each agent's Q-network is re-run over the stored inputs (recurrent models
    are re-unrolled from a zero state). With `fingerprint` = (eps, e/e_max),
    the stored fingerprint slots are overwritten with today's values first.
    Returns shape (T, B, n); padded and dead entries contribute probability 1.
    """
    n = batch.n_agents
    per_agent = np.ones(batch.actions.shape)
    for i, params in enumerate(params_all):
        if q_all is not None and fingerprint is None:
            q = q_all[i]
        else:
            xs = batch.obs[:, :, i]
            if fingerprint is not None:
                xs = with_fingerprint(xs, *fingerprint)
            q, _ = q_all_steps(params, xs)
        p = behaviour_probs(q, batch.actions[:, :, i], eps_now, q.shape[-1])
        per_agent[:, :, i] = np.where(batch.valid[:, :, i], p, 1.0)
    return others_product(per_agent)


@dataclass
class StepResult:
    loss: float
    grads: list[ParamSet]
    td_sq_mean: float
    weight_mean: float
    n_terms: int


def train_step(params_all: list[ParamSet], targets_all: list[ParamSet], batch: Batch,
               cfg: TrainConfig, ws: list[ISWeightState] | None = None,
               eps_now: float | None = None, fingerprint_now: tuple[float, float] | None = None,
               weights: np.ndarray | None = None) -> StepResult:
    """Summed (importance-weighted) squared TD error and its gradients per agent.

    With `cfg.is_correction`, weights come from the stored and current joint
    probabilities of the other agents' actions; otherwise every weight is 1.
    An explicit `weights` array (T, B, n) overrides both.
    """
    n = batch.n_agents
    if len(params_all) != n or len(targets_all) != n:
        raise ConfigError("one parameter set per agent is required")
    q_all, tapes, next_max = [], [], []
    for a in range(n):
        xs = batch.obs[:, :, a]
        q, tape = q_all_steps(params_all[a], xs, keep_tape=True)
        qt, _ = q_all_steps(targets_all[a], xs)
        nm = np.zeros(qt.shape[:2])
        nm[:-1] = qt[1:].max(axis=-1)
        q_all.append(q)
        tapes.append(tape)
        next_max.append(nm)

    if weights is None:
        weights = np.ones(batch.actions.shape)
        if cfg.is_correction and n >= 2:
            if ws is None or eps_now is None:
                raise ConfigError("importance correction needs weight state and current epsilon")
            fp = fingerprint_now if cfg.fingerprint else None
            pi_now = compute_pi_current(params_all, batch, eps_now, fp, q_all)
            for a in range(n):
                v = batch.valid[:, :, a]
                weights[:, :, a][v] = importance_weights(batch.pi_others[:, :, a][v], pi_now[:, :, a][v],
                                                         n, cfg, ws[a])
            if cfg.force_unit_weights:
                weights = np.ones(batch.actions.shape)

    loss = 0.0
    sq_sum = 0.0
    terms = 0
    w_sum = 0.0
    grads = []
    r = batch.reward * cfg.reward_scale
    for a in range(n):
        q = q_all[a]
        u = batch.actions[:, :, a]
        v = batch.valid[:, :, a]
        q_taken = np.take_along_axis(q, u[..., None], axis=-1)[..., 0]
        y = r + cfg.gamma * np.where(batch.bootstrap[:, :, a], next_max[a], 0.0)
        delta = np.where(v, y - q_taken, 0.0)
        w = np.where(v, weights[:, :, a], 0.0)
        loss += float(np.sum(w * delta * delta))
        sq_sum += float(np.sum(delta * delta))
        terms += int(v.sum())
        w_sum += float(w.sum())
        up = np.zeros_like(q)
        np.put_along_axis(up, u[..., None], (-2.0 * w * delta)[..., None], axis=-1)
        grads.append(nn.backward(params_all[a], tapes[a], _upstream_flat(params_all[a], up)))
    return StepResult(loss, grads, sq_sum / max(terms, 1), w_sum / max(terms, 1), terms)


# learner ---------------------------------------------------------------------

class IndependentLearners:
    """One Q-network, target network and optimiser per agent; no parameter sharing."""

    def __init__(self, cfg: TrainConfig, obs_dim: int, n_actions: int, rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.input_dim = self.compute_input_dim(cfg, obs_dim, n_actions)
        self.params: list[ParamSet] = []
        for _ in range(cfg.n_agents):
            if cfg.model == "ff":
                p = nn.init_mlp(self.input_dim, (cfg.hidden, cfg.hidden), n_actions, rng)
            else:
                p = nn.init_gru(self.input_dim, cfg.hidden, n_actions, rng)
            self.params.append(p)
        self.targets = [p.copy() for p in self.params]
        self.opts = [nn.RMSProp(cfg.lr, cfg.rms_decay, cfg.rms_damping, cfg.grad_clip)
                     for _ in self.params]
        self.ws = [ISWeightState() for _ in self.params]
        self.skipped_updates = 0

    @staticmethod
    def compute_input_dim(cfg: TrainConfig, obs_dim: int, n_actions: int) -> int:
        return obs_dim + (n_actions if cfg.uses_last_action else 0) + (2 if cfg.fingerprint else 0)

    def make_input(self, obs: np.ndarray, prev_action: int | None, eps: float, e: int) -> np.ndarray:
        parts = [obs]
        if self.cfg.uses_last_action:
            onehot = np.zeros(self.n_actions)
            if prev_action is not None:
                onehot[prev_action] = 1.0
            parts.append(onehot)
        x = np.concatenate(parts) if len(parts) > 1 else obs
        return fingerprint_augment(x, eps, e, self.cfg)

    def initial_hidden(self) -> list[np.ndarray | None]:
        if self.cfg.model == "rnn":
            return [np.zeros(self.cfg.hidden) for _ in self.params]
        return [None] * len(self.params)

    def q_step(self, agent: int, x: np.ndarray, h):
        p = self.params[agent]
        if p.kind == "mlp":
            return nn.mlp_forward(p, x), None
        return nn.gru_step(p, h, x)

    def sync_targets(self) -> None:
        self.targets = [p.copy() for p in self.params]

    def update(self, episodes: list[Episode], eps_now: float, e_now: int) -> StepResult | None:
        batch = pad_batch(episodes)
        res = train_step(self.params, self.targets, batch, self.cfg, self.ws, eps_now,
                         (eps_now, e_now / self.cfg.e_max))
        if not math.isfinite(res.loss) or not all(g.is_finite() for g in res.grads):
            self.skipped_updates += 1
            return None
        for p, g, opt in zip(self.params, res.grads, self.opts):
            opt.step(p, g)
        return res

    def finite(self) -> bool:
        return all(p.is_finite() for p in self.params)


@dataclass
class EpisodeOutcome:
    episode: Episode
    total_reward: float
    won: bool
    length: int
    trace: list[dict] = field(default_factory=list)


def run_episode(env, learners: IndependentLearners, seed: int, eps: float, e: int,
                rng: np.random.Generator, record_trace: bool = False,
                fingerprint_eps: float | None = None) -> EpisodeOutcome:
    """Play one episode with epsilon-greedy agents, recording behaviour probabilities.

    `fingerprint_eps` decouples the fingerprint from the acting epsilon, e.g.
    greedy evaluation (eps 0) under the current training fingerprint.
    """
    fp_eps = eps if fingerprint_eps is None else fingerprint_eps
    n = learners.cfg.n_agents
    state, obs = env.reset(seed)
    hidden = learners.initial_hidden()
    prev = [None] * n
    rows_x, rows_u, rows_pi, rows_alive, rewards = [], [], [], [], []
    trace = []
    if record_trace:
        trace.append({"tick": 0, "actions": [], "reward": 0.0, "units": _snapshot(state)})
    done = False
    while not done:
        xs, us, ps, alive = [], [], [], []
        for a in range(n):
            x = learners.make_input(obs[a], prev[a], fp_eps, e)
            q, hidden[a] = learners.q_step(a, x, hidden[a])
            legal = env.legal_actions(state, a)
            u, p = act(q, eps, rng, legal)
            xs.append(x)
            us.append(u)
            ps.append(p)
            alive.append(env.agent_alive(state, a))
            prev[a] = u
        state, obs, r, done = env.step(state, us)
        rows_x.append(xs)
        rows_u.append(us)
        rows_pi.append(ps)
        rows_alive.append(alive)
        rewards.append(r)
        if record_trace:
            trace.append({"tick": int(state.tick), "actions": [int(u) for u in us],
                          "reward": float(r), "units": _snapshot(state)})
    ep = Episode.build(np.array(rows_x), np.array(rows_u), np.array(rewards), np.array(rows_pi),
                       np.array(rows_alive), collection_episode=e, collection_epsilon=eps)
    return EpisodeOutcome(ep, float(sum(rewards)), bool(env.won(state)), len(rewards), trace)


def _snapshot(state) -> list[dict]:
    return state.snapshot() if hasattr(state, "snapshot") else []


# tabular replay learner for matrix games --------------------------------------

@dataclass
class TransitionArchive:
    """Flat transitions of a two-agent matrix game from one agent's view."""

    s: np.ndarray
    u: np.ndarray
    u_partner: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    pi_partner: np.ndarray  # partner's probability of u_partner at collection

    def __len__(self) -> int:
        return len(self.s)

    @classmethod
    def concat(cls, *parts: "TransitionArchive") -> "TransitionArchive":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))


def collect_transitions(game, partner_policy: np.ndarray, count: int, rng: np.random.Generator,
                        agent: int = 0) -> TransitionArchive:
    """Transitions with uniformly drawn states and own actions, partner acting from its policy."""
    r_tab, P = game.from_agent(agent)
    S, Ua, Up = r_tab.shape
    s = rng.integers(0, S, size=count)
    u = rng.integers(0, Ua, size=count)
    cum = np.cumsum(partner_policy, axis=1)
    up = np.minimum((rng.random(count)[:, None] > cum[s]).sum(axis=1), Up - 1)
    cum_next = np.cumsum(P[s, u, up], axis=1)
    s_next = np.minimum((rng.random(count)[:, None] > cum_next).sum(axis=1), S - 1)
    return TransitionArchive(s, u, up, r_tab[s, u, up], s_next, partner_policy[s, up])


def tabular_replay_q(game, archive: TransitionArchive, cfg: TrainConfig,
                     partner_policy_now: np.ndarray | None, rng: np.random.Generator,
                     iterations: int = 2000, batch: int = 20_000, agent: int = 0,
                     warm: int = 50) -> np.ndarray:
    """Q-learning on minibatches sampled uniformly from a fixed archive.

    Each cell moves toward the (importance-weighted) mean TD target of its
    samples in the minibatch. The step size is 1 for the first `warm`
    iterations (sampled value iteration) and then decays as warm/k, which
    averages out minibatch noise.
    """
    S, Ua = game.n_states, game.n_actions[agent]
    q = np.zeros((S, Ua))
    ws = ISWeightState()
    for k in range(iterations):
        idx = rng.integers(0, len(archive), size=batch)
        s, u = archive.s[idx], archive.u[idx]
        y = archive.r[idx] + game.gamma * q[archive.s_next[idx]].max(axis=1)
        if cfg.is_correction:
            w = importance_weights(archive.pi_partner[idx],
                                   partner_policy_now[s, archive.u_partner[idx]], 2, cfg, ws)
        else:
            w = np.ones(batch)
        cell = s * Ua + u
        num = np.bincount(cell, weights=w * (y - q.ravel()[cell]), minlength=S * Ua)
        cnt = np.bincount(cell, minlength=S * Ua)
        alpha = min(1.0, warm / (k + 1.0))
        q = q + alpha * (num / np.maximum(cnt, 1)).reshape(S, Ua)
    return q
