"""Training runs, seeded sweeps and their on-disk artifacts."""

from __future__ import annotations

import ast
import csv
import dataclasses
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, analysis, nn
from .agents import (IndependentLearners, TrainConfig, anneal_epsilon, behaviour_probs,
                     run_episode)
from .env import SCENARIO_NAMES, make_env
from .env.matrix import exact_q
from .env.skirmish import SkirmishConfig
from .env.trace import write_trace
from .nn import ConfigError
from .replay import ReplayMemory

log = logging.getLogger(__name__)

METHODS = ("noxp", "xp", "xp+is", "xp+fp", "xp+is+fp")
METRICS_HEADER = ("episode", "win_rate", "mean_return", "mean_td_loss", "mean_is_weight")
EXIT_OK, EXIT_USAGE, EXIT_COLLAPSE = 0, 2, 3


@dataclass
class RunSpec:
    scenario: str = "m3v3"
    method: str = "xp"
    model: str = "ff"
    seed: int = 0
    episodes: int = 2500
    out: str = "runs/default"
    capacity: int = 500
    eval_every: int = 50
    eval_episodes: int = 20
    epsilon_end: float = 0.02
    clip_lo: float = 0.01
    clip_hi: float = 2.0
    probe_at: int = -1  # -1: end of the epsilon anneal (or the last episode if sooner)
    collapse_patience: int = 10  # consecutive non-finite updates that count as collapse
    env: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIO_NAMES}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.episodes < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("episodes, eval_every and eval_episodes must be positive")
        bad = set(self.train) - TrainConfig.field_names()
        if bad:
            raise ConfigError(f"unknown training settings {sorted(bad)}")
        reserved = {"replay", "is_correction", "fingerprint", "model", "n_agents", "seed",
                    "capacity", "eps_end", "clip_lo", "clip_hi"} & set(self.train)
        if reserved:
            raise ConfigError(f"{sorted(reserved)} are set through the run spec, not train.*")
        env_fields = {f.name for f in dataclasses.fields(SkirmishConfig)}
        bad = set(self.env) - env_fields
        if bad:
            raise ConfigError(f"unknown environment settings {sorted(bad)}")
        if self.scenario == "matrix" and self.env:
            raise ConfigError("the matrix scenario takes no environment settings")

    def train_config(self, n_agents: int) -> TrainConfig:
        return TrainConfig(
            replay=self.method != "noxp", capacity=self.capacity,
            is_correction="is" in self.method.split("+"),
            fingerprint="fp" in self.method.split("+"),
            model=self.model, n_agents=n_agents, seed=self.seed, eps_end=self.epsilon_end,
            clip_lo=self.clip_lo, clip_hi=self.clip_hi, **self.train,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# configuration files ---------------------------------------------------------

def parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path: str | Path) -> dict:
    """key = value lines; '#' starts a comment. env.* and train.* keys nest."""
    out: dict = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." in key:
                group, sub = key.split(".", 1)
                if group not in ("env", "train"):
                    raise ConfigError(f"{path}:{n}: unknown group {group!r}")
                out.setdefault(group, {})[sub] = parse_value(value)
            else:
                out[key.replace("-", "_")] = parse_value(value)
    return out


def spec_from_mapping(values: dict) -> RunSpec:
    names = {f.name for f in dataclasses.fields(RunSpec)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown settings {sorted(bad)}")
    values = dict(values)
    if "env" in values and "ally_box" in values["env"]:
        values["env"]["ally_box"] = tuple(values["env"]["ally_box"])
    if "env" in values and "enemy_box" in values["env"]:
        values["env"]["enemy_box"] = tuple(values["env"]["enemy_box"])
    return RunSpec(**values)


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# seeds -----------------------------------------------------------------------

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def train_seed(seed: int, e: int) -> int:
    return _seed(seed, 0, e)


def eval_seed(seed: int, k: int) -> int:
    return _seed(seed, 1, k)


# one run ---------------------------------------------------------------------

@dataclass
class RunResult:
    status: str
    exit_code: int
    out: str
    metrics: list[tuple] = field(default_factory=list)
    probe_r2: float | None = None
    sweep_spearman: float | None = None
    oracle: dict | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def evaluate(env, learners: IndependentLearners, spec: RunSpec, e: int,
             record_trace: bool = False) -> tuple[float, float, list]:
    rng = np.random.default_rng(0)  # unused at eps 0, kept for the call signature
    wins, returns, trace = [], [], []
    for k in range(spec.eval_episodes):
        out = run_episode(env, learners, eval_seed(spec.seed, k), 0.0, e, rng,
                          record_trace=record_trace and k == 0,
                          fingerprint_eps=anneal_epsilon(e, learners.cfg))
        wins.append(out.won)
        returns.append(out.total_reward)
        if out.trace:
            trace = out.trace
    return float(np.mean(wins)), float(np.mean(returns)), trace


def initial_input(env, learners: IndependentLearners, spec: RunSpec, agent: int = 0) -> np.ndarray:
    """Network input of `agent` at the first step of evaluation episode 0, fingerprint slots excluded."""
    _, obs = env.reset(eval_seed(spec.seed, 0))
    x = learners.make_input(obs[agent], None, 0.0, 0)
    return x[:-2] if learners.cfg.fingerprint else x


def matrix_oracle(env, learners: IndependentLearners) -> dict:
    """Sup-norm distance of each agent's learned Q to the exact Q given the partner's current policy."""
    game = env.game
    eps = learners.cfg.eps_end
    report = {"gamma": game.gamma, "agents": []}
    eye = np.eye(game.n_states)
    for a in range(2):
        partner = learners.params[1 - a]
        xs = np.array([learners.make_input(eye[s], None, eps, learners.cfg.e_max)
                       for s in range(game.n_states)])
        q_partner = nn.mlp_forward(partner, xs) if partner.kind == "mlp" else \
            nn.gru_step(partner, np.zeros((len(xs), partner.hidden_dim)), xs)[0]
        U = q_partner.shape[1]
        pi = behaviour_probs(q_partner[:, None, :], np.arange(U)[None, :], eps, U)
        target = exact_q(game, pi, agent=a)
        own = learners.params[a]
        q_own = nn.mlp_forward(own, xs) if own.kind == "mlp" else \
            nn.gru_step(own, np.zeros((len(xs), own.hidden_dim)), xs)[0]
        q_own = q_own / learners.cfg.reward_scale
        report["agents"].append({
            "agent": a, "partner_policy": pi.tolist(), "exact_q": target.tolist(),
            "learned_q": q_own.tolist(), "sup_norm": float(np.max(np.abs(q_own - target))),
        })
    report["sup_norm"] = max(r["sup_norm"] for r in report["agents"])
    return report


def run(spec: RunSpec) -> RunResult:
    """Collect, store, sample and train for the episode budget, writing artifacts to spec.out."""
    out = Path(spec.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    env = make_env(spec.scenario, **spec.env)
    cfg = spec.train_config(env.n_agents)
    rng = np.random.default_rng(spec.seed)
    learners = IndependentLearners(cfg, env.obs_dim, env.n_actions, rng)
    memory = ReplayMemory(cfg.capacity)
    probe_at = spec.probe_at if spec.probe_at >= 0 else min(cfg.eps_anneal_episodes, spec.episodes)

    manifest = {
        "version": git_describe(),
        "spec": spec.to_dict(),
        "train_config": cfg.to_dict(),
        "env_config": dataclasses.asdict(env.config) if hasattr(env, "config") else {"game": "climbing"},
        "status": "running",
    }
    (out / "config.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")

    metrics_path = out / "metrics.csv"
    result = RunResult("ok", EXIT_OK, str(out))
    td, wt = [], []
    streak = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for e in range(spec.episodes):
            eps = anneal_epsilon(e, cfg)
            collected = run_episode(env, learners, train_seed(spec.seed, e), eps, e, rng)
            memory.store(collected.episode)
            res = learners.update(memory.sample(cfg.batch_size, rng), eps, e)
            if res is not None:
                td.append(res.td_sq_mean)
                wt.append(res.weight_mean)
                streak = 0
            else:
                streak += 1
            if (e + 1) % cfg.target_period == 0:
                learners.sync_targets()
            if not learners.finite() or streak >= spec.collapse_patience:
                log.error("training collapsed at episode %d", e)
                result = RunResult("collapsed", EXIT_COLLAPSE, str(out))
                manifest["failed_at_episode"] = e
                break
            if e + 1 == probe_at:
                data = analysis.probe_dataset(learners.params, memory)
                analysis.write_probe_csv(out / "probe.csv", data)
                if np.all(np.isfinite(data.hidden)):
                    result.probe_r2 = analysis.probe_r2(data)
            if (e + 1) % spec.eval_every == 0:
                last = e + 1 + spec.eval_every > spec.episodes
                win, ret, trace = evaluate(env, learners, spec, e + 1, record_trace=last)
                row = (e + 1, win, ret, float(np.mean(td)) if td else 0.0,
                       float(np.mean(wt)) if wt else 1.0)
                writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
                fh.flush()
                result.metrics.append(row)
                td, wt = [], []
                if trace:
                    write_trace(out / "traces" / f"eval_{e + 1:05d}.jsonl", trace)

    nn.save_checkpoint(out / "checkpoint.bin", learners.params)
    if result.status == "ok":
        if cfg.fingerprint:
            pairs = analysis.value_sweep(learners.params[0], initial_input(env, learners, spec))
            analysis.write_pairs_csv(out / "sweep.csv", ("epsilon", "value"), pairs)
            result.sweep_spearman = analysis.spearman(pairs)
        if spec.scenario == "matrix":
            result.oracle = matrix_oracle(env, learners)
            (out / "oracle.json").write_text(json.dumps(result.oracle, indent=2) + "\n")
    manifest["status"] = result.status
    manifest["skipped_updates"] = learners.skipped_updates
    manifest["probe_r2"] = result.probe_r2
    manifest["sweep_spearman"] = result.sweep_spearman
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return result


def run_from_manifest(path: str | Path, out: str | None = None) -> RunResult:
    spec = json.loads(Path(path).read_text())["spec"]
    if out is not None:
        spec["out"] = out
    return run(spec_from_mapping(spec))


# sweeps ----------------------------------------------------------------------

def _run_safely(spec: RunSpec) -> RunResult:
    try:
        return run(spec)
    except Exception as exc:  # a failed child must not stop the sweep
        log.exception("run %s failed", spec.out)
        return RunResult(f"error: {exc}", 1, spec.out)


def final_quartile_win(series: analysis.MetricSeries, episodes: int) -> float:
    tail = series.final_fraction(episodes, 0.25)
    return float(np.mean(tail.win_rate)) if len(tail.episode) else float("nan")


@dataclass
class GroupSummary:
    scenario: str
    method: str
    model: str
    k: int
    final_win_mean: float
    final_win_sem: float
    per_seed: list[float]


def sweep(specs: Sequence[RunSpec], parallelism: int = 1, out: str | Path | None = None) -> list[GroupSummary]:
    """Run independent specs, then aggregate per (scenario, method, model)."""
    outs = [s.out for s in specs]
    if len(set(outs)) != len(outs):
        raise ConfigError("sweep runs need distinct output directories")
    if parallelism > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_safely, specs))
    else:
        results = [_run_safely(s) for s in specs]

    groups: dict[tuple, list[tuple[RunSpec, RunResult]]] = {}
    for s, r in zip(specs, results):
        groups.setdefault((s.scenario, s.method, s.model), []).append((s, r))
    summaries = []
    for (scen, method, model), members in groups.items():
        ok = [(s, r) for s, r in members if r.status == "ok"]
        if len(ok) < len(members):
            log.warning("%s/%s/%s: %d of %d runs failed", scen, method, model,
                        len(members) - len(ok), len(members))
        series = [analysis.MetricSeries.read_csv(Path(s.out) / "metrics.csv") for s, _ in ok]
        finals = [final_quartile_win(m, s.episodes) for m, (s, _) in zip(series, ok)]
        k = len(finals)
        mean = float(np.mean(finals)) if k else float("nan")
        sem = float(np.std(finals, ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
        summaries.append(GroupSummary(scen, method, model, k, mean, sem, finals))
        if out is not None and k >= 2:
            try:
                agg = analysis.aggregate(series)
            except ValueError as exc:
                log.warning("cannot aggregate %s/%s/%s: %s", scen, method, model, exc)
            else:
                Path(out).mkdir(parents=True, exist_ok=True)
                analysis.write_aggregate_csv(Path(out) / f"aggregate_{scen}_{method}_{model}.csv".replace("+", "-"), agg)
    if out is not None:
        write_comparison(Path(out) / "comparison.csv", summaries)
    return summaries


def write_comparison(path: Path, summaries: Sequence[GroupSummary]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "model", "k", "final_win_mean", "final_win_sem", "per_seed"])
        for g in summaries:
            w.writerow([g.scenario, g.method, g.model, g.k, _fmt(g.final_win_mean), _fmt(g.final_win_sem),
                        " ".join(f"{v:.4f}" for v in g.per_seed)])


def format_table(summaries: Sequence[GroupSummary]) -> str:
    lines = [f"{'scenario':<8} {'method':<9} {'model':<5} {'k':>2}  final-quartile win (mean +- sem)"]
    for g in summaries:
        lines.append(f"{g.scenario:<8} {g.method:<9} {g.model:<5} {g.k:>2}  "
                     f"{g.final_win_mean:.3f} +- {g.final_win_sem:.3f}")
    return "\n".join(lines)
