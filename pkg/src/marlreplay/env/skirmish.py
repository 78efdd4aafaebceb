"""Grid skirmish between a team of learning marines and a scripted team.

Units live on a square grid and move one cell per tick in one of four
directions. Each tick resolves in a fixed order: moves (ascending unit id,
first come first served on cells), attacks from units with cooldown 0 whose
target is alive and within range, cooldown decrement, removal of the dead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..nn import ConfigError

ALLY, ENEMY = 0, 1
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))  # N, E, S, W
MOVE_NAMES = ("N", "E", "S", "W")
SLOT_FEATURES = 6  # distance, rel x, rel y, health, cooldown, visibility mask


@dataclass(frozen=True)
class SkirmishConfig:
    n_allies: int = 3
    n_enemies: int = 3
    size: int = 16
    hp_max: int = 40
    damage: int = 6
    cd_max: int = 14
    attack_range: float = 4.0
    sight: float = 8.0
    t_max: int = 100
    # spawn boxes, inclusive (x_lo, x_hi, y_lo, y_hi)
    ally_box: tuple[int, int, int, int] = (1, 3, 6, 9)
    enemy_box: tuple[int, int, int, int] = (9, 11, 6, 9)

    def __post_init__(self):
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ConfigError("both teams need at least one unit")
        if min(self.hp_max, self.damage, self.t_max, self.size) < 1 or self.cd_max < 0:
            raise ConfigError("hp_max, damage, t_max and size must be positive; cd_max nonnegative")
        if self.attack_range <= 0 or self.sight <= 0:
            raise ConfigError("attack range and sight must be positive")
        for box in (self.ally_box, self.enemy_box):
            x0, x1, y0, y1 = box
            if not (0 <= x0 <= x1 < self.size and 0 <= y0 <= y1 < self.size):
                raise ConfigError(f"spawn box {box} outside the {self.size}x{self.size} arena")
        if (self.ally_box[1] - self.ally_box[0] + 1) * (self.ally_box[3] - self.ally_box[2] + 1) < self.n_allies:
            raise ConfigError("ally spawn box too small")
        if (self.enemy_box[1] - self.enemy_box[0] + 1) * (self.enemy_box[3] - self.enemy_box[2] + 1) < self.n_enemies:
            raise ConfigError("enemy spawn box too small")

    @property
    def n_units(self) -> int:
        return self.n_allies + self.n_enemies

    @property
    def n_actions(self) -> int:
        return 4 + self.n_enemies + 2

    @property
    def obs_dim(self) -> int:
        return SLOT_FEATURES * self.n_units


SCENARIOS = {
    "m3v3": dict(n_allies=3, n_enemies=3),
    "m5v5": dict(n_allies=5, n_enemies=5, ally_box=(1, 3, 5, 10), enemy_box=(9, 11, 5, 10)),
}


@dataclass
class Unit:
    id: int
    team: int
    x: int
    y: int
    health: int
    cooldown: int = 0
    alive: bool = True


@dataclass
class EnvState:
    tick: int
    units: list[Unit]
    seed: int = 0
    invalid_attacks: int = 0
    done: bool = False

    def copy(self) -> "EnvState":
        return replace(self, units=[replace(u) for u in self.units])

    def allies(self) -> list[Unit]:
        return [u for u in self.units if u.team == ALLY]

    def enemies(self) -> list[Unit]:
        return [u for u in self.units if u.team == ENEMY]

    def snapshot(self) -> list[dict]:
        return [asdict(u) for u in self.units]


def distance(a: Unit, b: Unit) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


class Skirmish:
    """Decentralised micromanagement: one learning agent per allied unit.

    Action indices: 0-3 move N/E/S/W, 4 .. 4+m-1 attack enemy slot j,
    then stop, then noop.
    """

    def __init__(self, config: SkirmishConfig | None = None):
        self.config = config or SkirmishConfig()
        c = self.config
        self.n_agents = c.n_allies
        self.n_actions = c.n_actions
        self.obs_dim = c.obs_dim
        self.attack0 = 4
        self.stop = 4 + c.n_enemies
        self.noop = 5 + c.n_enemies

    def action_name(self, a: int) -> str:
        if a < 4:
            return f"move[{MOVE_NAMES[a]}]"
        if a < self.stop:
            return f"attack[{self.config.n_allies + 1 + a - 4}]"
        return "stop" if a == self.stop else "noop"

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(seed)
        units = []
        for team, box, count in ((ALLY, c.ally_box, c.n_allies), (ENEMY, c.enemy_box, c.n_enemies)):
            x0, x1, y0, y1 = box
            cells = [(x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)]
            for k in rng.choice(len(cells), size=count, replace=False):
                x, y = cells[k]
                units.append(Unit(id=len(units) + 1, team=team, x=x, y=y, health=c.hp_max))
        state = EnvState(tick=0, units=units, seed=seed)
        return state, self.observe_all(state)

    def agent_alive(self, state: EnvState, agent: int) -> bool:
        return state.units[agent].alive

    def legal_actions(self, state: EnvState, agent: int) -> np.ndarray:
        """Boolean mask; every action is legal for a living agent, only noop for a dead one."""
        mask = np.ones(self.n_actions, dtype=bool)
        if not state.units[agent].alive:
            mask[:] = False
            mask[self.noop] = True
        return mask

    def opponent_policy(self, state: EnvState) -> list[tuple[str, int | None]]:
        """Scripted enemy actions: shoot the nearest ally in range, else walk toward it.

        Actions are encoded as ("attack", target_id), ("move", direction) or
        ("noop", None) tuples, one per enemy in id order.
        """
        allies = [u for u in state.units if u.team == ALLY and u.alive]
        out = []
        for e in state.enemies():
            if not e.alive or not allies:
                out.append(("noop", None))
                continue
            # min over (distance, id) gives the lowest-id tie break
            target = min(allies, key=lambda a: (distance(e, a), a.id))
            if distance(e, target) <= self.config.attack_range:
                out.append(("attack", target.id))
                continue
            dx, dy = target.x - e.x, target.y - e.y
            if abs(dx) >= abs(dy):
                out.append(("move", 1 if dx > 0 else 3))
            else:
                out.append(("move", 0 if dy > 0 else 2))
        return out

    def _decode(self, a: int) -> tuple[str, int | None]:
        if a < 4:
            return ("move", a)
        if a < self.stop:
            return ("attack", self.config.n_allies + 1 + a - 4)
        return ("stop", None) if a == self.stop else ("noop", None)

    def step(self, state: EnvState, ally_actions) -> tuple[EnvState, np.ndarray, float, bool]:
        """Advance one tick. Pure: `state` is not modified."""
        c = self.config
        if state.done:
            raise RuntimeError("step called on a finished episode")
        if len(ally_actions) != c.n_allies:
            raise ValueError(f"expected {c.n_allies} ally actions, got {len(ally_actions)}")
        s = state.copy()
        orders = {}
        for unit, a in zip(s.allies(), ally_actions):
            a = int(a)
            if not 0 <= a < self.n_actions:
                raise ValueError(f"action {a} out of range")
            if unit.alive:
                orders[unit.id] = self._decode(a)
        for unit, order in zip(s.enemies(), self.opponent_policy(state)):
            if unit.alive:
                orders[unit.id] = order
        by_id = {u.id: u for u in s.units}

        occupied = {(u.x, u.y) for u in s.units if u.alive}
        for u in s.units:
            kind, arg = orders.get(u.id, ("noop", None))
            if kind != "move":
                continue
            dx, dy = MOVES[arg]
            nx, ny = u.x + dx, u.y + dy
            if 0 <= nx < c.size and 0 <= ny < c.size and (nx, ny) not in occupied:
                occupied.discard((u.x, u.y))
                occupied.add((nx, ny))
                u.x, u.y = nx, ny

        damage = {}
        for u in s.units:
            kind, arg = orders.get(u.id, ("noop", None))
            if kind != "attack":
                continue
            target = by_id.get(arg)
            if (target is None or target.team == u.team or not target.alive
                    or distance(u, target) > c.attack_range):
                if u.team == ALLY:
                    s.invalid_attacks += 1
                continue
            if u.cooldown == 0:
                damage[arg] = damage.get(arg, 0) + c.damage
                u.cooldown = c.cd_max

        reward = 0.0
        for uid, dmg in damage.items():
            target = by_id[uid]
            lost = min(dmg, target.health)
            target.health -= lost
            if target.team == ENEMY:
                reward += lost
        for u in s.units:
            if u.alive and u.cooldown > 0:
                u.cooldown -= 1
        for u in s.units:
            if u.alive and u.health <= 0:
                u.alive = False
                u.cooldown = 0

        s.tick += 1
        allies_alive = [u for u in s.allies() if u.alive]
        enemies_alive = any(u.alive for u in s.enemies())
        victory = not enemies_alive
        if victory:
            reward += sum(u.health for u in allies_alive)
        s.done = victory or not allies_alive or s.tick >= c.t_max
        return s, self.observe_all(s), reward, s.done

    def won(self, state: EnvState) -> bool:
        return not any(u.alive for u in state.enemies())

    def observe(self, state: EnvState, agent: int) -> np.ndarray:
        """Concatenated per-unit slots seen by ally `agent` (0-based).

        Slot order follows unit ids. A dead observer sees all zeros.
        """
        c = self.config
        obs = np.zeros(c.obs_dim)
        me = state.units[agent]
        if not me.alive:
            return obs
        for k, u in enumerate(state.units):
            if not u.alive:
                continue
            d = distance(me, u)
            if d > c.sight:
                continue
            obs[k * SLOT_FEATURES:(k + 1) * SLOT_FEATURES] = (
                d / c.sight,
                ((u.x - me.x) / c.sight + 1.0) / 2.0,
                ((u.y - me.y) / c.sight + 1.0) / 2.0,
                u.health / c.hp_max,
                u.cooldown / c.cd_max,
                1.0,
            )
        return obs

    def observe_all(self, state: EnvState) -> np.ndarray:
        return np.stack([self.observe(state, a) for a in range(self.config.n_allies)])

    def enemy_health_removed(self, state: EnvState) -> int:
        return sum(self.config.hp_max - u.health for u in state.enemies())


def make_config(scenario: str, **overrides) -> SkirmishConfig:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown skirmish scenario {scenario!r}")
    known = {f.name for f in fields(SkirmishConfig)}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown environment settings {sorted(bad)}")
    return SkirmishConfig(**{**SCENARIOS[scenario], **overrides})
