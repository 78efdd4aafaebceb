"""Line-delimited JSON episode traces: one record per tick."""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Iterable


def tick_record(tick: int, actions, reward: float, units: list[dict]) -> dict:
    return {"tick": int(tick), "actions": [int(a) for a in actions],
            "reward": float(reward), "units": units}


def write_trace(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(source: str | Path | IO[str]) -> list[dict]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    return [json.loads(line) for line in source if line.strip()]


def audit_trace(records: list[dict], hp_max: int) -> dict:
    """Replay a skirmish trace and check reward conservation tick by tick.

    Each record's `units` is the snapshot after that tick; the first record
    may be the spawn snapshot with tick 0.
    """
    prev = None
    total = 0.0
    for rec in records:
        units = {u["id"]: u for u in rec["units"]}
        if prev is not None:
            lost = sum(prev[i]["health"] - units[i]["health"] for i in units if units[i]["team"] == 1)
            bonus = 0
            if all(not u["alive"] for u in units.values() if u["team"] == 1):
                bonus = sum(u["health"] for u in units.values() if u["team"] == 0 and u["alive"])
            if rec["reward"] != lost + bonus:
                raise AssertionError(f"tick {rec['tick']}: reward {rec['reward']} != {lost} + {bonus}")
        total += rec["reward"]
        prev = units
    removed = sum(hp_max - u["health"] for u in prev.values() if u["team"] == 1) if prev else 0
    return {"total_reward": total, "enemy_health_removed": removed}
