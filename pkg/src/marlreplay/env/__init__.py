from ..nn import ConfigError
from .matrix import MatrixEnv, MatrixGame, MatrixState, climbing_game, exact_q, single_state_game
from .skirmish import (ALLY, ENEMY, SCENARIOS, EnvState, Skirmish, SkirmishConfig, Unit,
                       make_config)

SCENARIO_NAMES = ("m3v3", "m5v5", "matrix")


def make_env(scenario: str, **overrides):
    """Build the environment for a scenario name; `overrides` tune the skirmish constants."""
    if scenario == "matrix":
        if overrides:
            raise ConfigError("the matrix scenario takes no environment settings")
        return MatrixEnv()
    return Skirmish(make_config(scenario, **overrides))


def reset(scenario: str, seed: int, **overrides):
    env = make_env(scenario, **overrides)
    return env.reset(seed)


__all__ = [
    "ALLY", "ENEMY", "SCENARIOS", "SCENARIO_NAMES", "EnvState", "MatrixEnv", "MatrixGame",
    "MatrixState", "Skirmish", "SkirmishConfig", "Unit", "climbing_game", "exact_q",
    "make_config", "make_env", "reset", "single_state_game",
]
