import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlreplay import env as envmod
from marlreplay.env import trace
from marlreplay.env.skirmish import ALLY, ENEMY, EnvState, Skirmish, SkirmishConfig, Unit


def duel_state(units):
    return EnvState(tick=0, units=units)


@pytest.fixture
def duel():
    return Skirmish(SkirmishConfig(n_allies=1, n_enemies=1))


def test_reset_m3v3_rosters():
    sk = envmod.make_env("m3v3")
    for seed in range(5):
        state, obs = sk.reset(seed)
        assert [u.team for u in state.units] == [ALLY] * 3 + [ENEMY] * 3
        assert [u.id for u in state.units] == [1, 2, 3, 4, 5, 6]
        assert all(u.health == 40 and u.cooldown == 0 and u.alive for u in state.units)
        assert obs.shape == (3, 36)


def test_reset_is_deterministic():
    sk = envmod.make_env("m5v5")
    a, oa = sk.reset(123)
    b, ob = sk.reset(123)
    assert a == b and oa.tobytes() == ob.tobytes()
    c, _ = sk.reset(124)
    assert c.snapshot() != a.snapshot()


def test_matrix_reset_has_no_units():
    state, obs = envmod.reset("matrix", 0)
    assert state.units == [] and obs.shape == (2, 1)


def test_unknown_scenario():
    with pytest.raises(envmod.ConfigError):
        envmod.make_env("m9v9")


def test_attack_in_range_deals_damage(duel):
    s = duel_state([Unit(1, ALLY, 5, 5, 40), Unit(2, ENEMY, 7, 5, 40)])
    s2, _, r, done = duel.step(s, [duel.attack0])
    assert s2.units[1].health == 34 and r == 6.0 and not done
    assert s2.units[0].cooldown == 13  # reset to 14, then decremented
    assert s.units[1].health == 40  # input state untouched


def test_victory_bonus_sums_surviving_health():
    sk = Skirmish(SkirmishConfig(n_allies=2, n_enemies=1))
    s = duel_state([Unit(1, ALLY, 5, 5, 40), Unit(2, ALLY, 4, 5, 10), Unit(3, ENEMY, 7, 5, 6, cooldown=5)])
    s2, _, r, done = sk.step(s, [sk.attack0, sk.noop])
    assert done and sk.won(s2)
    assert r == 6 + 50


def test_overkill_counts_only_health_lost():
    sk = Skirmish(SkirmishConfig(n_allies=2, n_enemies=2))
    s = duel_state([Unit(1, ALLY, 5, 5, 40), Unit(2, ALLY, 5, 6, 40),
                    Unit(3, ENEMY, 7, 5, 4, cooldown=3), Unit(4, ENEMY, 15, 15, 40, cooldown=3)])
    s2, _, r, done = sk.step(s, [sk.attack0, sk.attack0])
    assert r == 4 and not s2.units[2].alive and not done


def test_inert_tick_only_cooldowns_change():
    sk = Skirmish(SkirmishConfig(n_allies=1, n_enemies=1))
    s = duel_state([Unit(1, ALLY, 0, 0, 30, cooldown=5), Unit(2, ENEMY, 15, 15, 20, cooldown=2)])
    s2, _, r, _ = sk.step(s, [sk.noop])
    a, e = s2.units
    assert (a.x, a.y, a.health, a.cooldown) == (0, 0, 30, 4)
    assert (e.health, e.cooldown) == (20, 1)
    assert r == 0


def test_invalid_attack_is_inert_and_counted(duel):
    s = duel_state([Unit(1, ALLY, 0, 0, 40), Unit(2, ENEMY, 10, 10, 40)])
    s2, _, r, _ = duel.step(s, [duel.attack0])
    assert r == 0 and s2.invalid_attacks == 1 and s2.units[0].cooldown == 0


def test_observe_self_slot(duel):
    s = duel_state([Unit(1, ALLY, 5, 5, 40), Unit(2, ENEMY, 15, 15, 40)])
    obs = duel.observe(s, 0)
    np.testing.assert_array_equal(obs[:6], [0.0, 0.5, 0.5, 1.0, 0.0, 1.0])


def test_observe_enemy_slot_arithmetic(duel):
    s = duel_state([Unit(1, ALLY, 2, 2, 40), Unit(2, ENEMY, 5, 6, 20, cooldown=7)])
    obs = duel.observe(s, 0)
    np.testing.assert_allclose(obs[6:], [0.625, 0.6875, 0.75, 0.5, 0.5, 1.0], rtol=0, atol=1e-15)


def test_observe_out_of_sight_is_zero(duel):
    s = duel_state([Unit(1, ALLY, 0, 0, 40), Unit(2, ENEMY, 9, 0, 40)])
    assert np.all(duel.observe(s, 0)[6:] == 0)


def test_dead_observer_sees_nothing(duel):
    s = duel_state([Unit(1, ALLY, 0, 0, 0, alive=False), Unit(2, ENEMY, 1, 0, 40)])
    assert np.all(duel.observe(s, 0) == 0)
    assert duel.legal_actions(s, 0).sum() == 1


def test_opponent_attacks_adjacent_ally(duel):
    s = duel_state([Unit(1, ALLY, 5, 5, 40), Unit(2, ENEMY, 6, 5, 40)])
    assert duel.opponent_policy(s) == [("attack", 1)]


def test_opponent_walks_toward_ally_due_east(duel):
    s = duel_state([Unit(1, ALLY, 12, 3, 40), Unit(2, ENEMY, 2, 3, 40)])
    assert duel.opponent_policy(s) == [("move", 1)]


def test_opponent_tie_break_lowest_id():
    sk = Skirmish(SkirmishConfig(n_allies=2, n_enemies=1))
    s = duel_state([Unit(1, ALLY, 5, 8, 40), Unit(2, ALLY, 5, 2, 40), Unit(3, ENEMY, 5, 5, 40)])
    assert sk.opponent_policy(s) == [("attack", 1)]
    far = duel_state([Unit(1, ALLY, 5, 15, 40), Unit(2, ALLY, 5, 0, 40), Unit(3, ENEMY, 5, 7, 40)])
    far.units[2].y = 8  # distance 7 to unit 1, 8 to unit 2
    assert sk.opponent_policy(far) == [("move", 0)]
    tie = duel_state([Unit(1, ALLY, 5, 15, 40), Unit(2, ALLY, 5, 1, 40), Unit(3, ENEMY, 5, 8, 40)])
    assert sk.opponent_policy(tie) == [("move", 0)]


def test_move_collision_lower_id_wins():
    sk = Skirmish(SkirmishConfig(n_allies=2, n_enemies=1))
    s = duel_state([Unit(1, ALLY, 4, 5, 40), Unit(2, ALLY, 6, 5, 40), Unit(3, ENEMY, 15, 15, 40)])
    s2, _, _, _ = sk.step(s, [1, 3])  # 1 moves E, 2 moves W, both into (5, 5)
    assert (s2.units[0].x, s2.units[1].x) == (5, 6)


def test_step_is_pure():
    sk = envmod.make_env("m3v3")
    s, _ = sk.reset(7)
    a = sk.step(s, [0, 4, 5])
    b = sk.step(s, [0, 4, 5])
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes() and a[2] == b[2]


def random_episode(sk, seed):
    rng = np.random.default_rng(seed)
    s, obs = sk.reset(seed)
    rewards, states, all_obs = [], [s], [obs]
    done = False
    while not done:
        acts = [rng.integers(sk.n_actions) if u.alive else sk.noop for u in s.allies()]
        s, obs, r, done = sk.step(s, acts)
        rewards.append(r)
        states.append(s)
        all_obs.append(obs)
    return states, rewards, all_obs


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["m3v3", "m5v5"]))
def test_random_play_invariants(seed, scenario):
    sk = envmod.make_env(scenario)
    c = sk.config
    states, rewards, all_obs = random_episode(sk, seed)
    for prev, cur, r in zip(states, states[1:], rewards):
        lost = sum(p.health - q.health for p, q in zip(prev.enemies(), cur.enemies()))
        bonus = sum(u.health for u in cur.allies() if u.alive) if sk.won(cur) else 0
        assert r == lost + bonus
        for p, q in zip(prev.units, cur.units):
            assert 0 <= q.health <= c.hp_max and 0 <= q.cooldown <= c.cd_max
            if not p.alive:
                assert (q.x, q.y, q.health) == (p.x, p.y, p.health) and not q.alive
        cells = [(u.x, u.y) for u in cur.units if u.alive]
        assert len(cells) == len(set(cells))
    for obs in all_obs:
        assert np.all((obs >= 0) & (obs <= 1))
        slots = obs.reshape(obs.shape[0], -1, 6)
        assert np.all(slots[slots[..., 5] == 0] == 0)
    assert states[-1].done and len(rewards) <= c.t_max
    final = states[-1]
    total = sum(rewards)
    expected = sk.enemy_health_removed(final)
    if sk.won(final):
        expected += sum(u.health for u in final.allies() if u.alive)
    assert total == expected


def test_trace_roundtrip_and_audit(tmp_path):
    sk = envmod.make_env("m3v3")
    rng = np.random.default_rng(0)
    s, _ = sk.reset(3)
    recs = [trace.tick_record(0, [], 0.0, s.snapshot())]
    done = False
    while not done:
        acts = [int(rng.integers(sk.n_actions)) for _ in range(3)]
        s, _, r, done = sk.step(s, acts)
        recs.append(trace.tick_record(s.tick, acts, r, s.snapshot()))
    trace.write_trace(tmp_path / "t.jsonl", recs)
    back = trace.read_trace(tmp_path / "t.jsonl")
    assert back == recs
    summary = trace.audit_trace(back, 40)
    assert summary["total_reward"] >= summary["enemy_health_removed"]


# value-iteration oracle -------------------------------------------------------

def two_state_game():
    p1 = np.array([[[0.7, 0.0], [0.5, 0.2]], [[0.4, 1.0], [0.0, 0.3]]])  # P(next = 1)
    P = np.stack([1 - p1, p1], axis=-1)
    return envmod.MatrixGame([[[1, 0], [0, 2]], [[0, 3], [1, 0]]], P, gamma=0.9)


def test_exact_q_one_step_game():
    game = envmod.single_state_game([[2.0, 0.0], [0.0, 1.0]])
    q = envmod.exact_q(game, np.array([[0.5, 0.5]]))
    np.testing.assert_allclose(q, [[1.0, 0.5]], atol=1e-15)


def test_exact_q_gamma_zero_is_expected_payoff():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(3, 3, 2))
    P = np.full((3, 3, 2, 3), 1 / 3)
    pi = rng.dirichlet(np.ones(2), size=3)
    q = envmod.exact_q(envmod.MatrixGame(r, P, gamma=0.0), pi)
    np.testing.assert_allclose(q, np.einsum("sap,sp->sa", r, pi), atol=1e-14)


def test_exact_q_matches_policy_enumeration_fixture():
    # fixture from exact rational policy enumeration with linear solves
    q = envmod.exact_q(two_state_game(), np.array([[0.4, 0.6], [0.9, 0.1]]), tol=1e-12)
    np.testing.assert_allclose(q, [[10.523394131641554, 11.314829500396511],
                                   [10.384853291038858, 11.076923076923077]], atol=1e-9)


def test_exact_q_residual_below_tol():
    game = two_state_game()
    pi = np.array([[0.3, 0.7], [0.5, 0.5]])
    for tol in (1e-3, 1e-8):
        q = envmod.exact_q(game, pi, tol=tol)
        from marlreplay.env.matrix import bellman_backup
        assert np.max(np.abs(bellman_backup(game, pi, q) - q)) < tol


def test_exact_q_for_second_agent_transposes():
    game = envmod.single_state_game([[2.0, 0.0], [1.0, 1.0]])
    q = envmod.exact_q(game, np.array([[1.0, 0.0]]), agent=1)
    np.testing.assert_allclose(q, [[2.0, 0.0]])


def test_exact_q_rejects_gamma_one():
    game = two_state_game()
    game.gamma = 1.0
    with pytest.raises(envmod.ConfigError):
        envmod.exact_q(game, np.full((2, 2), 0.5))


def test_matrix_game_validates_rows():
    with pytest.raises(envmod.ConfigError):
        envmod.MatrixGame(np.zeros((1, 2, 2)), np.full((1, 2, 2, 1), 0.5), gamma=0.5)


def test_matrix_env_episode():
    m = envmod.MatrixEnv()
    s, _ = m.reset(0)
    s2, obs, r, done = m.step(s, [0, 0])
    assert done and r == 11.0 and m.won(s2)
    s3, _, r, _ = m.step(s, [1, 1])
    assert r == 7.0 and not m.won(s3)
