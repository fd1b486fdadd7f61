import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medc_lab.envs import (
    UNREACHABLE,
    EnvConfig,
    EnvError,
    bfs_distance,
    bfs_distance_map,
    is_connected,
    make_env,
    maze_generate,
    opposite_action,
    sensor_field,
    shaped_reward,
    walls_crossed,
)
from medc_lab.envs.fleet import CARRIED, WAITING
from medc_lab.envs.grid import MOVES, apply_move


def brute_distance(walls, a, b):
    """Bellman-Ford style relaxation over all cells; independent of the BFS queue."""
    h, w = walls.shape
    inf = 10**9
    d = np.full((h, w), inf)
    if walls[a]:
        return UNREACHABLE
    d[a] = 0
    changed = True
    while changed:
        changed = False
        for r, c in itertools.product(range(h), range(w)):
            if walls[r, c]:
                continue
            for dr, dc in MOVES[1:]:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and d[rr, cc] + 1 < d[r, c]:
                    d[r, c] = d[rr, cc] + 1
                    changed = True
    return UNREACHABLE if d[b] >= inf else int(d[b])


class TestGeometry:
    def test_opposite_pairs(self):
        assert [opposite_action(a) for a in range(9)] == [0, 5, 6, 7, 8, 1, 2, 3, 4]
        for a in range(9):
            assert opposite_action(opposite_action(a)) == a
            assert np.array_equal(MOVES[opposite_action(a)], -MOVES[a])

    def test_blocked_and_off_grid_moves_stay(self):
        walls = np.zeros((4, 4), bool)
        walls[1, 1] = True
        assert apply_move((0, 0), 4, walls) == (0, 0)  # SE into the wall
        assert apply_move((0, 0), 1, walls) == (0, 0)  # N off grid
        assert apply_move((0, 0), 3, walls) == (0, 1)

    def test_bfs_examples(self):
        walls = np.zeros((5, 5), bool)
        assert bfs_distance(walls, (2, 2), (2, 3)) == 1
        assert bfs_distance(walls, (2, 2), (2, 2)) == 0
        enclosed = np.zeros((5, 5), bool)
        enclosed[1:4, 1:4] = True
        enclosed[2, 2] = False
        assert bfs_distance(enclosed, (0, 0), (2, 2)) == UNREACHABLE

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_bfs_matches_relaxation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        walls = rng.random((6, 6)) < 0.3
        free = np.argwhere(~walls)
        if len(free) < 2:
            return
        a, b = (tuple(int(x) for x in free[i]) for i in rng.choice(len(free), 2, replace=False))
        assert bfs_distance(walls, a, b) == brute_distance(walls, a, b)

    def test_bfs_is_chebyshev_without_walls(self):
        walls = np.zeros((7, 9), bool)
        dist = bfs_distance_map(walls, (3, 2))
        r, c = np.indices(walls.shape)
        assert np.array_equal(dist, np.maximum(abs(r - 3), abs(c - 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_bfs_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        walls = rng.random((6, 6)) < 0.25
        free = [tuple(int(x) for x in p) for p in np.argwhere(~walls)]
        if len(free) < 3:
            return
        a, b, c = (free[i] for i in rng.choice(len(free), 3, replace=False))
        ab, bc, ac = bfs_distance(walls, a, b), bfs_distance(walls, b, c), bfs_distance(walls, a, c)
        assert ac <= ab + bc

    def test_sensor_examples(self):
        walls = np.zeros((10, 10), bool)
        assert sensor_field((4, 4), walls, (4, 4)) == 100.0
        assert sensor_field((4, 4), walls, (4, 7)) == sensor_field((4, 4), walls, (7, 4))
        assert sensor_field((4, 4), walls, (4, 7)) == pytest.approx(100 / 10)
        blocked = walls.copy()
        blocked[4, 5] = True
        assert walls_crossed(blocked, (4, 4), (4, 7)) == 1
        assert sensor_field((4, 4), blocked, (4, 7)) == sensor_field((4, 4), walls, (4, 7)) / 2

    def test_shaped_reward_uses_bfs_not_euclid(self):
        # wall column with a gap at the bottom: moving right towards the target is a detour
        walls = np.zeros((5, 5), bool)
        walls[0:4, 2] = True
        target = (0, 4)
        assert shaped_reward([(0, 1)], [(0, 1)], target, walls, 0.01) == 0
        # (1,1) -> (0,1): Euclid-closer to the target, BFS-farther (the way round is via row 4)
        assert bfs_distance(walls, (0, 1), target) > bfs_distance(walls, (1, 1), target)
        assert shaped_reward([(1, 1)], [(0, 1)], target, walls, 0.01) == 0
        assert shaped_reward([(0, 1)], [(1, 1)], target, walls, 0.01) == pytest.approx(0.01)


class TestTargetLocalization:
    def test_layout_is_reproducible_and_valid(self):
        cfg = EnvConfig.from_shorthand("A3W2", seed=7)
        a, b = make_env(cfg), make_env(cfg)
        oa, ob = a.reset(), b.reset()
        assert np.array_equal(oa, ob) and a.target == b.target
        assert oa.shape == (3, 5, 10, 10)
        assert a.walls.sum() == 2
        assert all(oa[k, 0].sum() == 1 for k in range(3))
        assert not a.walls[a.target] and a.target not in a.positions

    def test_a1w0(self):
        env = make_env(EnvConfig.from_shorthand("A1W0"))
        obs = env.reset()
        assert len(env.positions) == 1 and obs[0, 4].sum() == 0

    def test_infeasible_layout(self):
        with pytest.raises(EnvError):
            make_env(EnvConfig(height=4, width=4, n_agents=1, n_walls=15))

    def test_localizing_ends_episode_with_reward(self):
        env = make_env(EnvConfig(seed=1))
        env.reset()
        env.positions = [(env.target[0], env.target[1])]
        # step "stay" on the target
        res = env.step([0])
        assert res.reward == 1.0 and res.done and res.info["localized"]
        with pytest.raises(EnvError):
            env.step([0])

    def test_truncation_at_cap(self):
        env = make_env(EnvConfig(seed=2, max_episode_length=100))
        env.reset()
        env.target = (-5, -5)  # unreachable: the episode can only end by truncation
        for t in range(100):
            res = env.step([0])
            assert res.reward == 0
        assert res.done and res.info["truncated"] and env.t == 100

    def test_invalid_action(self):
        env = make_env(EnvConfig())
        env.reset()
        with pytest.raises(EnvError):
            env.step([9])
        with pytest.raises(EnvError):
            env.step([0, 0])

    def test_visit_counts_monotone(self):
        env = make_env(EnvConfig(n_agents=2, seed=3))
        env.reset()
        rng = np.random.default_rng(0)
        prev = env.visits.copy()
        for _ in range(30):
            if env.step(rng.integers(0, 9, 2)).done:
                break
            assert np.all(env.visits >= prev)
            prev = env.visits.copy()

    def test_trace_is_json_lines(self, tmp_path):
        env = make_env(EnvConfig(seed=4))
        env.enable_trace()
        env.reset()
        env.step([3])
        env.write_trace(tmp_path / "t.jsonl")
        rows = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1]
        assert set(rows[1]) >= {"positions", "actions", "reward", "flag"}


class TestFleet:
    def _env(self, **kw):
        env = make_env(EnvConfig(kind="fleet", seed=5, **kw))
        env.reset()
        return env

    def test_idle_step_costs(self):
        env = self._env(n_agents=1, n_customers=2)
        env.pickups = [(9, 9), (9, 8)]
        env.destinations = [(0, 9), (0, 8)]
        env.positions = [(0, 0)]
        assert env.step([0]).reward == pytest.approx(-0.005)

    def test_capacity_blocks_pickup(self):
        env = self._env(n_agents=1, n_customers=3, capacity=1)
        env.positions = [(5, 4)]
        env.pickups = [(5, 5), (5, 6), (0, 0)]
        env.destinations = [(9, 9), (9, 8), (9, 7)]
        r1 = env.step([3])  # E onto customer 0
        assert r1.reward == pytest.approx(0.1 - 0.005) and env.status[0] == CARRIED
        r2 = env.step([3])  # full: customer 1 stays waiting
        assert r2.reward == pytest.approx(-0.005) and env.status[1] == WAITING

    def test_final_delivery_terminates(self):
        env = self._env(n_agents=1, n_customers=1)
        env.positions = [(2, 2)]
        env.pickups = [(2, 3)]
        env.destinations = [(2, 4)]
        env.step([3])
        res = env.step([3])
        assert res.done and res.reward == pytest.approx(1.0 - 0.005)

    def test_observation_channels(self):
        env = self._env(n_agents=2, n_customers=4)
        obs = env.observe()
        assert obs.shape == (2, 5, 10, 10)
        assert obs[:, 2].sum() == 4 * 2  # both agents see all waiting pickups


class TestMaze:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(4, 12), st.integers(4, 12))
    def test_generated_maze_is_connected(self, seed, h, w):
        walls = maze_generate(seed, h, w)
        assert is_connected(walls) and (~walls).sum() > 0

    def test_all_dirty_at_reset(self):
        env = make_env(EnvConfig(kind="maze", seed=6))
        env.reset()
        assert env.dirty_fraction() == 1.0

    def test_cleaning_reward_and_termination(self):
        env = make_env(EnvConfig(kind="maze", seed=6, height=4, width=4, max_episode_length=500))
        env.reset()
        env.walls = np.zeros((4, 4), bool)
        env.dirty = np.zeros((4, 4), bool)
        env.dirty[0, 1] = True
        env.positions = [(0, 0)]
        res = env.step([3])
        assert res.done and res.reward == pytest.approx(0.01 - 0.005)
