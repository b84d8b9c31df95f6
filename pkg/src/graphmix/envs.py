"""Cooperative Dec-POMDP environments at desk scale.

Two games share one interface: a tabular two-phase coordination game whose
payoff tables come from configuration (so optimal returns can be computed
exactly by enumeration), and a grid capture game with partial observability,
unit death, and a team-level reward (so alive masking and credit assignment
are exercised). All constants in the grid game are this repo's choices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

NOOP = 0

# grid action deltas, indexed by action id: no-op, up, down, left, right
GRID_MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass(frozen=True)
class EnvSpec:
    """Static description of a Dec-POMDP instance."""
    n_agents: int
    obs_dim: int
    state_dim: int
    n_actions: int
    episode_limit: int
    gamma: float

    def __post_init__(self):
        if min(self.n_agents, self.obs_dim, self.state_dim,
               self.n_actions, self.episode_limit) <= 0:
            raise ValueError("EnvSpec: all dimensions must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"EnvSpec: gamma must be in [0,1), got {self.gamma}")


@dataclass
class StepResult:
    """Everything the learner sees after reset or one transition."""
    observations: np.ndarray   # (M, obs_dim) float32
    global_state: np.ndarray   # (state_dim,) float32
    reward: float
    terminal: bool
    alive_mask: np.ndarray     # (M,) bool
    avail_actions: np.ndarray  # (M, n_actions) bool


class EpisodeOver(RuntimeError):
    pass


class UnavailableAction(ValueError):
    pass


def _check_step(env, actions) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    if env._terminal:
        raise EpisodeOver("step called after terminal; reset first")
    if actions.shape != (env.spec.n_agents,):
        raise ValueError(f"expected {env.spec.n_agents} actions, got shape {actions.shape}")
    avail = env._avail_actions()
    for m, a in enumerate(actions):
        if not avail[m, a]:
            raise UnavailableAction(f"agent {m}: action {int(a)} not available")
    return actions


class TwoStepGame:
    """Two agents, two phases. Agent 0's first action selects a payoff table;
    in the second phase the joint action indexes that table. Payoffs are
    configuration inputs, so tests can probe monotonic-representation limits.
    """

    def __init__(self, payoffs, gamma: float = 0.99):
        tables = np.asarray(payoffs, dtype=np.float64)
        if tables.ndim != 3 or tables.shape[1] != tables.shape[2]:
            raise ValueError(f"payoffs must be (K, A, A), got {tables.shape}")
        self.tables = tables
        k, a = tables.shape[0], tables.shape[1]
        if k > a:
            raise ValueError(f"need n_actions >= n_tables so phase can be selected ({k} > {a})")
        self.n_tables = k
        self.spec = EnvSpec(n_agents=2, obs_dim=k + 1, state_dim=k + 1,
                            n_actions=a, episode_limit=2, gamma=gamma)
        self._terminal = True
        self._phase = 0      # 0 = selection step, 1+t = table t chosen
        self.optimal_return = brute_force_optimal_return(self)

    def _avail_actions(self) -> np.ndarray:
        return np.ones((2, self.spec.n_actions), dtype=bool)

    def _snapshot(self, reward: float = 0.0) -> StepResult:
        state = np.zeros(self.spec.state_dim, dtype=np.float32)
        state[self._phase] = 1.0
        obs = np.tile(state, (2, 1))
        return StepResult(observations=obs, global_state=state, reward=reward,
                          terminal=self._terminal, alive_mask=np.ones(2, dtype=bool),
                          avail_actions=self._avail_actions())

    def reset(self, seed: int | None = None) -> StepResult:
        self._terminal = False
        self._phase = 0
        self._steps = 0
        self._return = 0.0
        return self._snapshot()

    def step(self, actions) -> StepResult:
        actions = _check_step(self, actions)
        if self._phase == 0:
            table = min(int(actions[0]), self.n_tables - 1)
            self._phase = 1 + table
            reward = 0.0
        else:
            table = self._phase - 1
            reward = float(self.tables[table, actions[0], actions[1]])
            self._terminal = True
        self._return += (self.spec.gamma ** self._steps) * reward
        self._steps += 1
        return self._snapshot(reward)

    def success(self) -> bool:
        """Whether the finished episode achieved the enumerated optimum."""
        return self._terminal and abs(self._return - self.optimal_return) < 1e-9


def brute_force_optimal_return(env, max_sequences: int = 1_000_000) -> float:
    """Exact max discounted return over all joint-action sequences.

    Enumerates every sequence against fresh resets, so it is independent of
    any value network. Only valid for small deterministic tabular games.
    """
    spec = env.spec
    n_joint = spec.n_actions ** spec.n_agents
    if n_joint ** spec.episode_limit > max_sequences:
        raise ValueError(
            f"enumeration too large: {n_joint}^{spec.episode_limit} sequences "
            f"exceeds bound {max_sequences}")
    joint = list(itertools.product(range(spec.n_actions), repeat=spec.n_agents))
    best = -np.inf
    for seq in itertools.product(joint, repeat=spec.episode_limit):
        env.reset(seed=0)
        total, discount = 0.0, 1.0
        for actions in seq:
            res = env.step(np.array(actions))
            total += discount * res.reward
            discount *= spec.gamma
            if res.terminal:
                break
        best = max(best, total)
    env._terminal = True
    return float(best)


@dataclass
class CoopGridConfig:
    """Grid capture game parameters. Defaults target a task learnable on one
    CPU core while still exercising death, masking, and shared reward."""
    width: int = 5
    height: int = 5
    n_agents: int = 3
    n_targets: int = 1
    capture_quorum: int = 2
    p_death: float = 0.1
    target_move_prob: float = 0.3
    visibility: int = 4
    episode_limit: int = 30
    capture_reward: float = 10.0
    gamma: float = 0.99
    obs_ally_slots: int = 5
    obs_target_slots: int = 2
    state_ally_slots: int = 6
    state_target_slots: int = 2


class CoopGrid:
    """Agents must simultaneously stand next to a moving target to capture
    it; an agent adjacent to a target alone risks death. Reward is global
    only: +capture_reward per capture, nothing else.
    """

    def __init__(self, config: CoopGridConfig | None = None):
        self.cfg = config or CoopGridConfig()
        c = self.cfg
        if c.capture_quorum < 1 or c.n_agents < c.capture_quorum:
            raise ValueError("capture_quorum must be in [1, n_agents]")
        obs_dim = 2 + 3 * (c.obs_ally_slots + c.obs_target_slots)
        state_dim = 3 * (c.state_ally_slots + c.state_target_slots) + 1
        self.spec = EnvSpec(n_agents=c.n_agents, obs_dim=obs_dim, state_dim=state_dim,
                            n_actions=len(GRID_MOVES), episode_limit=c.episode_limit,
                            gamma=c.gamma)
        self._terminal = True

    # -- helpers ------------------------------------------------------------

    def _free_cells(self, exclude=()) -> list[tuple[int, int]]:
        occupied = set(exclude)
        occupied.update(tuple(p) for p, a in zip(self._agent_pos, self._alive) if a)
        occupied.update(tuple(p) for p, a in zip(self._target_pos, self._target_alive) if a)
        return [(x, y) for x in range(self.cfg.width) for y in range(self.cfg.height)
                if (x, y) not in occupied]

    def _avail_actions(self) -> np.ndarray:
        c = self.cfg
        avail = np.zeros((c.n_agents, len(GRID_MOVES)), dtype=bool)
        avail[:, NOOP] = True
        for m in range(c.n_agents):
            if not self._alive[m]:
                continue
            x, y = self._agent_pos[m]
            for a, (dx, dy) in enumerate(GRID_MOVES):
                if a == NOOP:
                    continue
                nx, ny = x + dx, y + dy
                if 0 <= nx < c.width and 0 <= ny < c.height:
                    avail[m, a] = True
        return avail

    def _observations(self) -> np.ndarray:
        c = self.cfg
        w1, h1 = max(c.width - 1, 1), max(c.height - 1, 1)
        obs = np.zeros((c.n_agents, self.spec.obs_dim), dtype=np.float32)
        for m in range(c.n_agents):
            if not self._alive[m]:
                continue
            x, y = self._agent_pos[m]
            obs[m, 0] = x / w1
            obs[m, 1] = y / h1

            def visible(entries):
                out = []
                for idx, (ex, ey) in entries:
                    dx, dy = ex - x, ey - y
                    if max(abs(dx), abs(dy)) <= c.visibility:
                        out.append((abs(dx) + abs(dy), idx, dx, dy))
                out.sort()
                return out

            allies = visible([(i, self._agent_pos[i]) for i in range(c.n_agents)
                              if i != m and self._alive[i]])
            base = 2
            for slot, (_, _, dx, dy) in enumerate(allies[:c.obs_ally_slots]):
                obs[m, base + 3 * slot: base + 3 * slot + 3] = (1.0, dx / w1, dy / h1)
            targets = visible([(i, self._target_pos[i]) for i in range(c.n_targets)
                               if self._target_alive[i]])
            base = 2 + 3 * c.obs_ally_slots
            for slot, (_, _, dx, dy) in enumerate(targets[:c.obs_target_slots]):
                obs[m, base + 3 * slot: base + 3 * slot + 3] = (1.0, dx / w1, dy / h1)
        return obs

    def _state(self) -> np.ndarray:
        return fixed_size_state(
            agent_pos=self._agent_pos, agent_alive=self._alive,
            target_pos=self._target_pos, target_alive=self._target_alive,
            k_allies=self.cfg.state_ally_slots, k_targets=self.cfg.state_target_slots,
            grid=(self.cfg.width, self.cfg.height),
            step_frac=self._steps / self.cfg.episode_limit)

    def _snapshot(self, reward: float = 0.0) -> StepResult:
        return StepResult(observations=self._observations(), global_state=self._state(),
                          reward=reward, terminal=self._terminal,
                          alive_mask=self._alive.copy(),
                          avail_actions=self._avail_actions())

    # -- interface ----------------------------------------------------------

    def reset(self, seed: int | None = None) -> StepResult:
        c = self.cfg
        self._rng = np.random.default_rng(seed)
        self._alive = np.ones(c.n_agents, dtype=bool)
        self._target_alive = np.ones(c.n_targets, dtype=bool)
        self._agent_pos = []
        self._target_pos = []
        cells = [(x, y) for x in range(c.width) for y in range(c.height)]
        picks = self._rng.choice(len(cells), size=c.n_agents + c.n_targets, replace=False)
        for i in range(c.n_agents):
            self._agent_pos.append(cells[picks[i]])
        for j in range(c.n_targets):
            self._target_pos.append(cells[picks[c.n_agents + j]])
        self._steps = 0
        self._terminal = False
        self._captured = 0
        return self._snapshot()

    def step(self, actions) -> StepResult:
        c = self.cfg
        actions = _check_step(self, actions)

        # agents move in id order; a move into an occupied cell is cancelled
        for m in range(c.n_agents):
            if not self._alive[m] or actions[m] == NOOP:
                continue
            dx, dy = GRID_MOVES[actions[m]]
            x, y = self._agent_pos[m]
            nxt = (x + dx, y + dy)
            occupied = {tuple(p) for i, p in enumerate(self._agent_pos)
                        if i != m and self._alive[i]}
            occupied |= {tuple(p) for j, p in enumerate(self._target_pos)
                         if self._target_alive[j]}
            if nxt not in occupied:
                self._agent_pos[m] = nxt

        # scripted targets: lazy random walk into free neighboring cells
        for j in range(c.n_targets):
            if not self._target_alive[j]:
                continue
            if self._rng.random() >= c.target_move_prob:
                continue
            x, y = self._target_pos[j]
            options = []
            free = set(self._free_cells())
            for dx, dy in GRID_MOVES[1:]:
                nxt = (x + dx, y + dy)
                if 0 <= nxt[0] < c.width and 0 <= nxt[1] < c.height and nxt in free:
                    options.append(nxt)
            if options:
                self._target_pos[j] = options[self._rng.integers(len(options))]

        # capture and lone-agent death resolution
        reward = 0.0
        for j in range(c.n_targets):
            if not self._target_alive[j]:
                continue
            tx, ty = self._target_pos[j]
            adjacent = [m for m in range(c.n_agents) if self._alive[m]
                        and abs(self._agent_pos[m][0] - tx) + abs(self._agent_pos[m][1] - ty) == 1]
            if len(adjacent) >= c.capture_quorum:
                self._target_alive[j] = False
                self._captured += 1
                reward += c.capture_reward
            elif len(adjacent) == 1 and self._rng.random() < c.p_death:
                self._alive[adjacent[0]] = False

        self._steps += 1
        if not self._target_alive.any():
            self._terminal = True
        elif not self._alive.any():
            self._terminal = True
        elif self._steps >= c.episode_limit:
            self._terminal = True
        return self._snapshot(reward)

    def success(self) -> bool:
        return self._terminal and self._captured == self.cfg.n_targets


def fixed_size_state(agent_pos, agent_alive, target_pos, target_alive,
                     k_allies: int, k_targets: int, grid: tuple[int, int],
                     step_frac: float = 0.0) -> np.ndarray:
    """Global state with a length independent of team size.

    Encodes the k_allies alive agents with the smallest mean distance to the
    remaining targets and the k_targets targets with the smallest mean
    distance to the alive agents; missing entries are zero slots. Each slot
    is (present, x, y) normalized to the grid.
    """
    w1, h1 = max(grid[0] - 1, 1), max(grid[1] - 1, 1)
    alive_agents = [(i, p) for i, p in enumerate(agent_pos) if agent_alive[i]]
    live_targets = [(j, p) for j, p in enumerate(target_pos) if target_alive[j]]

    def mean_dist(pos, others):
        if not others:
            return 0.0
        return float(np.mean([abs(pos[0] - q[0]) + abs(pos[1] - q[1]) for _, q in others]))

    allies = sorted(alive_agents, key=lambda ip: (mean_dist(ip[1], live_targets), ip[0]))
    targets = sorted(live_targets, key=lambda jp: (mean_dist(jp[1], alive_agents), jp[0]))

    state = np.zeros(3 * (k_allies + k_targets) + 1, dtype=np.float32)
    for slot, (_, (x, y)) in enumerate(allies[:k_allies]):
        state[3 * slot: 3 * slot + 3] = (1.0, x / w1, y / h1)
    base = 3 * k_allies
    for slot, (_, (x, y)) in enumerate(targets[:k_targets]):
        state[base + 3 * slot: base + 3 * slot + 3] = (1.0, x / w1, y / h1)
    state[-1] = step_frac
    return state


DEFAULT_TWOSTEP_PAYOFFS = [
    [[7.0, 7.0], [7.0, 7.0]],
    [[0.0, 1.0], [1.0, 8.0]],
]


def make_env(name: str, **kwargs):
    """Environment factory used by the run configuration."""
    if name == "twostep":
        payoffs = kwargs.pop("payoffs", DEFAULT_TWOSTEP_PAYOFFS)
        return TwoStepGame(payoffs, **kwargs)
    if name == "coopgrid":
        return CoopGrid(CoopGridConfig(**kwargs))
    raise ValueError(f"unknown environment {name!r} (expected 'twostep' or 'coopgrid')")
