"""Shared-parameter recurrent Q-network for decentralized agents.

One parameter set serves every agent; identity enters through a one-hot id
appended to the input alongside the previous action. The GRU hidden state is
both the recurrent carry and the per-agent summary consumed by the attention
module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffengine as de
from .diffengine import Tensor


@dataclass(frozen=True)
class AgentArch:
    obs_dim: int
    n_actions: int
    max_agents: int      # sizes the id one-hot; >= any team size the params will see
    hidden_dim: int = 64

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.max_agents


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from start to end over a horizon of environment steps."""
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 50_000

    def value(self, env_steps: int) -> float:
        if self.decay_steps <= 0 or env_steps >= self.decay_steps:
            return self.end
        frac = max(env_steps, 0) / self.decay_steps
        return self.start + frac * (self.end - self.start)


def init_agent_params(arch: AgentArch, rng: np.random.Generator,
                      dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def uni(fan_in, shape, name):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = de.parameter(rng.uniform(-bound, bound, size=shape), name, dtype=dtype)

    d = arch.hidden_dim
    uni(arch.input_dim, (arch.input_dim, d), "agent/enc_w")
    uni(arch.input_dim, (d,), "agent/enc_b")
    params.update(de.init_gru_params(d, d, rng, "agent/gru", dtype=dtype))
    uni(d, (d, arch.n_actions), "agent/head_w")
    uni(d, (arch.n_actions,), "agent/head_b")
    return params


def one_hot(ids: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (n,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def build_inputs(obs: np.ndarray, last_action_onehot: np.ndarray,
                 agent_id_onehot: np.ndarray) -> np.ndarray:
    """Assemble network input rows: observation, previous-action one-hot
    (all-zero on the first step), agent-id one-hot."""
    return np.concatenate([obs, last_action_onehot, agent_id_onehot], axis=-1)


def agent_forward(params: Mapping[str, Tensor], inputs: Tensor,
                  hidden: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrent step. ``inputs`` rows are (..., input_dim); returns
    per-row action values and the new hidden state."""
    x = de.relu(de.add(de.matmul(inputs, params["agent/enc_w"]), params["agent/enc_b"]))
    new_hidden = de.gru_cell(x, hidden, params, "agent/gru")
    q = de.add(de.matmul(new_hidden, params["agent/head_w"]), params["agent/head_b"])
    return q, new_hidden


def initial_hidden(n_rows: int, hidden_dim: int, dtype=np.float32) -> Tensor:
    return de.const(np.zeros((n_rows, hidden_dim)), dtype=dtype)


def select_actions(q_values: np.ndarray, avail: np.ndarray, alive: np.ndarray,
                   epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Availability-masked epsilon-greedy choice per agent.

    Dead agents emit the designated no-op (action 0). Greedy ties break to
    the lowest action id. Exploration draws one uniform available action per
    exploring agent.
    """
    n_agents, n_actions = q_values.shape
    actions = np.zeros(n_agents, dtype=np.int64)
    for m in range(n_agents):
        if not alive[m]:
            continue
        options = np.flatnonzero(avail[m])
        if options.size == 0:
            raise ValueError(f"agent {m}: no available actions (environment contract)")
        if epsilon > 0 and rng.random() < epsilon:
            actions[m] = options[rng.integers(options.size)]
        else:
            masked = np.where(avail[m], q_values[m], -np.inf)
            actions[m] = int(np.argmax(masked))
    return actions
