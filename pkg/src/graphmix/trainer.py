"""Episode replay, loss assembly, double-Q updates, and the training loop.

The global temporal-difference target bootstraps through the target mixer at
the main networks' greedy joint action; per-agent local targets split the
team reward by the main mixer's reward fractions, through which gradients
flow. Whole episodes are replayed through the recurrent agents, padded to
the longest episode in the sampled batch and masked everywhere.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffengine as de
from .agent import (AgentArch, EpsilonSchedule, agent_forward, build_inputs,
                    init_agent_params, one_hot, select_actions)
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import RunConfig, make_env_from_config, to_dict
from .diffengine import Tensor
from .graphattn import edge_weights, init_attention_params, uniform_edge_weights
from .mixer import MixerArch, eval_hypernets, init_hyper_params, mix


class TrainingDiverged(RuntimeError):
    pass


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """All randomness flows from one root seed through named sub-streams."""
    names = ("env", "exploration", "init", "sampling", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class Model:
    agent_arch: AgentArch
    mixer_arch: MixerArch
    attention: bool
    params: dict[str, Tensor]

    @property
    def uses_mixer_params(self) -> bool:
        return self.mixer_arch.variant != "vdn"


def build_model(env_spec, model_cfg, rng: np.random.Generator,
                dtype=np.float32) -> Model:
    max_agents = model_cfg.max_agents or env_spec.n_agents
    if max_agents < env_spec.n_agents:
        raise ValueError(f"model.max_agents={max_agents} is smaller than the "
                         f"environment team size {env_spec.n_agents}")
    agent_arch = AgentArch(obs_dim=env_spec.obs_dim, n_actions=env_spec.n_actions,
                           max_agents=max_agents, hidden_dim=model_cfg.hidden_dim)
    mixer_arch = MixerArch(state_dim=env_spec.state_dim, variant=model_cfg.variant,
                           n_layers=model_cfg.gnn_layers, embed_dim=model_cfg.embed_dim,
                           gin_hidden=model_cfg.gin_hidden,
                           hyper_hidden=model_cfg.hyper_hidden)
    params = init_agent_params(agent_arch, rng, dtype=dtype)
    attention = bool(model_cfg.attention) and mixer_arch.variant != "vdn"
    if attention:
        params.update(init_attention_params(agent_arch.hidden_dim, rng,
                                            embed_dim=model_cfg.attn_dim, dtype=dtype))
    if mixer_arch.variant != "vdn":
        params.update(init_hyper_params(mixer_arch, rng, dtype=dtype))
    return Model(agent_arch=agent_arch, mixer_arch=mixer_arch,
                 attention=attention, params=params)


def make_target(model: Model) -> dict[str, Tensor]:
    return de.freeze_params(model.params)


# ---------------------------------------------------------------------------
# episodes and replay
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """One whole episode; observation-like arrays carry T+1 rows."""
    obs: np.ndarray        # (T+1, M, obs_dim)
    state: np.ndarray      # (T+1, state_dim)
    avail: np.ndarray      # (T+1, M, n_actions) bool
    alive: np.ndarray      # (T+1, M) bool
    actions: np.ndarray    # (T, M) int64
    rewards: np.ndarray    # (T,)
    terminated: np.ndarray  # (T,) float, 1.0 on the final step

    @property
    def length(self) -> int:
        return self.actions.shape[0]


class ReplayBuffer:
    """FIFO ring of whole episodes; capacity is never exceeded."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self._episodes: list[EpisodeRecord] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, episode: EpisodeRecord) -> None:
        if len(self._episodes) < self.capacity:
            self._episodes.append(episode)
        else:
            self._episodes[self._next] = episode
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeRecord]:
        if len(self._episodes) < batch_size:
            raise ValueError(f"buffer holds {len(self._episodes)} episodes, "
                             f"need {batch_size}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[i] for i in idx]


@dataclass
class RolloutStats:
    length: int
    discounted_return: float
    undiscounted_return: float
    success: bool


def rollout_episode(env, model: Model, epsilon: float, rng: np.random.Generator,
                    reset_seed: int, buffer: ReplayBuffer | None = None
                    ) -> tuple[EpisodeRecord, RolloutStats]:
    """Play one episode with availability-masked epsilon-greedy actions.
    Appends to the buffer when one is given."""
    spec = env.spec
    arch = model.agent_arch
    m = spec.n_agents
    res = env.reset(reset_seed)
    id_oh = one_hot(np.arange(m), arch.max_agents)
    last_oh = np.zeros((m, spec.n_actions), dtype=np.float32)
    hidden = de.const(np.zeros((m, arch.hidden_dim)), dtype=np.float32)

    obs_l, state_l, avail_l, alive_l = [res.observations], [res.global_state], \
        [res.avail_actions], [res.alive_mask]
    actions_l, rewards_l, term_l = [], [], []
    disc, und, discount = 0.0, 0.0, 1.0
    while not res.terminal:
        inputs = build_inputs(res.observations.astype(np.float32), last_oh, id_oh)
        with de.no_grad():
            q, hidden = agent_forward(model.params, de.const(inputs), hidden)
        acts = select_actions(q.values, res.avail_actions, res.alive_mask, epsilon, rng)
        res = env.step(acts)
        obs_l.append(res.observations)
        state_l.append(res.global_state)
        avail_l.append(res.avail_actions)
        alive_l.append(res.alive_mask)
        actions_l.append(acts)
        rewards_l.append(res.reward)
        term_l.append(1.0 if res.terminal else 0.0)
        disc += discount * res.reward
        und += res.reward
        discount *= spec.gamma
        last_oh = one_hot(acts, spec.n_actions)

    record = EpisodeRecord(
        obs=np.stack(obs_l).astype(np.float32),
        state=np.stack(state_l).astype(np.float32),
        avail=np.stack(avail_l),
        alive=np.stack(alive_l),
        actions=np.stack(actions_l).astype(np.int64),
        rewards=np.asarray(rewards_l, dtype=np.float32),
        terminated=np.asarray(term_l, dtype=np.float32),
    )
    if buffer is not None:
        buffer.add(record)
    stats = RolloutStats(length=record.length, discounted_return=disc,
                         undiscounted_return=und, success=bool(env.success()))
    return record, stats


@dataclass
class EvalStats:
    success_rate: float
    mean_return: float
    mean_length: float


def evaluate(env, model: Model, n_episodes: int, rng: np.random.Generator) -> EvalStats:
    """Greedy policy (epsilon = 0), no buffer writes, deterministic given rng."""
    if n_episodes <= 0:
        raise ValueError("evaluate: n_episodes must be positive")
    succ, rets, lens = 0, [], []
    for _ in range(n_episodes):
        _, stats = rollout_episode(env, model, 0.0, rng,
                                   reset_seed=int(rng.integers(0, 2**31)))
        succ += int(stats.success)
        rets.append(stats.discounted_return)
        lens.append(stats.length)
    return EvalStats(success_rate=succ / n_episodes,
                     mean_return=float(np.mean(rets)),
                     mean_length=float(np.mean(lens)))


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def _pad_batch(episodes: list[EpisodeRecord]):
    b = len(episodes)
    t_max = max(ep.length for ep in episodes)
    first = episodes[0]
    m, o = first.obs.shape[1:]
    a = first.avail.shape[2]
    s = first.state.shape[1]
    obs = np.zeros((b, t_max + 1, m, o), dtype=np.float32)
    state = np.zeros((b, t_max + 1, s), dtype=np.float32)
    avail = np.zeros((b, t_max + 1, m, a), dtype=bool)
    avail[..., 0] = True  # padded rows keep the no-op legal
    alive = np.zeros((b, t_max + 1, m), dtype=bool)
    actions = np.zeros((b, t_max, m), dtype=np.int64)
    rewards = np.zeros((b, t_max), dtype=np.float32)
    terminated = np.zeros((b, t_max), dtype=np.float32)
    filled = np.zeros((b, t_max), dtype=np.float32)
    for i, ep in enumerate(episodes):
        t = ep.length
        obs[i, :t + 1] = ep.obs
        state[i, :t + 1] = ep.state
        avail[i, :t + 1] = ep.avail
        alive[i, :t + 1] = ep.alive
        actions[i, :t] = ep.actions
        rewards[i, :t] = ep.rewards
        terminated[i, :t] = ep.terminated
        filled[i, :t] = 1.0
    return obs, state, avail, alive, actions, rewards, terminated, filled


def unroll_agents(params: Mapping[str, Tensor], arch: AgentArch,
                  obs: np.ndarray, actions: np.ndarray,
                  dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Replay padded episodes through the recurrent agents.

    Returns action values and hidden states, each (B, T+1, M, -1). The
    previous-action one-hot is all-zero on the first step.
    """
    b, t1, m, _ = obs.shape
    act_oh = np.zeros((b, t1, m, arch.n_actions), dtype=dtype)
    act_oh[:, 1:] = one_hot(actions, arch.n_actions, dtype)
    id_oh = np.broadcast_to(one_hot(np.arange(m), arch.max_agents, dtype),
                            (b, t1, m, arch.max_agents))
    inputs = build_inputs(obs.astype(dtype), act_oh, id_oh)
    hidden = de.const(np.zeros((b * m, arch.hidden_dim)), dtype=dtype)
    qs, hs = [], []
    for t in range(t1):
        x = de.const(np.ascontiguousarray(inputs[:, t].reshape(b * m, -1)), dtype=dtype)
        q, hidden = agent_forward(params, x, hidden)
        qs.append(de.reshape(q, (b, m, arch.n_actions)))
        hs.append(de.reshape(hidden, (b, m, arch.hidden_dim)))
    return de.stack(qs, axis=1), de.stack(hs, axis=1)


def _mixer_pass(params: Mapping[str, Tensor], model: Model, hidden_bt: Tensor,
                agent_q_bt, state_bt: np.ndarray, alive_bt: np.ndarray, dtype):
    """Edges + hypernets + mix over a flattened (B*T) batch. Rows whose mask
    is all-dead are tolerated here and masked out by the caller."""
    arch = model.mixer_arch
    if arch.variant == "vdn":
        return mix(agent_q_bt, None, alive_bt, arch, None, dtype=dtype,
                   _allow_all_dead=True)
    if model.attention:
        edges = edge_weights(params, hidden_bt, alive_bt, _allow_all_dead=True)
    else:
        edges = uniform_edge_weights(alive_bt, dtype=dtype, _allow_all_dead=True)
    blocks = eval_hypernets(params, de.const(state_bt, dtype=dtype), arch, dtype=dtype)
    return mix(agent_q_bt, edges, alive_bt, arch, blocks, dtype=dtype,
               _allow_all_dead=True)


@dataclass
class LossReport:
    total: Tensor
    loss_global: float
    loss_local_mean: float
    global_sq_sum: float
    local_sq_sums: np.ndarray   # per agent
    global_count: float
    local_counts: np.ndarray    # per agent


def compute_losses(episodes: list[EpisodeRecord], model: Model,
                   target_params: Mapping[str, Tensor], gamma: float,
                   lambda_local: float, dtype=np.float32) -> LossReport:
    """Padded-batch global and local temporal-difference losses.

    Global target: reward plus the discounted target-network joint value at
    the main networks' availability-masked greedy next action (double-Q);
    terminal steps keep only the reward. Local targets split the reward by
    the main mixer's fractions (gradients flow through them) and bootstrap
    each agent's own target value.
    """
    if not episodes:
        raise ValueError("compute_losses: empty batch")
    obs, state, avail, alive, actions, rewards, terminated, filled = _pad_batch(episodes)
    b, t1, m, _ = obs.shape
    t = t1 - 1
    arch = model.agent_arch

    q_main, h_main = unroll_agents(model.params, arch, obs, actions, dtype)
    with de.no_grad():
        q_tgt, h_tgt = unroll_agents(target_params, arch, obs, actions, dtype)

    # chosen-action values at the acted steps
    chosen = de.take_along(de.narrow(q_main, 1, 0, t), actions[..., None], axis=-1)
    chosen = de.reshape(chosen, (b, t, m))

    # main mixer over the acted steps
    alive_now = alive[:, :t].reshape(b * t, m)
    h_now = de.reshape(de.narrow(h_main, 1, 0, t), (b * t, m, arch.hidden_dim))
    state_now = state[:, :t].reshape(b * t, -1)
    out_main = _mixer_pass(model.params, model, h_now,
                           de.reshape(chosen, (b * t, m)), state_now, alive_now, dtype)
    q_tot = de.reshape(out_main.q_tot, (b, t))
    alpha = de.reshape(out_main.alpha, (b, t, m))

    # double-Q global target, constant w.r.t. main parameters
    with de.no_grad():
        q_main_next = q_main.values[:, 1:]
        masked_next = np.where(avail[:, 1:], q_main_next, -np.inf)
        a_star = masked_next.argmax(axis=-1)
        tgt_next_vals = np.take_along_axis(q_tgt.values[:, 1:], a_star[..., None],
                                           axis=-1)[..., 0]
        alive_next = alive[:, 1:].reshape(b * t, m)
        h_tgt_next = de.const(h_tgt.values[:, 1:].reshape(b * t, m, arch.hidden_dim),
                              dtype=dtype)
        out_tgt = _mixer_pass(target_params, model, h_tgt_next,
                              tgt_next_vals.reshape(b * t, m),
                              state[:, 1:].reshape(b * t, -1), alive_next, dtype)
        q_tot_next = out_tgt.q_tot.values.reshape(b, t)
        y_global = rewards + gamma * (1.0 - terminated) * q_tot_next

    global_sq = de.mul(de.sqdiff(q_tot, de.const(y_global, dtype=dtype)),
                       de.const(filled, dtype=dtype))
    global_count = max(float(filled.sum()), 1.0)
    loss_global = de.scale(de.sum_(de.reshape(global_sq, (-1,))), 1.0 / global_count)

    # per-agent local losses; bootstrap from each agent's own target values
    with de.no_grad():
        next_best = np.where(avail[:, 1:], q_tgt.values[:, 1:], -np.inf).max(axis=-1)
        boot = gamma * (1.0 - terminated[..., None]) * next_best  # (B, T, M)
    y_local = de.add(de.mul(alpha, de.const(rewards[..., None], dtype=dtype)),
                     de.const(boot, dtype=dtype))
    local_sq = de.sqdiff(y_local, chosen)
    local_mask = filled[..., None] * alive[:, :t].astype(np.float32)
    local_sq = de.mul(local_sq, de.const(local_mask, dtype=dtype))
    local_sums = de.sum_(de.reshape(local_sq, (b * t, m)), axis=0)  # (M,)
    local_counts = np.maximum(local_mask.reshape(b * t, m).sum(axis=0), 1.0)
    local_means = de.mul(local_sums, de.const(1.0 / local_counts, dtype=dtype))
    loss_local = de.sum_(local_means)

    total = de.add(loss_global, de.scale(loss_local, lambda_local))
    per_agent_means = local_means.values
    return LossReport(
        total=total,
        loss_global=float(loss_global.values),
        loss_local_mean=float(per_agent_means.mean()),
        global_sq_sum=float(global_sq.values.sum()),
        local_sq_sums=local_sums.values.copy(),
        global_count=global_count,
        local_counts=local_counts,
    )


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class RMSProp:
    """Adaptive step with square-gradient smoothing 0.99 and epsilon 1e-5."""

    def __init__(self, params: Mapping[str, Tensor], lr: float,
                 alpha: float = 0.99, eps: float = 1e-5):
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.sq = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            s = self.sq[name]
            s *= self.alpha
            s += (1.0 - self.alpha) * g * g
            p.values -= (self.lr * g / (np.sqrt(s) + self.eps)).astype(p.values.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt/{name}": arr for name, arr in self.sq.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in self.sq:
            key = f"opt/{name}"
            if key in arrays:
                self.sq[name] = arrays[key].astype(self.sq[name].dtype).copy()


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float
                        ) -> tuple[dict[str, np.ndarray], float]:
    norm = de.global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def train_step(buffer: ReplayBuffer, model: Model, target_params: Mapping[str, Tensor],
               opt: RMSProp, cfg: RunConfig, rng: np.random.Generator) -> LossReport:
    batch = buffer.sample(cfg.train.batch_size, rng)
    report = compute_losses(batch, model, target_params, cfg.env.gamma,
                            cfg.train.lambda_local)
    if not np.isfinite(report.total.values):
        dump = {name: float(np.abs(p.values).max()) for name, p in model.params.items()}
        raise TrainingDiverged(f"non-finite loss {report.total.values!r}; "
                               f"max |param| by tensor: {dump}")
    grads = de.backward(report.total, model.params)
    grads, _ = clip_by_global_norm(grads, cfg.train.grad_clip)
    opt.step(model.params, grads)
    return report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


class _MetricsWriter:
    TRAIN_HEADER = "episode,env_steps,loss_global,loss_local_mean,epsilon"
    EVAL_HEADER = "env_steps,success_rate,mean_return,mean_len"

    def __init__(self, out_dir: Path, append: bool):
        mode = "a" if append else "w"
        self.train_f = open(out_dir / "train_metrics.csv", mode)
        self.eval_f = open(out_dir / "eval_metrics.csv", mode)
        if not append:
            print(self.TRAIN_HEADER, file=self.train_f)
            print(self.EVAL_HEADER, file=self.eval_f)

    def train_row(self, episode, env_steps, loss_global, loss_local_mean, epsilon):
        lg = _fmt(loss_global) if loss_global is not None else "nan"
        ll = _fmt(loss_local_mean) if loss_local_mean is not None else "nan"
        print(f"{episode},{env_steps},{lg},{ll},{_fmt(epsilon)}", file=self.train_f)

    def eval_row(self, env_steps, stats: EvalStats):
        print(f"{env_steps},{_fmt(stats.success_rate)},{_fmt(stats.mean_return)},"
              f"{_fmt(stats.mean_length)}", file=self.eval_f)
        self.eval_f.flush()
        self.train_f.flush()

    def close(self):
        self.train_f.close()
        self.eval_f.close()


def _save_run_checkpoint(out_dir: Path, env_steps: int, model: Model, opt: RMSProp,
                         counters: dict) -> None:
    payload = dict(model.params)
    payload.update(opt.state_arrays())
    save_checkpoint(out_dir / f"ckpt_{env_steps}.ckpt", payload)
    save_checkpoint(out_dir / "latest.ckpt", payload)
    (out_dir / "state.json").write_text(json.dumps(counters))


def run_training(cfg: RunConfig, seed: int, out_dir,
                 initial_params: Mapping[str, np.ndarray] | None = None,
                 resume: bool = False) -> dict:
    """Full loop: rollout, train step per episode, periodic evaluation,
    checkpoints, and metrics. Returns a summary of the final evaluation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = seed_streams(seed)
    env = make_env_from_config(cfg.env)
    eval_env = make_env_from_config(cfg.env)
    model = build_model(env.spec, cfg.model, streams["init"])
    opt = RMSProp(model.params, cfg.train.lr, cfg.train.rms_alpha, cfg.train.rms_eps)

    counters = {"episode": 0, "env_steps": 0, "next_eval": 0}
    appending = False
    if resume and (out_dir / "latest.ckpt").exists() and (out_dir / "state.json").exists():
        arrays, _ = load_checkpoint(out_dir / "latest.ckpt")
        restore_into(model.params, {k: v for k, v in arrays.items()
                                    if not k.startswith("opt/")})
        opt.load_state(arrays)
        counters = json.loads((out_dir / "state.json").read_text())
        appending = True
    elif initial_params is not None:
        restore_into(model.params, initial_params)

    target_params = make_target(model)
    buffer = ReplayBuffer(cfg.train.buffer_size)
    schedule = EpsilonSchedule(cfg.train.eps_start, cfg.train.eps_end,
                               cfg.train.eps_decay_steps)

    manifest_mode = "a" if appending else "w"
    with open(out_dir / "manifest.jsonl", manifest_mode) as f:
        record = {"seed": seed, "config": to_dict(cfg)}
        if appending:
            record["resumed_at_env_steps"] = counters["env_steps"]
        print(json.dumps(record, sort_keys=True), file=f)

    if cfg.train.total_steps == 0:
        return {"env_steps": 0, "episodes": 0, "final_eval": None}

    writer = _MetricsWriter(out_dir, append=appending)
    episode = counters["episode"]
    env_steps = counters["env_steps"]
    next_eval = counters["next_eval"]
    # checkpoints land at every evaluation plus final; a positive
    # io.checkpoint_period adds an extra env-step cadence
    next_ckpt = None
    if cfg.io.checkpoint_period > 0:
        next_ckpt = (env_steps // cfg.io.checkpoint_period + 1) * cfg.io.checkpoint_period
    last_eval: EvalStats | None = None
    stopped_early = False
    try:
        while env_steps < cfg.train.total_steps:
            if env_steps >= next_eval:
                last_eval = evaluate(eval_env, model, cfg.train.eval_episodes,
                                     streams["eval"])
                # rows carry the scheduled boundary so seeds share a step grid
                writer.eval_row(next_eval, last_eval)
                _save_run_checkpoint(out_dir, next_eval, model, opt,
                                     {"episode": episode, "env_steps": env_steps,
                                      "next_eval": next_eval + cfg.train.eval_period})
                next_eval += cfg.train.eval_period
                if (cfg.train.stop_at_success >= 0
                        and last_eval.success_rate >= cfg.train.stop_at_success):
                    stopped_early = True
                    break

            epsilon = schedule.value(env_steps)
            _, roll = rollout_episode(env, model, epsilon, streams["exploration"],
                                      reset_seed=int(streams["env"].integers(0, 2**31)),
                                      buffer=buffer)
            env_steps += roll.length
            episode += 1

            loss_g = loss_l = None
            if len(buffer) >= cfg.train.batch_size:
                report = train_step(buffer, model, target_params, opt, cfg,
                                    streams["sampling"])
                loss_g, loss_l = report.loss_global, report.loss_local_mean
            if episode % cfg.train.target_period == 0:
                de.sync_params(target_params, model.params)
            if next_ckpt is not None and env_steps >= next_ckpt:
                _save_run_checkpoint(out_dir, env_steps, model, opt,
                                     {"episode": episode, "env_steps": env_steps,
                                      "next_eval": next_eval})
                next_ckpt += cfg.io.checkpoint_period
            writer.train_row(episode, env_steps, loss_g, loss_l, epsilon)

        final_eval = last_eval if stopped_early else evaluate(
            eval_env, model, cfg.train.eval_episodes, streams["eval"])
        if not stopped_early:
            writer.eval_row(cfg.train.total_steps, final_eval)
        _save_run_checkpoint(out_dir, cfg.train.total_steps if not stopped_early
                             else env_steps, model, opt,
                             {"episode": episode, "env_steps": env_steps,
                              "next_eval": next_eval})
    finally:
        writer.close()
    return {"env_steps": env_steps, "episodes": episode,
            "final_eval": final_eval, "stopped_early": stopped_early}


# ---------------------------------------------------------------------------
# fine-tuning across team sizes
# ---------------------------------------------------------------------------

_TRANSFER_FIELDS = ("obs_dim", "n_actions", "state_dim")


def _env_dims(cfg: RunConfig) -> dict:
    spec = make_env_from_config(cfg.env).spec
    max_agents = cfg.model.max_agents or spec.n_agents
    return {"obs_dim": spec.obs_dim, "n_actions": spec.n_actions,
            "state_dim": spec.state_dim, "max_agents": max_agents}


def finetune(checkpoint_path, cfg: RunConfig, steps: int, seed: int, out_dir,
             source_config: RunConfig | None = None) -> dict:
    """Load a checkpoint trained on a different team size, evaluate the
    direct transfer, continue training, evaluate again.

    The mixer and agents are size-invariant, so no parameter surgery happens:
    observation, action, state, and id-one-hot sizes must already match.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if source_config is not None:
        src, dst = _env_dims(source_config), _env_dims(cfg)
        for fieldname in (*_TRANSFER_FIELDS, "max_agents"):
            if src[fieldname] != dst[fieldname]:
                raise ValueError(f"finetune: {fieldname} differs between source "
                                 f"({src[fieldname]}) and target ({dst[fieldname]})")
    arrays, _ = load_checkpoint(checkpoint_path)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("opt/")}

    streams = seed_streams(seed)
    env = make_env_from_config(cfg.env)
    model = build_model(env.spec, cfg.model, streams["init"])
    restore_into(model.params, model_arrays)

    before = evaluate(env, model, cfg.train.eval_episodes, seed_streams(seed)["eval"])

    run_cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train,
                                                                 total_steps=steps))
    summary = {"before": before, "after": before, "train": None}
    if steps > 0:
        result = run_training(run_cfg, seed, out_dir, initial_params=model_arrays)
        tuned_arrays, _ = load_checkpoint(out_dir / "latest.ckpt")
        restore_into(model.params, {k: v for k, v in tuned_arrays.items()
                                    if not k.startswith("opt/")})
        summary["train"] = {"env_steps": result["env_steps"],
                            "episodes": result["episodes"]}
    after = evaluate(env, model, cfg.train.eval_episodes, seed_streams(seed)["eval"])
    summary["after"] = after
    (out_dir / "finetune.json").write_text(json.dumps({
        "before": vars(before), "after": vars(after), "steps": steps,
        "seed": seed}, indent=2))
    return summary
