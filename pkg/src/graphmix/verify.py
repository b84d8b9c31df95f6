"""Property suites run at 64-bit precision: gradient fidelity against
central finite differences, mixer monotonicity probes, greedy-vs-exhaustive
joint-action checks, and normalization/masking invariants.

Each suite returns a report dict with a boolean ``passed`` and the measured
extreme, so both the command line and the test suite consume the same code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .agent import AgentArch, init_agent_params
from .config import EnvConfig, ModelConfig, RunConfig, TrainConfig
from .envs import EnvSpec
from .graphattn import edge_weights, init_attention_params, uniform_edge_weights
from .mixer import MixerArch, eval_hypernets, init_hyper_params, joint_greedy_value, \
    mix_single
from .trainer import EpisodeRecord, Model, build_model, compute_losses

SUITES = ("grad", "monotone", "igm", "masks")


def _small_model(rng: np.random.Generator, n_agents: int, variant: str = "gin",
                 attention: bool = True) -> tuple[Model, EnvSpec]:
    """A reduced-width model: the verification formulas are width-independent
    and full finite differencing must stay fast."""
    spec = EnvSpec(n_agents=n_agents, obs_dim=5, state_dim=6, n_actions=3,
                   episode_limit=5, gamma=0.95)
    mcfg = ModelConfig(hidden_dim=8, attn_dim=4, embed_dim=6, gin_hidden=4,
                       hyper_hidden=6, variant=variant, attention=attention)
    model = build_model(spec, mcfg, rng, dtype=np.float64)
    return model, spec


def _synthetic_episode(rng: np.random.Generator, spec: EnvSpec,
                       length: int) -> EpisodeRecord:
    """Random episode with occasional deaths and masked actions."""
    m, a = spec.n_agents, spec.n_actions
    alive = np.ones((length + 1, m), dtype=bool)
    for t in range(1, length + 1):
        alive[t] = alive[t - 1]
        if alive[t].sum() > 1 and rng.random() < 0.25:
            victims = np.flatnonzero(alive[t])
            alive[t, victims[rng.integers(victims.size)]] = False
    avail = rng.random((length + 1, m, a)) < 0.8
    avail[..., 0] = True
    avail[~alive] = False
    avail[~alive, 0] = True
    actions = np.zeros((length, m), dtype=np.int64)
    for t in range(length):
        for v in range(m):
            if alive[t, v]:
                options = np.flatnonzero(avail[t, v])
                actions[t, v] = options[rng.integers(options.size)]
    terminated = np.zeros(length, dtype=np.float32)
    terminated[-1] = 1.0
    return EpisodeRecord(
        obs=rng.normal(size=(length + 1, m, spec.obs_dim)).astype(np.float32),
        state=rng.normal(size=(length + 1, spec.state_dim)).astype(np.float32),
        avail=avail,
        alive=alive,
        actions=actions,
        rewards=rng.normal(size=length).astype(np.float32),
        terminated=terminated,
    )


def run_grad_suite(seed: int = 0, episodes: int = 3) -> dict:
    """Finite-difference check of the full aggregate loss on synthetic
    2- and 3-agent episodes of up to 5 steps."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = []
    for case in range(episodes):
        n_agents = 2 + case % 2
        model, spec = _small_model(rng, n_agents)
        target = de.cast_params(de.freeze_params(model.params), np.float64)
        for p in target.values():  # target differs from main to exercise double-Q
            p.values += rng.normal(size=p.values.shape, scale=0.05)
        batch = [_synthetic_episode(rng, spec, int(rng.integers(2, 6)))
                 for _ in range(2)]

        def fn():
            return compute_losses(batch, model, target, gamma=spec.gamma,
                                  lambda_local=1.0, dtype=np.float64).total

        err = de.finite_diff_check(fn, model.params, eps=1e-5)
        cases.append(err)
        worst = max(worst, err)
    return {"suite": "grad", "max_rel_error": float(worst),
            "per_case": [float(c) for c in cases],
            "tolerance": 1e-4, "passed": bool(worst <= 1e-4)}


def run_monotone_suite(seed: int = 0, draws: int = 200) -> dict:
    """Central finite-difference slope of the joint value w.r.t. every
    agent's value must be non-negative for random states, edges, values."""
    rng = np.random.default_rng(seed)
    min_slope = np.inf
    eps = 1e-4
    for draw in range(draws):
        variant = ("gin", "gcn")[draw % 2]
        m = int(rng.integers(2, 5))
        arch = MixerArch(state_dim=6, variant=variant, embed_dim=6, gin_hidden=4,
                         hyper_hidden=6)
        params = init_hyper_params(arch, rng, dtype=np.float64)
        alive = rng.random(m) < 0.8
        if not alive.any():
            alive[rng.integers(m)] = True
        edges = _random_edges(rng, alive)
        blocks = eval_hypernets(params, rng.normal(size=(1, 6)), arch, dtype=np.float64)
        q = rng.normal(size=m) * 2

        for v in range(m):
            bump = np.zeros(m)
            bump[v] = eps
            hi = mix_single(q + bump, edges, alive, arch, blocks,
                            dtype=np.float64).q_tot.values[0]
            lo = mix_single(q - bump, edges, alive, arch, blocks,
                            dtype=np.float64).q_tot.values[0]
            min_slope = min(min_slope, (hi - lo) / (2 * eps))
    return {"suite": "monotone", "min_slope": float(min_slope), "draws": draws,
            "tolerance": -1e-9, "passed": bool(min_slope >= -1e-9)}


def _random_edges(rng: np.random.Generator, alive: np.ndarray) -> np.ndarray:
    """Random column-stochastic-on-alive edge matrix."""
    m = alive.shape[0]
    raw = rng.random((m, m)) * np.outer(alive, alive)
    cols = raw.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cols > 0, raw / cols, 0.0)
    return out


def run_igm_suite(seed: int = 0, instances: int = 500) -> dict:
    """Greedy joint value equals the exhaustive joint-action max on random
    instances with at most 3 agents and 4 actions."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst_gap = 0.0
    for inst in range(instances):
        variant = ("gin", "gcn", "vdn")[inst % 3]
        m = int(rng.integers(2, 4))
        n_act = int(rng.integers(2, 5))
        arch = MixerArch(state_dim=6, variant=variant, embed_dim=6, gin_hidden=4,
                         hyper_hidden=6)
        params = init_hyper_params(arch, rng, dtype=np.float64) if variant != "vdn" else {}
        alive = rng.random(m) < 0.85
        if not alive.any():
            alive[rng.integers(m)] = True
        per_q = rng.normal(size=(m, n_act)) * 2
        avail = rng.random((m, n_act)) < 0.75
        avail[:, 0] = True
        state = rng.normal(size=6)
        edges = _random_edges(rng, alive)

        greedy, _ = joint_greedy_value(per_q, edges, state, alive, avail, arch, params)
        blocks = (eval_hypernets(params, state[None], arch, dtype=np.float64)
                  if variant != "vdn" else None)
        choices = [np.flatnonzero(avail[v]) if alive[v] else [0] for v in range(m)]
        brute = -np.inf
        for joint in itertools.product(*choices):
            chosen = per_q[np.arange(m), list(joint)]
            val = mix_single(chosen, edges, alive, arch, blocks,
                             dtype=np.float64).q_tot.values[0]
            brute = max(brute, val)
        gap = abs(greedy - brute)
        worst_gap = max(worst_gap, gap)
        if gap > 1e-9:
            mismatches += 1
    return {"suite": "igm", "mismatches": mismatches, "instances": instances,
            "max_gap": float(worst_gap), "tolerance": 1e-9,
            "passed": bool(mismatches == 0)}


def run_masks_suite(seed: int = 0, draws: int = 1000) -> dict:
    """Reward fractions sum to one over alive agents and vanish at dead ones;
    attention outgoing weights per alive node sum to one."""
    rng = np.random.default_rng(seed)
    arch = MixerArch(state_dim=6, variant="gin", embed_dim=6, gin_hidden=4,
                     hyper_hidden=6)
    hyper = init_hyper_params(arch, rng, dtype=np.float64)
    attn = init_attention_params(8, rng, embed_dim=4, dtype=np.float64)
    worst = 0.0
    for _ in range(draws):
        m = int(rng.integers(1, 7))
        alive = rng.random(m) < 0.6
        if not alive.any():
            alive[rng.integers(m)] = True
        hidden = de.const(rng.normal(size=(m, 8)), dtype=np.float64)
        w = edge_weights(attn, hidden, alive).values
        col_err = np.abs(w[:, alive].sum(axis=0) - 1.0).max()
        dead_err = 0.0
        if (~alive).any():
            dead_err = max(np.abs(w[~alive, :]).max(), np.abs(w[:, ~alive]).max())

        blocks = eval_hypernets(hyper, rng.normal(size=(1, 6)), arch, dtype=np.float64)
        alpha = mix_single(rng.normal(size=m), _random_edges(rng, alive), alive,
                           arch, blocks, dtype=np.float64).alpha.values[0]
        alpha_err = abs(alpha[alive].sum() - 1.0)
        alpha_dead = np.abs(alpha[~alive]).max() if (~alive).any() else 0.0
        worst = max(worst, col_err, dead_err, alpha_err, alpha_dead)
    return {"suite": "masks", "max_violation": float(worst), "draws": draws,
            "tolerance": 1e-9, "passed": bool(worst <= 1e-9)}


def run_suite(name: str, seed: int = 0) -> dict:
    if name == "grad":
        return run_grad_suite(seed)
    if name == "monotone":
        return run_monotone_suite(seed)
    if name == "igm":
        return run_igm_suite(seed)
    if name == "masks":
        return run_masks_suite(seed)
    raise ValueError(f"unknown suite {name!r}; valid options: {', '.join(SUITES)}")
