"""Monotone mixing GNN: joint value and per-agent reward fractions.

Per-agent values enter as scalar node features on the attention-weighted
complete graph. Each layer aggregates over a node's outgoing-edge weights
and applies a combining map whose weights are generated by state-conditioned
hypernetworks and passed through absolute value, so the joint value is
non-decreasing in every agent's value (the IGM sufficient condition). A
second readout vector, generated without the absolute value, turns final
node embeddings into softmax-normalized reward fractions.

Three combining variants: a two-layer MLP over the aggregated sum (GIN), a
single non-negative linear map with ELU (GCN), and a fixed degenerate mode
that reduces the whole mixer to the sum of alive agents' values (VDN).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffengine as de
from .diffengine import Tensor

VARIANTS = ("gin", "gcn", "vdn")


@dataclass(frozen=True)
class MixerArch:
    state_dim: int
    variant: str = "gin"
    n_layers: int = 1
    embed_dim: int = 32
    gin_hidden: int = 16
    hyper_hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown mixer variant {self.variant!r}, expected {VARIANTS}")
        if self.n_layers < 1:
            raise ValueError("mixer needs at least one layer")

    @property
    def layer_dims(self) -> list[int]:
        # node features start as the scalar per-agent value
        return [1] + [self.embed_dim] * self.n_layers

    def blocks(self) -> list[tuple[str, tuple[int, ...], bool]]:
        """(name, shape, abs_applied) for every hypernet-generated block."""
        if self.variant == "vdn":
            return []
        dims = self.layer_dims
        out: list[tuple[str, tuple[int, ...], bool]] = []
        for layer in range(1, self.n_layers + 1):
            f_in, f_out = dims[layer - 1], dims[layer]
            if self.variant == "gin":
                out.append((f"l{layer}_w1", (f_in, self.gin_hidden), True))
                out.append((f"l{layer}_b1", (1, self.gin_hidden), False))
                out.append((f"l{layer}_w2", (self.gin_hidden, f_out), True))
                out.append((f"l{layer}_b2", (1, f_out), False))
            else:
                out.append((f"l{layer}_w", (f_in, f_out), True))
                out.append((f"l{layer}_b", (1, f_out), False))
        out.append(("w_plus", (dims[-1],), True))
        out.append(("w_local", (dims[-1],), False))
        return out


@dataclass
class MixerOutput:
    q_tot: Tensor        # (N,)
    alpha: Tensor        # (N, M), sums to 1 over alive agents, 0 at dead
    embeddings: Tensor   # (N, M, F_L)


def init_hyper_params(arch: MixerArch, rng: np.random.Generator,
                      dtype=np.float32) -> dict[str, Tensor]:
    """One MLP (state -> hidden -> flattened block) per generated block."""
    params: dict[str, Tensor] = {}

    def uni(fan_in, shape, name):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = de.parameter(rng.uniform(-bound, bound, size=shape), name, dtype=dtype)

    for block, shape, _ in arch.blocks():
        size = int(np.prod(shape))
        uni(arch.state_dim, (arch.state_dim, arch.hyper_hidden), f"hyper/{block}/w1")
        uni(arch.state_dim, (arch.hyper_hidden,), f"hyper/{block}/b1")
        uni(arch.hyper_hidden, (arch.hyper_hidden, size), f"hyper/{block}/w2")
        uni(arch.hyper_hidden, (size,), f"hyper/{block}/b2")
    return params


def eval_hypernets(params: Mapping[str, Tensor], state, arch: MixerArch,
                   dtype=np.float32) -> dict[str, Tensor]:
    """Concrete mixer parameter blocks for a batch of states (N, state_dim).
    Absolute value is applied to weight blocks and the value-readout vector;
    biases and the reward-fraction vector stay signed."""
    s = state if isinstance(state, Tensor) else de.const(np.atleast_2d(state), dtype=dtype)
    if s.shape[-1] != arch.state_dim:
        raise de.ShapeError(f"eval_hypernets: state dim {s.shape[-1]} != {arch.state_dim}")
    n = s.shape[0]
    blocks: dict[str, Tensor] = {}
    for block, shape, take_abs in arch.blocks():
        hid = de.relu(de.add(de.matmul(s, params[f"hyper/{block}/w1"]),
                             params[f"hyper/{block}/b1"]))
        flat = de.add(de.matmul(hid, params[f"hyper/{block}/w2"]),
                      params[f"hyper/{block}/b2"])
        if take_abs:
            flat = de.abs_(flat)
        blocks[block] = de.reshape(flat, (n,) + shape)
    return blocks


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else de.const(x, dtype=dtype)


def mix(agent_q, edges, alive: np.ndarray, arch: MixerArch,
        blocks: Mapping[str, Tensor] | None, dtype=np.float32,
        _allow_all_dead: bool = False) -> MixerOutput:
    """Run the mixing GNN on a batch.

    agent_q: (N, M) per-agent chosen-action values; edges: (N, M, M) with
    w[u, v] the weight from v to u; alive: (N, M) bool. Dead agents are
    excluded from aggregation, readout, and the fraction softmax. ``blocks``
    comes from eval_hypernets (None only for the VDN variant).
    """
    alive = np.asarray(alive, dtype=bool)
    if alive.ndim != 2:
        raise de.ShapeError(f"mix: alive mask must be (N, M), got {alive.shape}")
    if not _allow_all_dead and not alive.any(axis=-1).all():
        raise ValueError("mix: at least one agent must be alive per row")
    q = _as_tensor(agent_q, dtype)
    n, m = q.shape
    alive_f = alive.astype(q.values.dtype)
    count = np.maximum(alive_f.sum(axis=-1, keepdims=True), 1.0)

    if arch.variant == "vdn":
        # degenerate case: uniform edges and an identity combining map scaled
        # by the alive count collapse the mixer to a plain sum
        q_tot = de.sum_(de.mul(q, de.const(alive_f, dtype=q.values.dtype)), axis=-1)
        ones = de.const(np.ones((n, m, 1)), dtype=q.values.dtype)
        h = de.mul(de.reshape(q_tot, (n, 1, 1)), ones)  # every node carries the sum
        alpha = de.const(alive_f / count, dtype=q.values.dtype)
        return MixerOutput(q_tot=q_tot, alpha=alpha, embeddings=h)

    if blocks is None:
        raise ValueError(f"mix: variant {arch.variant!r} needs hypernet blocks")
    w = _as_tensor(edges, q.values.dtype)
    if w.shape != (n, m, m):
        raise de.ShapeError(f"mix: edges shape {w.shape} != {(n, m, m)}")

    h = de.reshape(q, (n, m, 1))
    w_t = de.swapaxes(w, -1, -2)
    for layer in range(1, arch.n_layers + 1):
        agg = de.matmul(w_t, h)  # node v aggregates over its outgoing weights
        if arch.variant == "gin":
            hid = de.relu(de.add(de.matmul(agg, blocks[f"l{layer}_w1"]),
                                 blocks[f"l{layer}_b1"]))
            h = de.add(de.matmul(hid, blocks[f"l{layer}_w2"]), blocks[f"l{layer}_b2"])
        else:
            h = de.elu(de.add(de.matmul(agg, blocks[f"l{layer}_w"]),
                              blocks[f"l{layer}_b"]))

    mask3 = de.const(alive_f[..., None], dtype=q.values.dtype)
    pooled = de.sum_(de.mul(h, mask3), axis=1)                      # (N, F_L)
    graph_emb = de.mul(pooled, de.const(1.0 / count, dtype=q.values.dtype))
    q_tot = de.sum_(de.mul(graph_emb, blocks["w_plus"]), axis=-1)   # (N,)

    local = de.sum_(de.mul(h, de.reshape(blocks["w_local"], (n, 1, -1))), axis=-1)
    alpha = de.masked_softmax(local, alive, axis=-1)
    return MixerOutput(q_tot=q_tot, alpha=alpha, embeddings=h)


def mix_single(agent_q, edges, alive, arch: MixerArch,
               blocks: Mapping[str, Tensor] | None, dtype=np.float32) -> MixerOutput:
    """Single-timestep convenience wrapper around the batched path."""
    q = np.atleast_2d(np.asarray(agent_q))
    if edges is None:
        e = None
    elif isinstance(edges, Tensor):
        e = de.reshape(edges, (1,) + edges.shape) if edges.values.ndim == 2 else edges
    else:
        e = np.asarray(edges)
        if e.ndim == 2:
            e = e[None, ...]
    return mix(q, e, np.atleast_2d(alive), arch, blocks, dtype=dtype)


def joint_greedy_value(per_agent_q: np.ndarray, edges, state, alive, avail,
                       arch: MixerArch, hyper_params: Mapping[str, Tensor] | None,
                       dtype=np.float64) -> tuple[float, np.ndarray]:
    """Joint value at each agent's availability-masked argmax action.

    For a monotone mixer this equals the exhaustive max over joint actions,
    so per-agent greedy decisions are team-optimal.
    """
    per_agent_q = np.asarray(per_agent_q)
    alive = np.asarray(alive, dtype=bool)
    avail = np.asarray(avail, dtype=bool)
    m = per_agent_q.shape[0]
    actions = np.zeros(m, dtype=np.int64)
    for v in range(m):
        if alive[v]:
            masked = np.where(avail[v], per_agent_q[v], -np.inf)
            actions[v] = int(np.argmax(masked))
    chosen = per_agent_q[np.arange(m), actions]
    blocks = None
    if arch.variant != "vdn":
        blocks = eval_hypernets(hyper_params, np.atleast_2d(state), arch, dtype=dtype)
    out = mix_single(chosen, edges, alive, arch, blocks, dtype=dtype)
    return float(out.q_tot.values[0]), actions
