"""Attention-derived edge weights for the complete directed agent graph.

Hidden states are encoded by a shared single-layer ELU map, then scaled
query-key scores are softmax-normalized so each alive node's outgoing
weights sum to one. Convention: ``w[u, v]`` is the weight of the edge from
node v to node u, so node v's outgoing weights form column v.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import diffengine as de
from .diffengine import Tensor

ATTN_EMBED_DIM = 16


def init_attention_params(hidden_dim: int, rng: np.random.Generator,
                          embed_dim: int = ATTN_EMBED_DIM,
                          dtype=np.float32) -> dict[str, Tensor]:
    """Plain learned tensors, trained end-to-end (not hypernetwork outputs)."""
    params: dict[str, Tensor] = {}

    def uni(fan_in, shape, name):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = de.parameter(rng.uniform(-bound, bound, size=shape), name, dtype=dtype)

    uni(hidden_dim, (hidden_dim, embed_dim), "attn/enc")
    uni(embed_dim, (embed_dim, embed_dim), "attn/query")
    uni(embed_dim, (embed_dim, embed_dim), "attn/key")
    return params


def edge_weights(params: Mapping[str, Tensor], hidden: Tensor,
                 alive: np.ndarray, _allow_all_dead: bool = False) -> Tensor:
    """Edge weight matrices from agent hidden states.

    ``hidden`` is (..., M, D); ``alive`` a constant bool mask (..., M).
    Rows and columns touching dead agents are exactly zero; each alive
    column sums to one over alive rows. Batched rows whose mask is all-dead
    are only legal on the internal path (they come out all-zero and the
    caller must mask them away).
    """
    alive = np.asarray(alive, dtype=bool)
    if not _allow_all_dead and not alive.any(axis=-1).all():
        raise ValueError("edge_weights: at least one agent must be alive")
    embed_dim = params["attn/enc"].shape[1]
    phi = de.elu(de.matmul(hidden, params["attn/enc"]))
    q = de.matmul(phi, params["attn/query"])
    k = de.matmul(phi, params["attn/key"])
    logits = de.scale(de.matmul(q, de.swapaxes(k, -1, -2)), 1.0 / np.sqrt(embed_dim))
    # softmax down each column (axis -2 indexes the receiving node u)
    w = de.masked_softmax(logits, alive[..., :, None], axis=-2)
    # zero out columns of dead senders
    col_mask = de.const(alive[..., None, :].astype(w.values.dtype), dtype=w.values.dtype)
    return de.mul(w, col_mask)


def uniform_edge_weights(alive: np.ndarray, dtype=np.float32,
                         _allow_all_dead: bool = False) -> np.ndarray:
    """Equal weights of 1/(alive count) on the alive-alive block; the
    no-attention ablation. Constant, not differentiated."""
    alive = np.asarray(alive, dtype=bool)
    count = alive.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        if not _allow_all_dead:
            raise ValueError("uniform_edge_weights: at least one agent must be alive")
        count = np.maximum(count, 1)
    a = alive.astype(dtype)
    w = a[..., :, None] * a[..., None, :]
    return (w / count[..., None]).astype(dtype)
