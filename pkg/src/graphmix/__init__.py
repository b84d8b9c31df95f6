"""Graph-based value factorization for cooperative multi-agent RL.

Recurrent per-agent value networks, attention-derived graph edge weights, a
monotone mixing GNN with hypernetwork-generated parameters, softmax reward
fractions for per-agent credit, and a combined global/local temporal
difference training loop — all on a self-contained numpy reverse-mode
differentiation engine with finite-difference verification throughout.
"""

__version__ = "0.1.0"
