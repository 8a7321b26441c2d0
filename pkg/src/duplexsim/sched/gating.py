"""Uniform top-k gate simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument

CHUNK_PICKS = 1 << 20


@dataclass(frozen=True)
class GateOutcome:
    counts: np.ndarray  # (n_layers, n_experts) tokens per expert
    seed: int | None
    top_k: int
    tokens: int

    def layer(self, i: int) -> np.ndarray:
        return self.counts[i]


def sample_topk(rng: np.random.Generator, tokens: int, n_experts: int, top_k: int) -> np.ndarray:
    """``(tokens, top_k)`` array of distinct experts per token, uniformly chosen.

    The j-th pick draws an index into the experts not yet chosen and shifts it
    past the earlier picks in ascending order.
    """
    if top_k > n_experts:
        raise InvalidArgument("top_k must be <= n_experts")
    if top_k == n_experts:
        return np.tile(np.arange(n_experts), (tokens, 1))
    chosen = np.empty((tokens, top_k), dtype=np.int64)
    for j in range(top_k):
        r = rng.integers(0, n_experts - j, size=tokens)
        if j:
            prev = np.sort(chosen[:, :j], axis=1)
            for c in range(j):
                r += r >= prev[:, c]
        chosen[:, j] = r
    return chosen


def gate_counts(rng: np.random.Generator, tokens: int, n_experts: int, top_k: int,
                n_layers: int = 1) -> np.ndarray:
    out = np.zeros((n_layers, n_experts), dtype=np.int64)
    if tokens == 0:
        return out
    if top_k == n_experts:
        out[:] = tokens
        return out
    # sample several layers per draw to keep numpy calls few
    per_chunk = max(1, CHUNK_PICKS // (tokens * top_k))
    for lo in range(0, n_layers, per_chunk):
        n = min(per_chunk, n_layers - lo)
        picks = sample_topk(rng, tokens * n, n_experts, top_k).reshape(n, -1)
        offsets = (np.arange(n) * n_experts)[:, None]
        flat = np.bincount((picks + offsets).ravel(), minlength=n * n_experts)
        out[lo:lo + n] = flat.reshape(n, n_experts)
    return out


def gate_select(stage_tokens: int, n_experts: int, top_k: int, seed=None,
                n_layers: int = 1) -> GateOutcome:
    """Route every token to ``top_k`` distinct experts; counts per layer."""
    if top_k > n_experts:
        raise InvalidArgument("top_k must be <= n_experts")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = gate_counts(rng, stage_tokens, n_experts, top_k, n_layers)
    return GateOutcome(counts, None if isinstance(seed, np.random.Generator) else seed,
                       top_k, stage_tokens)
