"""Dynamic decaying edge weights for the initial lead-lag graphs.

Per scale, two learned group embeddings (excitatory / inhibitory) combined
with a patch-position embedding give per-token scores whose row softmax
yields rates in (0, 1). An input attention over patch tokens supplies the
dynamic term. An edge at patch distance D gets weight

    lambda = relu( exp(-beta_e * D) - (1 - alpha) * exp(-beta_i * D) )

which lies in [0, 1] and equals alpha exactly at D = 0. The effective graph
is the initial binary graph masked by these weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import DiffArray, add, exp, leaky_relu, matmul, mul, reshape, softmax, \
    sub, swap_last2, take_last, uniform_param
from .laggraph import ScaleGraph


@dataclass
class DecayParams:
    """Trainable embeddings and attention projections for one scale."""

    e_ni: DiffArray  # (N, d_e) inhibitory group embedding
    e_ne: DiffArray  # (N, d_e) excitatory group embedding
    e_p: DiffArray   # (P, d_e) patch-position embedding
    w_q: DiffArray   # (p, d_a)
    b_q: DiffArray   # (d_a,)
    w_k: DiffArray   # (p, d_a)
    b_k: DiffArray   # (d_a,)

    def named(self, prefix: str):
        return [
            (f"{prefix}.e_ni", self.e_ni), (f"{prefix}.e_ne", self.e_ne),
            (f"{prefix}.e_p", self.e_p),
            (f"{prefix}.w_q", self.w_q), (f"{prefix}.b_q", self.b_q),
            (f"{prefix}.w_k", self.w_k), (f"{prefix}.b_k", self.b_k),
        ]


def init_decay_params(rng: np.random.Generator, n_groups: int, p_count: int,
                      patch_len: int, d_e: int, d_a: int,
                      prefix: str = "decay") -> DecayParams:
    return DecayParams(
        e_ni=uniform_param(rng, (n_groups, d_e), d_e, f"{prefix}.e_ni"),
        e_ne=uniform_param(rng, (n_groups, d_e), d_e, f"{prefix}.e_ne"),
        e_p=uniform_param(rng, (p_count, d_e), d_e, f"{prefix}.e_p"),
        w_q=uniform_param(rng, (patch_len, d_a), patch_len, f"{prefix}.w_q"),
        b_q=uniform_param(rng, (d_a,), patch_len, f"{prefix}.b_q"),
        w_k=uniform_param(rng, (patch_len, d_a), patch_len, f"{prefix}.w_k"),
        b_k=uniform_param(rng, (d_a,), patch_len, f"{prefix}.b_k"),
    )


def _token_scores_softmax(emb: DiffArray) -> DiffArray:
    """Row softmax of emb @ emb^T over all (group, patch) tokens."""
    scores = matmul(emb, swap_last2(emb))
    return softmax(scores)


def combined_embedding(group_emb: DiffArray, patch_emb: DiffArray) -> DiffArray:
    """Broadcast-add of group and patch-position embeddings, flattened to tokens."""
    n, d_e = group_emb.shape
    p = patch_emb.shape[0]
    grid = add(reshape(group_emb, (n, 1, d_e)), patch_emb)  # (N, P, d_e)
    return reshape(grid, (n * p, d_e))


def rates_dense(params: DecayParams):
    """Full token-by-token rate matrices (testing reference path)."""
    e_e = combined_embedding(params.e_ne, params.e_p)
    e_i = combined_embedding(params.e_ni, params.e_p)
    return _token_scores_softmax(e_e), _token_scores_softmax(e_i)


def rates(params: DecayParams, graph: ScaleGraph):
    """Excitatory and inhibitory rates gathered at the graph's edges.

    Softmax rows run over the target-token axis of the full score matrix, so
    every rate is strictly inside (0, 1).
    """
    beta_e_dense, beta_i_dense = rates_dense(params)
    t = graph.n_tokens
    flat_idx = graph.src_token * t + graph.dst_token
    beta_e = take_last(reshape(beta_e_dense, (t * t,)), flat_idx)
    beta_i = take_last(reshape(beta_i_dense, (t * t,)), flat_idx)
    return beta_e, beta_i


def attention_dense(patched: DiffArray, params: DecayParams) -> DiffArray:
    """Scaled dot-product attention over patch tokens: (B, T, T) row-softmax."""
    b, n, p, plen = patched.shape
    d_a = params.w_q.shape[1]
    tokens = reshape(patched, (b, n * p, plen))
    q = add(matmul(tokens, params.w_q), params.b_q)
    k = add(matmul(tokens, params.w_k), params.b_k)
    scores = mul(matmul(q, swap_last2(k)), DiffArray(1.0 / math.sqrt(d_a)))
    return softmax(scores)


def input_attention(patched: DiffArray, params: DecayParams,
                    graph: ScaleGraph) -> DiffArray:
    """Per-window attention gathered at the graph's edges: (B, E)."""
    if params.w_q.shape[1] <= 0:
        raise ValueError("attention dimension must be positive")
    alpha_dense = attention_dense(patched, params)
    b = alpha_dense.shape[0]
    t = graph.n_tokens
    flat_idx = graph.src_token * t + graph.dst_token
    return take_last(reshape(alpha_dense, (b, t * t)), flat_idx)


def decay_weights(beta_e: DiffArray, beta_i: DiffArray, alpha: DiffArray,
                  delta: np.ndarray, leak: float = 0.0) -> DiffArray:
    """Per-edge weights combining excitatory decay and attention-gated
    inhibitory decay over the patch-unit lag. Leak > 0 lets a small gradient
    through edges the relu would otherwise zero out."""
    d = DiffArray(np.asarray(delta, dtype=np.float64))
    excit = exp(mul(beta_e, d) * -1.0)
    inhib = mul(sub(DiffArray(1.0), alpha), exp(mul(beta_i, d) * -1.0))
    return leaky_relu(sub(excit, inhib), leak)


def effective_graph(graph: ScaleGraph, lam: DiffArray | None) -> DiffArray:
    """Edge weights of the effective graph: the initial binary mask times the
    decay weights (weights of exactly 1 when lam is None)."""
    if lam is None:
        return DiffArray(np.ones(graph.edge_count))
    if lam.shape[-1] != graph.edge_count:
        raise engine.ShapeError(
            f"weight vector covers {lam.shape[-1]} edges, graph has {graph.edge_count}"
        )
    return lam


def effective_dense(graph: ScaleGraph, lam_values: np.ndarray) -> np.ndarray:
    """Dense (tokens x tokens) effective adjacency (testing reference path)."""
    return graph.dense(lam_values)
