"""Independent reference computations the engine and scheduler are checked against.

Nothing here touches :class:`~exitserve.kv_cache.KvStore` or the engine's
batching code; caches are plain per-layer lists and every sequence runs alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .engine import EngineConfig, Request, run
from .exit_policy import NEVER, ExitTechnique
from .layer_sched import MdpParams, TrainedPolicy, ValueIterationResult, enumerate_states
from .model import ModelWeights, ToyDecoder, gelu, reference_decode


@dataclass
class ReplayedCache:
    keys: list[list[np.ndarray]]  # keys[layer - 1][position]
    values: list[list[np.ndarray]]


def replay_kv(weights: ModelWeights, inputs: Sequence[int], exit_layers: Sequence[int]) -> ReplayedCache:
    """Rebuild one sequence's cache position by position.

    ``inputs[p]`` is the token fed at position ``p`` and ``exit_layers[p]``
    the layer its pass stopped at. Layers above the exit get K/V projected
    from the exit hidden state.
    """
    if len(inputs) != len(exit_layers):
        raise ValueError("inputs and exit_layers differ in length")
    L = weights.config.n_layers
    keys: list[list[np.ndarray]] = [[] for _ in range(L)]
    vals: list[list[np.ndarray]] = [[] for _ in range(L)]
    for tok, e in zip(inputs, exit_layers):
        h = weights.embedding[tok].copy()
        for i in range(1, e + 1):
            lw = weights.layers[i - 1]
            keys[i - 1].append(lw.w_k @ h)
            vals[i - 1].append(lw.w_v @ h)
            K, V = np.stack(keys[i - 1]), np.stack(vals[i - 1])
            scores = K @ (lw.w_q @ h) / math.sqrt(h.shape[0])
            w = np.exp(scores - scores.max())
            a = (w / w.sum()) @ V
            h = h + lw.w_o @ a
            h = h + lw.w_down @ gelu(lw.w_up @ h)
        for j in range(e + 1, L + 1):
            lw = weights.layers[j - 1]
            keys[j - 1].append(lw.w_k @ h)
            vals[j - 1].append(lw.w_v @ h)
    return ReplayedCache(keys, vals)


@dataclass
class DecodeMismatch:
    seq_id: int
    expected: list[int]
    got: list[int]


def check_full_layer_equivalence(
    requests: Sequence[Request], config: EngineConfig, weights: ModelWeights | None = None
) -> list[DecodeMismatch]:
    """Serve ``requests`` with exits disabled and diff against per-sequence reference decoding."""
    model = ToyDecoder(weights) if weights is not None else ToyDecoder.from_config(config.model)
    cfg = replace(config, technique=ExitTechnique(NEVER), force_exit_layer=None)
    transcript, _ = run(requests, cfg, model=model)
    ordered = sorted(requests, key=lambda r: r.arrival_time)
    bad = []
    for rec, req in zip(transcript.sequences, ordered):
        expected = reference_decode(model.weights, req.prompt, req.max_new_tokens)
        if rec.tokens != expected:
            bad.append(DecodeMismatch(rec.id, expected, rec.tokens))
    return bad


def q_error(policy: TrainedPolicy, oracle: ValueIterationResult, params: MdpParams) -> float:
    """Max |Q - Q*| over every action of every state holding exactly N sequences."""
    states = enumerate_states(params.n_layers, params.population, exact=True)
    return max(abs(policy.q(s, a) - oracle.q[(s, a)]) for s in states for a in range(1, params.n_layers + 1))
