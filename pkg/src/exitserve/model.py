"""Toy decoder-only transformer with a per-layer KV cache.

Each block is single-head causal self-attention followed by a GELU MLP, both
with plain residual connections (no layer norm, no positional encoding beyond
causal order). The model exists to hand the exit policies and the KV-fill
logic genuine hidden states; it is not trained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .numerics import DTYPE, as_matrix, as_vector, matvec, seeded_tensor, softmax

EOS_TOKEN = 0

_LAYER_MATS = ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    vocab_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray  # (4d, d)
    w_down: np.ndarray  # (d, 4d)

    def check(self, d: int) -> None:
        expected = {
            "w_q": (d, d),
            "w_k": (d, d),
            "w_v": (d, d),
            "w_o": (d, d),
            "w_up": (4 * d, d),
            "w_down": (d, 4 * d),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")


def _key(seed: int, layer: int, tag: int) -> int:
    # Philox key layout: seed in the high bits, then layer, then tensor tag.
    return (seed << 32) | (layer << 8) | tag


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray  # (vocab, d)
    layers: tuple[LayerWeights, ...]
    lm_head: np.ndarray  # (vocab, d)
    probe_w: np.ndarray  # (d,)
    probe_b: float

    def __post_init__(self) -> None:
        cfg = self.config
        d = cfg.d_model
        if self.embedding.shape != (cfg.vocab_size, d):
            raise ValueError(f"embedding: expected {(cfg.vocab_size, d)}, got {self.embedding.shape}")
        if self.lm_head.shape != (cfg.vocab_size, d):
            raise ValueError(f"lm_head: expected {(cfg.vocab_size, d)}, got {self.lm_head.shape}")
        if self.probe_w.shape != (d,):
            raise ValueError(f"probe_w: expected ({d},), got {self.probe_w.shape}")
        if len(self.layers) != cfg.n_layers:
            raise ValueError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for layer in self.layers:
            layer.check(d)

    @classmethod
    def seeded(cls, config: ModelConfig) -> "ModelWeights":
        d, s = config.d_model, config.seed
        layers = []
        for i in range(1, config.n_layers + 1):
            layers.append(
                LayerWeights(
                    w_q=seeded_tensor((d, d), _key(s, i, 1)),
                    w_k=seeded_tensor((d, d), _key(s, i, 2)),
                    w_v=seeded_tensor((d, d), _key(s, i, 3)),
                    w_o=seeded_tensor((d, d), _key(s, i, 4)),
                    w_up=seeded_tensor((4 * d, d), _key(s, i, 5)),
                    w_down=seeded_tensor((d, 4 * d), _key(s, i, 6)),
                )
            )
        return cls(
            config=config,
            embedding=seeded_tensor((config.vocab_size, d), _key(s, 0, 1)),
            layers=tuple(layers),
            lm_head=seeded_tensor((config.vocab_size, d), _key(s, 0, 2)),
            probe_w=seeded_tensor(d, _key(s, 0, 3)),
            probe_b=0.0,
        )

    def to_json(self) -> dict:
        c = self.config
        doc = {
            "config": {
                "n_layers": c.n_layers,
                "d_model": c.d_model,
                "vocab_size": c.vocab_size,
                "seed": c.seed,
            },
            "embedding": self.embedding.tolist(),
            "lm_head": self.lm_head.tolist(),
            "probe_w": [self.probe_w.tolist()],
            "probe_b": self.probe_b,
            "layers": [{name: getattr(lw, name).tolist() for name in _LAYER_MATS} for lw in self.layers],
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelWeights":
        config = ModelConfig(**doc["config"])
        probe = as_matrix(doc["probe_w"])
        if probe.shape[0] != 1:
            raise ValueError("probe_w must be a 1 x d array")
        layers = tuple(
            LayerWeights(**{name: as_matrix(entry[name]) for name in _LAYER_MATS}) for entry in doc["layers"]
        )
        return cls(
            config=config,
            embedding=as_matrix(doc["embedding"]),
            layers=layers,
            lm_head=as_matrix(doc["lm_head"]),
            probe_w=probe[0],
            probe_b=float(doc["probe_b"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        return cls.from_json(json.loads(Path(path).read_text()))


class KvBackend(Protocol):
    def length(self, seq_id: int, layer: int) -> int: ...

    def append(self, seq_id: int, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None: ...

    def view(self, seq_id: int, layer: int, upto_position: int) -> tuple[np.ndarray, np.ndarray]: ...


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Single-head scaled dot-product attention of one query over cached rows."""
    scores = keys @ q / math.sqrt(q.shape[0])
    return softmax(scores) @ values


class ToyDecoder:
    def __init__(self, weights: ModelWeights):
        self.weights = weights
        self.config = weights.config

    @classmethod
    def from_config(cls, config: ModelConfig) -> "ToyDecoder":
        return cls(ModelWeights.seeded(config))

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def _layer(self, i: int) -> LayerWeights:
        if not 1 <= i <= self.config.n_layers:
            raise IndexError(f"layer index {i} outside 1..{self.config.n_layers}")
        return self.weights.layers[i - 1]

    def embed(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab_size:
            raise IndexError(f"token id {token_id} outside 0..{self.config.vocab_size - 1}")
        return self.weights.embedding[token_id].copy()

    def compute_kv_pair(self, i: int, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lw = self._layer(i)
        return matvec(lw.w_k, h), matvec(lw.w_v, h)

    def layer_forward(
        self, i: int, batch: Sequence[tuple[int, np.ndarray]], cache: KvBackend
    ) -> list[np.ndarray]:
        """Run layer ``i`` for every ``(seq_id, hidden)`` in ``batch``.

        Each sequence's new (k, v) is appended to ``cache`` at its next
        position before it attends, so a token always sees itself.
        Projections and the MLP run on the stacked batch; attention runs
        per sequence.
        """
        lw = self._layer(i)
        if not batch:
            return []
        x = np.stack([as_vector(h) for _, h in batch])
        if x.shape[1] != self.config.d_model:
            raise ValueError(f"hidden size {x.shape[1]} != d_model {self.config.d_model}")
        q = x @ lw.w_q.T
        k = x @ lw.w_k.T
        v = x @ lw.w_v.T
        attn = np.empty_like(x)
        for row, (seq_id, _) in enumerate(batch):
            pos = cache.length(seq_id, i)
            if i > 1 and cache.length(seq_id, i - 1) != pos + 1:
                raise RuntimeError(f"seq {seq_id}: layer {i - 1} not written at position {pos}")
            cache.append(seq_id, i, pos, k[row], v[row])
            keys, vals = cache.view(seq_id, i, pos + 1)
            attn[row] = attend(q[row], keys, vals)
        h = x + attn @ lw.w_o.T
        h = h + gelu(h @ lw.w_up.T) @ lw.w_down.T
        return list(h)

    def lm_head(self, h: np.ndarray) -> np.ndarray:
        return matvec(self.weights.lm_head, h)


def greedy_token(logits: np.ndarray) -> int:
    logits = as_vector(logits)
    if logits.size == 0:
        raise ValueError("greedy_token of empty logits")
    # np.argmax returns the first maximal index
    return int(np.argmax(logits))


def full_forward(weights: ModelWeights, tokens: Sequence[int]) -> list[np.ndarray]:
    """Cache-free causal forward over a whole token sequence.

    Returns the hidden states after every layer: element ``j`` is an array of
    shape ``(len(tokens), d)`` holding layer ``j``'s output (``j = 0`` is the
    embedding). Used as an independent reference for the cached path.
    """
    cfg = weights.config
    for t in tokens:
        if not 0 <= t < cfg.vocab_size:
            raise IndexError(f"token id {t} outside vocab")
    x = weights.embedding[np.asarray(tokens, dtype=int)].astype(DTYPE)
    states = [x]
    n = x.shape[0]
    scale = math.sqrt(cfg.d_model)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    for lw in weights.layers:
        q = x @ lw.w_q.T
        k = x @ lw.w_k.T
        v = x @ lw.w_v.T
        scores = q @ k.T / scale
        scores[mask] = -np.inf
        scores = scores - scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        x = x + (p @ v) @ lw.w_o.T
        x = x + gelu(x @ lw.w_up.T) @ lw.w_down.T
        states.append(x)
    return states


def reference_decode(weights: ModelWeights, prompt: Sequence[int], max_new_tokens: int) -> list[int]:
    """Greedy full-depth decoding of one sequence, recomputed from scratch each step."""
    if not prompt:
        raise ValueError("prompt must be nonempty")
    tokens = list(prompt)
    out: list[int] = []
    for _ in range(max_new_tokens):
        h = full_forward(weights, tokens)[-1][-1]
        tok = greedy_token(weights.lm_head @ h)
        out.append(tok)
        tokens.append(tok)
        if tok == EOS_TOKEN:
            break
    return out
