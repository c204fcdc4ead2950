"""Iteration-level batched decoding with batch-wide early exit.

One iteration decodes one token for every running sequence. Layers run over
the whole batch; after each layer every sequence's exit status is OR-ed with
that layer's accept decision, and the iteration stops at the first layer where
all statuses are true. The K/V entries of the skipped layers are then filled
from the exit hidden states, so later tokens always find a complete cache.

Time is simulated: each iteration advances the clock by a charge computed from
a :class:`CostModel`. Wall-clock time is recorded for information only.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .exit_policy import (
    ALWAYS_AT,
    CLASSIFIER,
    NEVER,
    SOFTMAX,
    STATE,
    ExitTechnique,
    ThresholdSchedule,
    decide,
)
from .kv_cache import KvStore
from .metrics import MetricsReport, compute_metrics
from .model import EOS_TOKEN, ModelConfig, ToyDecoder, greedy_token

log = logging.getLogger(__name__)

PENDING = "pending"
RUNNING = "running"
FINISHED = "finished"


@dataclass(frozen=True)
class CostModel:
    """Simulated seconds charged per unit of work."""

    c_layer_fixed: float = 1e-3
    c_layer_per_seq: float = 1e-4
    c_fill_per_seq_layer: float = 2e-5
    c_check_projection: float = 5e-5  # softmax response and classifier
    c_check_similarity: float = 1e-5

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")

    def exit_check(self, technique: ExitTechnique) -> float:
        if technique.kind in (SOFTMAX, CLASSIFIER):
            return self.c_check_projection
        if technique.kind == STATE:
            return self.c_check_similarity
        return 0.0

    def layer_pass(self, batch_size: int) -> float:
        return self.c_layer_fixed + self.c_layer_per_seq * batch_size


@dataclass(frozen=True)
class Request:
    arrival_time: float
    prompt: tuple[int, ...]
    max_new_tokens: int

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be >= 0")
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Sequence:
    id: int
    prompt: tuple[int, ...]
    max_new_tokens: int
    arrival_time: float
    state: str = PENDING
    generated: list[int] = field(default_factory=list)
    exit_layers: list[int] = field(default_factory=list)
    accept_layers: list[int] = field(default_factory=list)
    first_token_time: float | None = None
    finish_time: float | None = None

    @property
    def next_input(self) -> int:
        return self.generated[-1] if self.generated else self.prompt[-1]

    @property
    def n_positions(self) -> int:
        """Positions already committed to the cache."""
        return len(self.prompt) - 1 + len(self.generated)

    @property
    def done(self) -> bool:
        return bool(self.generated) and (
            self.generated[-1] == EOS_TOKEN or len(self.generated) >= self.max_new_tokens
        )


class ExitStatus:
    """Per-sequence exit flags for one iteration; flags only ever turn on."""

    def __init__(self, batch_size: int):
        if batch_size < 1:
            raise ValueError("empty batch")
        self.flags = [False] * batch_size
        self.first_accept: list[int | None] = [None] * batch_size
        self.trace: list[list[bool]] = []

    def update(self, layer: int, accepted: list[bool]) -> bool:
        if len(accepted) != len(self.flags):
            raise ValueError("accept vector length does not match batch")
        for b, acc in enumerate(accepted):
            if acc and not self.flags[b]:
                self.flags[b] = True
                self.first_accept[b] = layer
        self.trace.append(list(self.flags))
        return all(self.flags)


def batch_exit_layer(accept_matrix: list[list[bool]], n_layers: int) -> tuple[int, list[int], list[list[bool]]]:
    """Replay the status update over a full ``layers x batch`` accept pattern.

    Returns ``(output_layer, first_accept_layers, status_trace)``; a sequence
    that never accepts before the last layer gets ``n_layers``.
    """
    if not accept_matrix:
        raise ValueError("accept matrix has no layers")
    status = ExitStatus(len(accept_matrix[0]))
    output_layer = n_layers
    for i in range(1, n_layers):
        if status.update(i, accept_matrix[i - 1]):
            output_layer = i
            break
    first = [n_layers if f is None else f for f in status.first_accept]
    return output_layer, first, status.trace


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = ModelConfig()
    technique: ExitTechnique = ExitTechnique(NEVER)
    schedule: ThresholdSchedule = ThresholdSchedule(0.9)
    cost: CostModel = CostModel()
    max_batch: int = 16
    num_blocks: int = 4096
    block_size: int = 16
    # Force the batch exit decision to (layer >= k) while still evaluating and
    # charging the technique's confidence measure.
    force_exit_layer: int | None = None

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.technique.kind == ALWAYS_AT and self.technique.layer > self.model.n_layers:
            raise ValueError("always_at layer exceeds the number of layers")
        if self.force_exit_layer is not None and not 1 <= self.force_exit_layer <= self.model.n_layers:
            raise ValueError("force_exit_layer outside 1..n_layers")


@dataclass
class IterationRecord:
    index: int
    clock_start: float
    clock: float  # clock after the iteration's charge
    charge: float
    batch_ids: list[int]
    output_layer: int
    accept_layers: list[int]
    tokens: list[int]
    status_trace: list[list[bool]]
    admitted: list[int] = field(default_factory=list)
    prefill_tokens: int = 0
    filled_pairs: int = 0
    # exit hidden states by sequence id; in-memory only
    exit_states: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "type": "iteration",
            "index": self.index,
            "clock": self.clock,
            "charge": self.charge,
            "batch_ids": self.batch_ids,
            "output_layer": self.output_layer,
            "per_seq": {
                str(sid): {"accept_layer": a, "token": t}
                for sid, a, t in zip(self.batch_ids, self.accept_layers, self.tokens)
            },
            "admitted": self.admitted,
            "prefill_tokens": self.prefill_tokens,
            "filled_pairs": self.filled_pairs,
            "status_trace": self.status_trace,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IterationRecord":
        ids = list(doc["batch_ids"])
        per = doc["per_seq"]
        return cls(
            index=doc["index"],
            clock_start=doc["clock"] - doc["charge"],
            clock=doc["clock"],
            charge=doc["charge"],
            batch_ids=ids,
            output_layer=doc["output_layer"],
            accept_layers=[per[str(s)]["accept_layer"] for s in ids],
            tokens=[per[str(s)]["token"] for s in ids],
            status_trace=[list(row) for row in doc.get("status_trace", [])],
            admitted=list(doc.get("admitted", [])),
            prefill_tokens=doc.get("prefill_tokens", 0),
            filled_pairs=doc.get("filled_pairs", 0),
        )


@dataclass
class SequenceRecord:
    id: int
    arrival: float
    first_token: float | None
    finish: float | None
    tokens: list[int]
    exit_layers: list[int]
    accept_layers: list[int] = field(default_factory=list)
    prompt: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"type": "sequence", **asdict(self)}

    @classmethod
    def from_json(cls, doc: dict) -> "SequenceRecord":
        doc = {k: v for k, v in doc.items() if k != "type"}
        return cls(**doc)


@dataclass
class Transcript:
    n_layers: int
    technique: str
    iterations: list[IterationRecord] = field(default_factory=list)
    sequences: list[SequenceRecord] = field(default_factory=list)
    start_clock: float = 0.0
    end_clock: float = 0.0
    idle_time: float = 0.0
    cache_stats: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def busy_time(self) -> float:
        return sum(it.charge for it in self.iterations)

    def header(self) -> dict:
        return {
            "type": "header",
            "n_layers": self.n_layers,
            "technique": self.technique,
            "start_clock": self.start_clock,
            "end_clock": self.end_clock,
            "idle_time": self.idle_time,
            "cache_stats": self.cache_stats,
        }

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for it in self.iterations:
                fh.write(json.dumps(it.to_json()) + "\n")
            for seq in self.sequences:
                fh.write(json.dumps(seq.to_json()) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "Transcript":
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not lines or lines[0].get("type") != "header":
            raise ValueError(f"{path}: missing transcript header")
        head = lines[0]
        tr = cls(
            n_layers=head["n_layers"],
            technique=head["technique"],
            start_clock=head["start_clock"],
            end_clock=head["end_clock"],
            idle_time=head.get("idle_time", 0.0),
            cache_stats=head.get("cache_stats", {}),
        )
        for lineno, doc in enumerate(lines[1:], start=2):
            kind = doc.get("type")
            if kind == "iteration":
                tr.iterations.append(IterationRecord.from_json(doc))
            elif kind == "sequence":
                tr.sequences.append(SequenceRecord.from_json(doc))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
        return tr


IterationHook = Callable[["Engine", IterationRecord], None]


class Engine:
    def __init__(self, model: ToyDecoder, config: EngineConfig, iteration_hook: IterationHook | None = None):
        if model.config != config.model:
            raise ValueError("model config does not match engine config")
        self.model = model
        self.config = config
        self.hook = iteration_hook
        self.cache = KvStore(
            n_layers=config.model.n_layers,
            d_model=config.model.d_model,
            num_blocks=config.num_blocks,
            block_size=config.block_size,
        )
        self.clock = 0.0
        self.sequences: dict[int, Sequence] = {}
        self.pending: deque[Sequence] = deque()
        self.running: list[Sequence] = []
        self._iterations = 0
        self._admitted_now: list[int] = []
        self._prefill_now = 0

    @property
    def n_layers(self) -> int:
        return self.config.model.n_layers

    # -- admission --------------------------------------------------------

    def submit(self, requests: Iterable[Request]) -> None:
        ordered = sorted(enumerate(requests), key=lambda pair: (pair[1].arrival_time, pair[0]))
        for _, req in ordered:
            sid = len(self.sequences)
            seq = Sequence(
                id=sid,
                prompt=tuple(req.prompt),
                max_new_tokens=req.max_new_tokens,
                arrival_time=req.arrival_time,
            )
            self.sequences[sid] = seq
            self.pending.append(seq)

    def admit_evict(self) -> list[Sequence]:
        """Evict finished sequences, then admit arrived requests in FIFO order.

        Admission stops at ``max_batch`` or at the first request whose blocks
        cannot be reserved; later arrivals never overtake it.
        """
        still = []
        for seq in self.running:
            if seq.state == FINISHED:
                self.cache.release(seq.id)
            else:
                still.append(seq)
        self.running = still
        while self.pending and len(self.running) < self.config.max_batch:
            head = self.pending[0]
            if head.arrival_time > self.clock:
                break
            need = len(head.prompt) + head.max_new_tokens
            if not self.cache.can_allocate(need):
                break
            self.pending.popleft()
            self.cache.allocate(head.id, need)
            self._prefill(head)
            head.state = RUNNING
            self.running.append(head)
            self._admitted_now.append(head.id)
        return self.running

    def _prefill(self, seq: Sequence) -> None:
        # Every prompt token except the last runs all layers without exit
        # checks; the last one is consumed by the first decode iteration.
        for pos, tok in enumerate(seq.prompt[:-1]):
            h = self.model.embed(tok)
            for i in range(1, self.n_layers + 1):
                h = self.model.layer_forward(i, [(seq.id, h)], self.cache)[0]
        self._prefill_now += len(seq.prompt) - 1

    # -- one iteration ----------------------------------------------------

    def _evidence(self, h_prev: np.ndarray, h: np.ndarray):
        kind = self.config.technique.kind
        if kind == SOFTMAX:
            return self.model.lm_head(h)
        if kind == STATE:
            return (h_prev, h)
        if kind == CLASSIFIER:
            w = self.model.weights
            return (h, (w.probe_w, w.probe_b))
        return None

    def decode_iteration(self, batch: list[Sequence]) -> IterationRecord:
        if not batch:
            raise ValueError("decode_iteration on an empty batch")
        cfg = self.config
        L = self.n_layers
        tech = cfg.technique
        cost = cfg.cost
        B = len(batch)
        ids = [s.id for s in batch]
        positions = [s.n_positions for s in batch]
        for sid, pos in zip(ids, positions):
            if not all(self.cache.length(sid, j) == pos for j in range(1, L + 1)):
                raise RuntimeError(f"seq {sid}: cache incomplete before position {pos}")

        hidden = [self.model.embed(s.next_input) for s in batch]
        status = ExitStatus(B)
        output_layer = L
        checks = 0
        for i in range(1, L + 1):
            new = self.model.layer_forward(i, list(zip(ids, hidden)), self.cache)
            if i < L:
                thr = cfg.schedule.threshold_at(i)
                accepted = [decide(tech, self._evidence(hp, h), thr, i) for hp, h in zip(hidden, new)]
                if tech.is_confidence:
                    checks += B
                if cfg.force_exit_layer is not None:
                    accepted = [i >= cfg.force_exit_layer] * B
                hidden = new
                if status.update(i, accepted):
                    output_layer = i
                    break
            else:
                hidden = new

        filled = self.cache.fill_skipped(
            self.model, [(sid, h, pos) for sid, h, pos in zip(ids, hidden, positions)], output_layer
        )
        tokens = [greedy_token(self.model.lm_head(h)) for h in hidden]

        charge = (
            output_layer * cost.layer_pass(B)
            + checks * cost.exit_check(tech)
            + filled * cost.c_fill_per_seq_layer
            + self._prefill_charge()
        )
        start = self.clock
        self.clock = start + charge
        accept_layers = [L if f is None else f for f in status.first_accept]
        for seq, tok, acc in zip(batch, tokens, accept_layers):
            seq.generated.append(tok)
            seq.exit_layers.append(output_layer)
            seq.accept_layers.append(acc)
            if seq.first_token_time is None:
                seq.first_token_time = self.clock
            if seq.done:
                seq.state = FINISHED
                seq.finish_time = self.clock

        record = IterationRecord(
            index=self._iterations,
            clock_start=start,
            clock=self.clock,
            charge=charge,
            batch_ids=ids,
            output_layer=output_layer,
            accept_layers=accept_layers,
            tokens=tokens,
            status_trace=status.trace,
            admitted=self._admitted_now,
            prefill_tokens=self._prefill_now,
            filled_pairs=filled,
            exit_states=dict(zip(ids, hidden)),
        )
        self._iterations += 1
        self._admitted_now = []
        self._prefill_now = 0
        return record

    def _prefill_charge(self) -> float:
        if not self._prefill_now:
            return 0.0
        # one full-depth pass per admitted prompt
        cost = self.config.cost
        n_passes = sum(1 for sid in self._admitted_now if len(self.sequences[sid].prompt) > 1)
        return self.n_layers * (n_passes * cost.c_layer_fixed + cost.c_layer_per_seq * self._prefill_now)

    # -- driver -----------------------------------------------------------

    def run(self, requests: Iterable[Request]) -> Transcript:
        wall0 = time.perf_counter()
        self.submit(requests)
        tr = Transcript(n_layers=self.n_layers, technique=self.config.technique.label)
        if self.pending:
            self.clock = self.pending[0].arrival_time
        tr.start_clock = self.clock
        while self.pending or self.running:
            self.admit_evict()
            if not self.running:
                if not self.pending:
                    break
                head = self.pending[0]
                if head.arrival_time <= self.clock:
                    raise RuntimeError(
                        f"request {head.id} needs more KV blocks than the pool holds "
                        f"({self.cache.blocks_needed(len(head.prompt) + head.max_new_tokens)} > {self.cache.num_blocks})"
                    )
                tr.idle_time += head.arrival_time - self.clock
                self.clock = head.arrival_time
                continue
            record = self.decode_iteration(self.running)
            tr.iterations.append(record)
            if self.hook is not None:
                self.hook(self, record)
        tr.cache_stats = self.cache.stats().as_dict()
        tr.end_clock = self.clock
        for seq in self.sequences.values():
            tr.sequences.append(
                SequenceRecord(
                    id=seq.id,
                    arrival=seq.arrival_time,
                    first_token=seq.first_token_time,
                    finish=seq.finish_time,
                    tokens=list(seq.generated),
                    exit_layers=list(seq.exit_layers),
                    accept_layers=list(seq.accept_layers),
                    prompt=list(seq.prompt),
                )
            )
        tr.wall_seconds = time.perf_counter() - wall0
        log.debug("run finished: %d iterations, clock %.6f", len(tr.iterations), self.clock)
        return tr


def run(
    requests: Iterable[Request],
    config: EngineConfig,
    model: ToyDecoder | None = None,
    iteration_hook: IterationHook | None = None,
) -> tuple[Transcript, MetricsReport]:
    """Serve ``requests`` to completion on a fresh engine; returns transcript and metrics."""
    model = model or ToyDecoder.from_config(config.model)
    transcript = Engine(model, config, iteration_hook).run(requests)
    return transcript, compute_metrics(transcript)
