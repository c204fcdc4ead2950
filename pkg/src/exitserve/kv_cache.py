"""Paged per-layer KV storage with fill-forward for layers skipped by an exit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DTYPE, as_vector


class KvCacheError(RuntimeError):
    pass


class OutOfBlocks(KvCacheError):
    """The pool cannot satisfy an allocation; callers defer admission."""


@dataclass
class _SeqEntry:
    # block ids per layer (index 0 is layer 1)
    tables: list[list[int]]
    lengths: list[int]

    @property
    def n_blocks(self) -> int:
        return sum(len(t) for t in self.tables)


@dataclass
class CacheStats:
    pool_blocks: int
    free_blocks: int
    per_seq_blocks: dict[int, int] = field(default_factory=dict)
    peak_used_blocks: int = 0

    def as_dict(self) -> dict:
        return {
            "pool_blocks": self.pool_blocks,
            "free_blocks": self.free_blocks,
            "per_seq_blocks": {str(k): v for k, v in sorted(self.per_seq_blocks.items())},
            "peak_used_blocks": self.peak_used_blocks,
        }


class KvStore:
    """Block pool holding K/V rows for every (sequence, layer, position).

    Every layer of a sequence owns its own chain of blocks of ``block_size``
    positions. Slots are write-once and must be filled in position order.
    """

    def __init__(self, n_layers: int, d_model: int, num_blocks: int, block_size: int = 16):
        if n_layers < 1 or d_model < 1:
            raise ValueError("n_layers and d_model must be positive")
        if num_blocks < 1 or block_size < 1:
            raise ValueError("num_blocks and block_size must be positive")
        self.n_layers = n_layers
        self.d_model = d_model
        self.num_blocks = num_blocks
        self.block_size = block_size
        self._k = np.zeros((num_blocks, block_size, d_model), dtype=DTYPE)
        self._v = np.zeros((num_blocks, block_size, d_model), dtype=DTYPE)
        self._written = np.zeros((num_blocks, block_size), dtype=bool)
        # pop() from the end hands out low ids first
        self._free = list(range(num_blocks - 1, -1, -1))
        self._seqs: dict[int, _SeqEntry] = {}
        self._peak = 0

    # -- allocation -------------------------------------------------------

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    def blocks_needed(self, n_tokens: int) -> int:
        return math.ceil(n_tokens / self.block_size) * self.n_layers

    def can_allocate(self, n_tokens: int) -> bool:
        return self.blocks_needed(n_tokens) <= len(self._free)

    def _take(self) -> int:
        if not self._free:
            raise OutOfBlocks("KV block pool exhausted")
        b = self._free.pop()
        self._written[b] = False
        used = self.num_blocks - len(self._free)
        self._peak = max(self._peak, used)
        return b

    def allocate(self, seq_id: int, initial_len: int) -> int:
        """Reserve blocks for ``initial_len`` positions on every layer."""
        if seq_id in self._seqs:
            raise KvCacheError(f"sequence {seq_id} already allocated")
        if initial_len < 0:
            raise ValueError("initial_len must be >= 0")
        per_layer = math.ceil(initial_len / self.block_size)
        need = per_layer * self.n_layers
        if need > len(self._free):
            raise OutOfBlocks(f"need {need} blocks for sequence {seq_id}, {len(self._free)} free")
        tables = [[self._take() for _ in range(per_layer)] for _ in range(self.n_layers)]
        self._seqs[seq_id] = _SeqEntry(tables=tables, lengths=[0] * self.n_layers)
        return seq_id

    def release(self, seq_id: int) -> None:
        entry = self._seqs.pop(seq_id, None)
        if entry is None:
            raise KvCacheError(f"sequence {seq_id} is not allocated")
        for table in entry.tables:
            self._free.extend(reversed(table))

    # -- reads and writes -------------------------------------------------

    def _entry(self, seq_id: int) -> _SeqEntry:
        try:
            return self._seqs[seq_id]
        except KeyError:
            raise KvCacheError(f"sequence {seq_id} is not allocated") from None

    def _check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.n_layers:
            raise KvCacheError(f"layer {layer} outside 1..{self.n_layers}")

    def __contains__(self, seq_id: int) -> bool:
        return seq_id in self._seqs

    def length(self, seq_id: int, layer: int) -> int:
        self._check_layer(layer)
        return self._entry(seq_id).lengths[layer - 1]

    def append(self, seq_id: int, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None:
        self._check_layer(layer)
        entry = self._entry(seq_id)
        k = as_vector(k)
        v = as_vector(v)
        if k.shape != (self.d_model,) or v.shape != (self.d_model,):
            raise ValueError(f"K/V must have length {self.d_model}")
        committed = entry.lengths[layer - 1]
        if position < committed:
            raise KvCacheError(f"seq {seq_id} layer {layer} position {position} already written")
        if position > committed:
            raise KvCacheError(
                f"seq {seq_id} layer {layer}: position {position} leaves a gap (next is {committed})"
            )
        table = entry.tables[layer - 1]
        blk_idx, off = divmod(position, self.block_size)
        if blk_idx == len(table):
            table.append(self._take())
        block = table[blk_idx]
        if self._written[block, off]:
            raise KvCacheError(f"slot for seq {seq_id} layer {layer} position {position} already written")
        self._k[block, off] = k
        self._v[block, off] = v
        self._written[block, off] = True
        entry.lengths[layer - 1] = position + 1

    def view(self, seq_id: int, layer: int, upto_position: int) -> tuple[np.ndarray, np.ndarray]:
        """K and V rows for positions ``0 .. upto_position - 1``, as ``(n, d)`` arrays."""
        self._check_layer(layer)
        entry = self._entry(seq_id)
        if upto_position < 0:
            raise ValueError("upto_position must be >= 0")
        have = entry.lengths[layer - 1]
        if upto_position > have:
            raise KvCacheError(
                f"seq {seq_id} layer {layer}: requested {upto_position} positions, {have} written"
            )
        if upto_position == 0:
            empty = np.zeros((0, self.d_model), dtype=DTYPE)
            return empty, empty.copy()
        table = entry.tables[layer - 1]
        n_full, rem = divmod(upto_position, self.block_size)
        ids = table[:n_full]
        parts_k = [self._k[ids].reshape(-1, self.d_model)] if ids else []
        parts_v = [self._v[ids].reshape(-1, self.d_model)] if ids else []
        if rem:
            parts_k.append(self._k[table[n_full], :rem])
            parts_v.append(self._v[table[n_full], :rem])
        return np.concatenate(parts_k), np.concatenate(parts_v)

    def is_complete(self, seq_id: int, n_positions: int) -> bool:
        """True when every layer holds at least ``n_positions`` entries."""
        return all(n >= n_positions for n in self._entry(seq_id).lengths)

    # -- fill-forward -----------------------------------------------------

    def fill_skipped(
        self,
        model,
        batch: Sequence[tuple[int, np.ndarray, int]],
        output_layer: int,
    ) -> int:
        """Write K/V for layers ``output_layer+1 .. L`` from each exit hidden state.

        ``batch`` holds ``(seq_id, h_exit, position)``. Every skipped layer
        costs one K and one V projection of ``h_exit``; no layer is run.
        Returns the number of (sequence, layer) pairs filled.
        """
        if not 1 <= output_layer <= self.n_layers:
            raise KvCacheError(f"output layer {output_layer} outside 1..{self.n_layers}")
        filled = 0
        for seq_id, h_exit, position in batch:
            if self.length(seq_id, output_layer) != position + 1:
                raise KvCacheError(
                    f"seq {seq_id}: layer {output_layer} not written at position {position}"
                )
            for j in range(output_layer + 1, self.n_layers + 1):
                k, v = model.compute_kv_pair(j, h_exit)
                self.append(seq_id, j, position, k, v)
                filled += 1
        return filled

    def stats(self) -> CacheStats:
        return CacheStats(
            pool_blocks=self.num_blocks,
            free_blocks=len(self._free),
            per_seq_blocks={sid: e.n_blocks for sid, e in self._seqs.items()},
            peak_used_blocks=self._peak,
        )

    def used_blocks(self) -> int:
        return sum(e.n_blocks for e in self._seqs.values())
