"""Workload generation, trace loading and multi-technique comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import EngineConfig, Request, run
from .exit_policy import DEFAULT_THRESHOLDS, NEVER, ExitTechnique, ThresholdSchedule
from .metrics import MetricsReport
from .model import EOS_TOKEN, ModelWeights, ToyDecoder


class TraceError(ValueError):
    pass


@dataclass
class Workload:
    requests: list[Request] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.requests)

    def sorted(self) -> "Workload":
        return Workload(sorted(self.requests, key=lambda r: r.arrival_time))

    def to_json(self) -> dict:
        return {
            "requests": [
                {"arrival_time": r.arrival_time, "prompt": list(r.prompt), "max_new_tokens": r.max_new_tokens}
                for r in self.requests
            ]
        }


def _token_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _prompt_tokens(rng: np.random.Generator, length: int, vocab_size: int) -> tuple[int, ...]:
    # ids 1..vocab-1; 0 is EOS
    return tuple(int(t) for t in rng.integers(EOS_TOKEN + 1, vocab_size, size=length))


def gen_workload(
    n_requests: int,
    mean_interarrival: float,
    prompt_len_range: tuple[int, int],
    output_len_range: tuple[int, int],
    seed: int,
    vocab_size: int = 256,
) -> Workload:
    """Poisson arrivals with uniform prompt and output lengths (inclusive ranges)."""
    if n_requests < 0:
        raise ValueError("n_requests must be >= 0")
    if mean_interarrival < 0:
        raise ValueError("mean_interarrival must be >= 0")
    for name, (lo, hi) in (("prompt_len_range", prompt_len_range), ("output_len_range", output_len_range)):
        if lo < 1 or hi < lo:
            raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = _token_rng(seed)
    gaps = rng.exponential(mean_interarrival, size=n_requests) if mean_interarrival > 0 else np.zeros(n_requests)
    arrivals = np.cumsum(gaps)
    reqs = []
    for t in arrivals:
        plen = int(rng.integers(prompt_len_range[0], prompt_len_range[1] + 1))
        olen = int(rng.integers(output_len_range[0], output_len_range[1] + 1))
        reqs.append(Request(float(t), _prompt_tokens(rng, plen, vocab_size), olen))
    return Workload(reqs)


def load_trace(path: str | Path, vocab_size: int = 256) -> Workload:
    """Read a CSV (arrival_time,prompt_len,max_new_tokens) or JSON trace.

    CSV prompts are generated from ``Philox(key=row_index)`` with the data
    rows numbered from 0. JSON traces carry explicit token ids, either as a
    list of requests or as ``{"requests": [...]}``.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        return _load_json_trace(path, vocab_size)
    return _load_csv_trace(path, vocab_size)


def _load_csv_trace(path: Path, vocab_size: int) -> Workload:
    reqs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty file (expected a header line)")
        header = [h.strip() for h in header]
        if header != ["arrival_time", "prompt_len", "max_new_tokens"]:
            raise TraceError(f"{path}:1: expected header arrival_time,prompt_len,max_new_tokens, got {header}")
        for row_index, row in enumerate(reader):
            lineno = row_index + 2
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise TraceError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                arrival = float(row[0])
                plen = int(row[1])
                max_new = int(row[2])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(arrival) or arrival < 0:
                raise TraceError(f"{path}:{lineno}: arrival_time must be a finite value >= 0")
            if plen < 1:
                raise TraceError(f"{path}:{lineno}: prompt_len must be >= 1")
            if max_new < 1:
                raise TraceError(f"{path}:{lineno}: max_new_tokens must be >= 1")
            prompt = _prompt_tokens(_token_rng(row_index), plen, vocab_size)
            reqs.append(Request(arrival, prompt, max_new))
    return Workload(reqs).sorted()


def _load_json_trace(path: Path, vocab_size: int) -> Workload:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    items = doc["requests"] if isinstance(doc, dict) else doc
    reqs = []
    for i, item in enumerate(items):
        try:
            prompt = tuple(int(t) for t in item["prompt"])
            if any(not 0 <= t < vocab_size for t in prompt):
                raise ValueError("token id outside vocabulary")
            reqs.append(Request(float(item["arrival_time"]), prompt, int(item["max_new_tokens"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceError(f"{path}: request {i}: {exc}") from None
    return Workload(reqs).sorted()


# -- comparisons ------------------------------------------------------------


def default_schedule(technique: ExitTechnique) -> ThresholdSchedule:
    return ThresholdSchedule(DEFAULT_THRESHOLDS.get(technique.kind, 0.9))


@dataclass
class CompareRow:
    technique: str
    report: MetricsReport
    throughput_ratio: float
    latency_ratio: float

    def to_json(self) -> dict:
        r = self.report
        return {
            "technique": self.technique,
            "throughput": r.throughput,
            "inner_token_latency": r.inner_token_latency,
            "early_exit_rate": r.early_exit_rate,
            "mean_exit_layer": r.mean_exit_layer,
            "throughput_ratio_vs_never": self.throughput_ratio,
            "latency_ratio_vs_never": self.latency_ratio,
        }


def compare(
    workload: Workload,
    base: EngineConfig,
    techniques: list[ExitTechnique],
    schedules: dict[str, ThresholdSchedule] | None = None,
    weights: ModelWeights | None = None,
) -> list[CompareRow]:
    """Run ``never`` plus every technique on the same workload and weights.

    A forced exit layer in ``base`` applies to every technique but ``never``.

    Ratios are technique / never for throughput and never / technique for
    latency, so values above 1 are improvements in both columns.
    """
    schedules = schedules or {}
    model = ToyDecoder(weights) if weights is not None else ToyDecoder.from_config(base.model)
    techs = [ExitTechnique(NEVER)] + [t for t in techniques if t.kind != NEVER]
    reports = []
    for tech in techs:
        sched = schedules.get(tech.label) or default_schedule(tech)
        cfg = replace(base, technique=tech, schedule=sched)
        if tech.kind == NEVER:
            cfg = replace(cfg, force_exit_layer=None)  # the baseline always runs full depth
        _, report = run(workload.requests, cfg, model=model)
        reports.append((tech.label, report))
    ref = reports[0][1]
    rows = []
    for label, rep in reports:
        thr = rep.throughput / ref.throughput if ref.throughput > 0 else float("nan")
        lat = ref.inner_token_latency / rep.inner_token_latency if rep.inner_token_latency > 0 else float("nan")
        rows.append(CompareRow(label, rep, thr, lat))
    return rows


def format_compare(rows: list[CompareRow]) -> str:
    head = f"{'technique':<22}{'tok/s':>12}{'latency':>12}{'exit %':>9}{'layers':>8}{'thr x':>8}{'lat x':>8}"
    lines = [head]
    for row in rows:
        r = row.report
        lines.append(
            f"{row.technique:<22}{r.throughput:>12.2f}{r.inner_token_latency:>12.6f}"
            f"{r.early_exit_rate:>9.2f}{r.mean_exit_layer:>8.2f}{row.throughput_ratio:>8.3f}{row.latency_ratio:>8.3f}"
        )
    return "\n".join(lines)
