"""Serving metrics over an engine transcript, plus report I/O.

throughput           = generated tokens / (end clock - first arrival)
inner_token_latency  = sum over sequences of (finish - first_token) / generated tokens
early_exit_rate      = percent of generated tokens whose iteration exited before the last layer

The latency denominator counts every generated token, including each
sequence's first token whose latency is not part of the numerator.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

FORMATS = ("json", "csv")


@dataclass
class MetricsReport:
    technique: str = ""
    n_layers: int = 0
    n_sequences: int = 0
    n_iterations: int = 0
    total_tokens: int = 0
    total_time: float = 0.0
    throughput: float = 0.0
    inner_token_latency: float = 0.0
    early_exit_rate: float = 0.0
    mean_exit_layer: float = 0.0
    busy_time: float = 0.0
    idle_time: float = 0.0
    start_clock: float = 0.0
    end_clock: float = 0.0
    exit_histogram: dict[int, int] = field(default_factory=dict)
    accept_histogram: dict[int, int] = field(default_factory=dict)
    cache_stats: dict = field(default_factory=dict)
    info_wall_seconds: float = 0.0  # informational; not deterministic

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["exit_histogram"] = {str(k): v for k, v in sorted(self.exit_histogram.items())}
        doc["accept_histogram"] = {str(k): v for k, v in sorted(self.accept_histogram.items())}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        doc = dict(doc)
        doc["exit_histogram"] = {int(k): v for k, v in doc.get("exit_histogram", {}).items()}
        doc["accept_histogram"] = {int(k): v for k, v in doc.get("accept_histogram", {}).items()}
        return cls(**doc)


def _histogram_rate(hist: dict[int, int], n_layers: int) -> float:
    total = sum(hist.values())
    if total == 0:
        return 0.0
    early = sum(n for layer, n in hist.items() if layer < n_layers)
    return 100.0 * early / total


def early_exit_rate_from_iterations(transcript) -> float:
    """Early-exit rate straight from iteration records (token weighted)."""
    total = early = 0
    for it in transcript.iterations:
        b = len(it.batch_ids)
        total += b
        if it.output_layer < transcript.n_layers:
            early += b
    return 100.0 * early / total if total else 0.0


def compute_metrics(transcript) -> MetricsReport:
    seqs = transcript.sequences
    unfinished = [s.id for s in seqs if s.finish is None or s.first_token is None]
    if unfinished:
        raise ValueError(f"transcript has unfinished sequences: {unfinished}")
    L = transcript.n_layers
    total_tokens = sum(len(s.tokens) for s in seqs)
    exit_hist = Counter()
    accept_hist = Counter()
    for s in seqs:
        exit_hist.update(s.exit_layers)
        accept_hist.update(s.accept_layers)
    total_time = transcript.end_clock - transcript.start_clock
    latency_sum = sum(s.finish - s.first_token for s in seqs)
    return MetricsReport(
        technique=transcript.technique,
        n_layers=L,
        n_sequences=len(seqs),
        n_iterations=len(transcript.iterations),
        total_tokens=total_tokens,
        total_time=total_time,
        throughput=total_tokens / total_time if total_time > 0 else 0.0,
        inner_token_latency=latency_sum / total_tokens if total_tokens else 0.0,
        early_exit_rate=_histogram_rate(exit_hist, L),
        mean_exit_layer=(sum(k * v for k, v in exit_hist.items()) / total_tokens) if total_tokens else 0.0,
        busy_time=sum(it.charge for it in transcript.iterations),
        idle_time=transcript.idle_time,
        start_clock=transcript.start_clock,
        end_clock=transcript.end_clock,
        exit_histogram=dict(sorted(exit_hist.items())),
        accept_histogram=dict(sorted(accept_hist.items())),
        cache_stats=dict(transcript.cache_stats),
        info_wall_seconds=getattr(transcript, "wall_seconds", 0.0),
    )


_SCALARS = [f.name for f in fields(MetricsReport) if f.name not in ("exit_histogram", "accept_histogram", "cache_stats")]
_CSV_COLUMNS = ["record", *_SCALARS, "cache_stats", "layer", "count"]
_INT_FIELDS = {"n_layers", "n_sequences", "n_iterations", "total_tokens"}


def write_report(report: MetricsReport, path: str | Path, fmt: str = "json") -> None:
    if fmt not in FORMATS:
        raise ValueError(f"unsupported report format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_COLUMNS)
        row = ["metrics", *[getattr(report, name) for name in _SCALARS]]
        w.writerow(row + [json.dumps(report.cache_stats, sort_keys=True), "", ""])
        blanks = [""] * (len(_SCALARS) + 1)
        for name in ("exit_histogram", "accept_histogram"):
            for layer, count in sorted(getattr(report, name).items()):
                w.writerow([name, *blanks, layer, count])


def read_report(path: str | Path, fmt: str | None = None) -> MetricsReport:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ValueError(f"unsupported report format {fmt!r}")
    if fmt == "json":
        return MetricsReport.from_json(json.loads(path.read_text()))
    report = None
    hists: dict[str, dict[int, int]] = {"exit_histogram": {}, "accept_histogram": {}}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            kind = row["record"]
            if kind == "metrics":
                values = {}
                for name in _SCALARS:
                    raw = row[name]
                    if name == "technique":
                        values[name] = raw
                    elif name in _INT_FIELDS:
                        values[name] = int(raw)
                    else:
                        values[name] = float(raw)
                report = MetricsReport(**values, cache_stats=json.loads(row["cache_stats"] or "{}"))
            elif kind in hists:
                hists[kind][int(row["layer"])] = int(row["count"])
            else:
                raise ValueError(f"{path}:{lineno}: unknown record {kind!r}")
    if report is None:
        raise ValueError(f"{path}: no metrics row")
    report.exit_histogram = hists["exit_histogram"]
    report.accept_histogram = hists["accept_histogram"]
    return report
