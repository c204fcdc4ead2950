import json

import pytest

from exitserve import EngineConfig, ModelConfig, ThresholdSchedule, compute_metrics, run
from exitserve.bench import TraceError, compare, gen_workload, load_trace
from exitserve.cli import main
from exitserve.engine import SequenceRecord, Transcript
from exitserve.exit_policy import ExitTechnique
from exitserve.metrics import early_exit_rate_from_iterations, read_report, write_report

TINY = ModelConfig(n_layers=4, d_model=16, vocab_size=32, seed=3)
TINY_ARGS = ["--layers", "4", "--d-model", "16", "--vocab", "32", "--model-seed", "3",
             "--requests", "4", "--prompt-len", "2,4", "--output-len", "3,6"]


def test_gen_workload_respects_ranges_and_is_seeded():
    w = gen_workload(50, 0.01, (2, 5), (1, 3), seed=4, vocab_size=32)
    assert len(w) == 50
    arrivals = [r.arrival_time for r in w.requests]
    assert arrivals == sorted(arrivals) and arrivals[0] >= 0
    assert all(2 <= len(r.prompt) <= 5 and 1 <= r.max_new_tokens <= 3 for r in w.requests)
    assert all(1 <= t < 32 for r in w.requests for t in r.prompt)
    assert w.to_json() == gen_workload(50, 0.01, (2, 5), (1, 3), seed=4, vocab_size=32).to_json()
    assert w.to_json() != gen_workload(50, 0.01, (2, 5), (1, 3), seed=5, vocab_size=32).to_json()


def test_gen_workload_zero_interarrival_is_a_burst():
    w = gen_workload(5, 0.0, (1, 1), (1, 1), seed=0)
    assert {r.arrival_time for r in w.requests} == {0.0}


@pytest.mark.parametrize("bad", [dict(prompt_len_range=(0, 2)), dict(output_len_range=(3, 2))])
def test_gen_workload_rejects_bad_ranges(bad):
    kw = dict(n_requests=2, mean_interarrival=0.1, prompt_len_range=(1, 2), output_len_range=(1, 2), seed=0)
    kw.update(bad)
    with pytest.raises(ValueError):
        gen_workload(**kw)


def test_load_csv_trace(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("arrival_time,prompt_len,max_new_tokens\n0.5,3,4\n0.0,2,1\n1.25,5,2\n")
    w = load_trace(p)
    assert [r.arrival_time for r in w.requests] == [0.0, 0.5, 1.25]
    assert [len(r.prompt) for r in w.requests] == [2, 3, 5]
    assert [r.max_new_tokens for r in w.requests] == [1, 4, 2]
    assert load_trace(p).to_json() == w.to_json()


def test_load_csv_trace_reports_line_number(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("arrival_time,prompt_len,max_new_tokens\n0.5,3,4\n-1,2,1\n")
    with pytest.raises(TraceError, match=r"t\.csv:3"):
        load_trace(p)
    p.write_text("arrival_time,prompt_len,max_new_tokens\n0.5,x,4\n")
    with pytest.raises(TraceError, match=r":2"):
        load_trace(p)
    p.write_text("when,len,n\n")
    with pytest.raises(TraceError, match=r":1"):
        load_trace(p)


def test_header_only_trace_is_empty(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("arrival_time,prompt_len,max_new_tokens\n")
    assert len(load_trace(p)) == 0


def test_load_json_trace(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"requests": [{"arrival_time": 0.2, "prompt": [5, 6], "max_new_tokens": 3}]}))
    w = load_trace(p)
    assert w.requests[0].prompt == (5, 6)
    p.write_text(json.dumps([{"arrival_time": 0.2, "prompt": [999], "max_new_tokens": 3}]))
    with pytest.raises(TraceError):
        load_trace(p)


def _hand_transcript():
    # four tokens, exits at 3, 4, 2, 4 on a 4-layer model
    return Transcript(
        n_layers=4,
        technique="hand",
        sequences=[
            SequenceRecord(0, 0.0, 0.005, 0.015, [7, 8], [3, 4]),
            SequenceRecord(1, 0.0, 0.010, 0.020, [9, 0], [2, 4]),
        ],
        start_clock=0.0,
        end_clock=0.02,
    )


def test_compute_metrics_hand_example():
    rep = compute_metrics(_hand_transcript())
    assert rep.total_tokens == 4
    assert rep.throughput == pytest.approx(200.0, rel=1e-12)
    assert rep.inner_token_latency == pytest.approx(0.005, rel=1e-12)
    assert rep.early_exit_rate == 50.0
    assert rep.mean_exit_layer == pytest.approx(13 / 4)
    assert rep.exit_histogram == {2: 1, 3: 1, 4: 2}


def test_compute_metrics_rejects_unfinished():
    t = _hand_transcript()
    t.sequences[0].finish = None
    with pytest.raises(ValueError, match="unfinished"):
        compute_metrics(t)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(tmp_path, fmt):
    _, rep = run(gen_workload(4, 0.01, (2, 3), (2, 4), seed=1, vocab_size=32).requests,
                 EngineConfig(model=TINY, technique=ExitTechnique.parse("state"), schedule=ThresholdSchedule(0.95)))
    path = tmp_path / f"r.{fmt}"
    write_report(rep, path, fmt)
    back = read_report(path)
    assert back.to_json() == rep.to_json()


def test_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_report(compute_metrics(_hand_transcript()), tmp_path / "r.xml", "xml")


def test_histogram_rate_matches_iteration_rate():
    tr, rep = run(gen_workload(8, 0.005, (1, 4), (2, 8), seed=2, vocab_size=32).requests,
                  EngineConfig(model=TINY, technique=ExitTechnique.parse("state"), schedule=ThresholdSchedule(0.95)))
    assert rep.early_exit_rate == pytest.approx(early_exit_rate_from_iterations(tr), abs=1e-12)


def test_always_exit_is_not_slower_than_full_depth():
    w = gen_workload(8, 0.0, (1, 1), (4, 8), seed=3, vocab_size=32)
    rows = compare(w, EngineConfig(model=TINY), [ExitTechnique.parse("always-at=1")])
    assert rows[0].technique == "never" and rows[0].throughput_ratio == 1.0
    assert rows[1].report.throughput >= rows[0].report.throughput


def test_cli_without_subcommand_fails(capsys):
    assert main([]) != 0
    assert "usage" in capsys.readouterr().err


def test_cli_bad_technique_fails():
    assert main(["run", "--technique", "magic"]) != 0


def test_cli_run_writes_report(tmp_path):
    out = tmp_path / "r.json"
    assert main(["run", "--technique", "state", "--lambda0", "0.95", "--report", str(out), *TINY_ARGS]) == 0
    doc = json.loads(out.read_text())
    assert doc["technique"] == "state_similarity"
    assert {"throughput", "inner_token_latency", "early_exit_rate", "exit_histogram"} <= set(doc)


def test_cli_run_is_deterministic(tmp_path):
    docs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert main(["run", "--technique", "softmax", "--report", str(out), *TINY_ARGS]) == 0
        doc = json.loads(out.read_text())
        doc.pop("info_wall_seconds")
        docs.append(json.dumps(doc, sort_keys=True))
    assert docs[0] == docs[1]


def test_cli_run_with_trace_and_transcript(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("arrival_time,prompt_len,max_new_tokens\n0,2,3\n0.001,3,2\n")
    tx = tmp_path / "tx.jsonl"
    args = ["run", "--trace", str(trace), "--transcript", str(tx), "--layers", "4", "--d-model", "16", "--vocab", "32"]
    assert main(args) == 0
    assert Transcript.read_jsonl(tx).sequences


def test_cli_compare_reports_ratios(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert main(["compare", "--techniques", "softmax,state", "--report", str(out), *TINY_ARGS]) == 0
    rows = json.loads(out.read_text())
    assert [r["technique"] for r in rows] == ["never", "softmax_response", "state_similarity"]
    assert all("throughput_ratio_vs_never" in r and "latency_ratio_vs_never" in r for r in rows)
    assert "thr x" in capsys.readouterr().out


def test_cli_sched_commands(tmp_path):
    out = tmp_path / "p.json"
    assert main(["sched-train", "--train-episodes", "200", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["kind"] == "q_table"
    rep = tmp_path / "e.json"
    assert main(["sched-eval", "--policies", "greedy,optimal", "--episodes", "50", "--report", str(rep)]) == 0
    assert [r["policy_kind"] for r in json.loads(rep.read_text())] == ["greedy", "optimal"]
    assert main(["sched-eval", "--policies", "bogus"]) != 0
    assert main(["oracle", "sched"]) == 0


def test_cli_oracle_decode():
    assert main(["oracle", "decode", *TINY_ARGS]) == 0


def test_compare_baseline_ignores_forced_exit():
    w = gen_workload(4, 0.0, (1, 2), (2, 4), seed=6, vocab_size=32)
    base = EngineConfig(model=TINY, force_exit_layer=2)
    rows = compare(w, base, [ExitTechnique.parse("state")])
    assert rows[0].report.mean_exit_layer == TINY.n_layers
    assert rows[1].report.mean_exit_layer == 2
