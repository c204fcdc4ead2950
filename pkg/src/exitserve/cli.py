"""Command-line entry point: ``exitserve <subcommand> ...``.

Subcommands:
    run          serve one workload with one exit technique and write a report
    compare      serve one workload under several techniques plus ``never``
    sched-train  train a layer-scheduling policy (optionally check it against value iteration)
    sched-eval   evaluate greedy / trained / optimal scheduling policies
    oracle       run the reference oracles (full-layer decoding, value iteration)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import Workload, compare, default_schedule, format_compare, gen_workload, load_trace
from .engine import CostModel, EngineConfig, run
from .exit_policy import ExitTechnique, ThresholdSchedule
from .layer_sched import (
    MdpParams,
    evaluate_policy,
    greedy_policy,
    state_space_size,
    train_policy,
    value_iteration,
)
from .metrics import FORMATS, write_report
from .model import ModelConfig, ModelWeights, ToyDecoder
from .oracles import check_full_layer_equivalence, q_error


def _pair(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _technique(text: str) -> ExitTechnique:
    try:
        return ExitTechnique.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_engine_args(p: argparse.ArgumentParser) -> None:
    m = p.add_argument_group("model")
    m.add_argument("--layers", type=int, default=8)
    m.add_argument("--d-model", type=int, default=64)
    m.add_argument("--vocab", type=int, default=256)
    m.add_argument("--model-seed", type=int, default=0)
    m.add_argument("--weights", type=Path, help="load model weights from a JSON file")

    w = p.add_argument_group("workload")
    w.add_argument("--trace", type=Path, help="CSV or JSON trace; overrides the generator flags")
    w.add_argument("--requests", type=int, default=16)
    w.add_argument("--interarrival", type=float, default=0.0, help="mean simulated seconds between arrivals")
    w.add_argument("--prompt-len", type=_pair, default=(4, 16), metavar="LO,HI")
    w.add_argument("--output-len", type=_pair, default=(8, 32), metavar="LO,HI")
    w.add_argument("--workload-seed", type=int, default=0)

    t = p.add_argument_group("thresholds")
    t.add_argument("--lambda0", type=float, help="initial threshold (default: 0.85 softmax, 0.95 state, 0.9 classifier)")
    t.add_argument("--decay", type=float, default=1.0)
    t.add_argument("--floor", type=float, default=0.0)

    c = p.add_argument_group("cost model (simulated seconds)")
    defaults = CostModel()
    c.add_argument("--c-layer-fixed", type=float, default=defaults.c_layer_fixed)
    c.add_argument("--c-layer-per-seq", type=float, default=defaults.c_layer_per_seq)
    c.add_argument("--c-fill", type=float, default=defaults.c_fill_per_seq_layer)
    c.add_argument("--c-check-projection", type=float, default=defaults.c_check_projection)
    c.add_argument("--c-check-similarity", type=float, default=defaults.c_check_similarity)

    e = p.add_argument_group("engine")
    e.add_argument("--max-batch", type=int, default=16)
    e.add_argument("--num-blocks", type=int, default=4096)
    e.add_argument("--block-size", type=int, default=16)
    e.add_argument("--force-exit-layer", type=int, help="exit every iteration at this layer; confidence still charged")


def _model_config(args) -> tuple[ModelConfig, ModelWeights | None]:
    if args.weights:
        weights = ModelWeights.load(args.weights)
        return weights.config, weights
    return ModelConfig(args.layers, args.d_model, args.vocab, args.model_seed), None


def _workload(args, vocab: int) -> Workload:
    if args.trace:
        return load_trace(args.trace, vocab_size=vocab)
    return gen_workload(args.requests, args.interarrival, args.prompt_len, args.output_len, args.workload_seed, vocab)


def _schedule(args, tech: ExitTechnique) -> ThresholdSchedule:
    if args.lambda0 is None:
        base = default_schedule(tech)
        return ThresholdSchedule(base.lambda0, args.decay, min(args.floor, base.lambda0))
    return ThresholdSchedule(args.lambda0, args.decay, args.floor)


def _engine_config(args, model_cfg: ModelConfig, tech: ExitTechnique) -> EngineConfig:
    cost = CostModel(
        c_layer_fixed=args.c_layer_fixed,
        c_layer_per_seq=args.c_layer_per_seq,
        c_fill_per_seq_layer=args.c_fill,
        c_check_projection=args.c_check_projection,
        c_check_similarity=args.c_check_similarity,
    )
    return EngineConfig(
        model=model_cfg,
        technique=tech,
        schedule=_schedule(args, tech),
        cost=cost,
        max_batch=args.max_batch,
        num_blocks=args.num_blocks,
        block_size=args.block_size,
        force_exit_layer=args.force_exit_layer,
    )


def cmd_run(args) -> int:
    model_cfg, weights = _model_config(args)
    cfg = _engine_config(args, model_cfg, args.technique)
    workload = _workload(args, model_cfg.vocab_size)
    model = ToyDecoder(weights) if weights is not None else ToyDecoder.from_config(model_cfg)
    transcript, report = run(workload.requests, cfg, model=model)
    if args.transcript:
        transcript.write_jsonl(args.transcript)
    if args.report:
        write_report(report, args.report, args.format)
    print(
        f"{report.technique}: {report.total_tokens} tokens, throughput {report.throughput:.2f} tok/s, "
        f"inner-token latency {report.inner_token_latency:.6f} s, early-exit rate {report.early_exit_rate:.2f}%, "
        f"mean exit layer {report.mean_exit_layer:.2f}"
    )
    return 0


def cmd_compare(args) -> int:
    model_cfg, weights = _model_config(args)
    base = _engine_config(args, model_cfg, ExitTechnique("never"))
    workload = _workload(args, model_cfg.vocab_size)
    techs = args.techniques
    schedules = {t.label: _schedule(args, t) for t in techs}
    rows = compare(workload, base, techs, schedules, weights)
    print(format_compare(rows))
    if args.report:
        Path(args.report).write_text(json.dumps([r.to_json() for r in rows], indent=2) + "\n")
    return 0


def _add_mdp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--population", type=int, default=2, help="sequences in the batch (N)")
    p.add_argument("--p", default="0.5", help="exit probability, one value or a comma list per layer")
    p.add_argument("--discount", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


def _mdp_params(args) -> MdpParams:
    probs = [float(x) for x in str(args.p).split(",")]
    if len(probs) == 1:
        probs = probs * args.layers
    return MdpParams(args.layers, args.population, tuple(probs), args.discount, args.alpha, args.epsilon)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-episodes", type=int, default=150_000)
    p.add_argument("--train-horizon", type=int, default=20)
    p.add_argument("--alpha-schedule", choices=("visit", "constant"), default="visit")
    p.add_argument("--kappa", type=float, default=1000.0)


def _train(args, params: MdpParams, kind: str):
    return train_policy(
        kind,
        params,
        args.train_episodes,
        args.train_horizon,
        args.seed,
        alpha_schedule=args.alpha_schedule,
        kappa=args.kappa,
    )


def cmd_sched_train(args) -> int:
    params = _mdp_params(args)
    policy = _train(args, params, args.kind)
    print(f"trained {args.kind} policy: {policy.steps} steps, state space C(N+L,N) = "
          f"{state_space_size(params.n_layers, params.population)}")
    if args.out:
        Path(args.out).write_text(json.dumps(policy.to_json(), indent=2) + "\n")
    if args.check_oracle:
        err = q_error(policy, value_iteration(params), params)
        ok = err <= args.tolerance
        print(f"max |Q - Q*| on reachable states: {err:.6f} ({'ok' if ok else 'FAIL'}, tolerance {args.tolerance})")
        return 0 if ok else 1
    return 0


def cmd_sched_eval(args) -> int:
    params = _mdp_params(args)
    results = []
    for kind in args.policies:
        if kind == "greedy":
            policy = greedy_policy
        elif kind == "optimal":
            policy = value_iteration(params).policy
        else:
            policy = _train(args, params, kind)
        results.append(evaluate_policy(policy, params, args.episodes, args.horizon, args.seed, kind=kind))
    for r in results:
        freqs = " ".join(f"{a}:{f:.3f}" for a, f in sorted(r.action_frequencies.items()))
        print(f"{r.policy_kind:<10} mean return {r.mean_return:.4f} (se {r.std_error:.4f})  actions {freqs}")
    if args.report:
        Path(args.report).write_text(json.dumps([r.to_json() for r in results], indent=2) + "\n")
    return 0


def cmd_oracle(args) -> int:
    if args.which == "decode":
        model_cfg, weights = _model_config(args)
        cfg = _engine_config(args, model_cfg, ExitTechnique("never"))
        workload = _workload(args, model_cfg.vocab_size)
        bad = check_full_layer_equivalence(workload.requests, cfg, weights)
        print(f"full-layer equivalence: {len(workload) - len(bad)}/{len(workload)} sequences match")
        for m in bad:
            print(f"  seq {m.seq_id}: expected {m.expected} got {m.got}", file=sys.stderr)
        return 0 if not bad else 1
    params = _mdp_params(args)
    vi = value_iteration(params)
    print(f"value iteration: {vi.iterations} sweeps, residual {vi.residual:.3e}, "
          f"{state_space_size(params.n_layers, params.population)} states")
    doc = []
    for (s, a), q in sorted(vi.q.items()):
        doc.append({"state": list(s), "action": a, "q": q})
        if sum(s) == params.population:
            print(f"  Q*({list(s)}, {a}) = {q:.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitserve", description="Early-exit batched inference laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("run", help="serve a workload with one exit technique")
    p.add_argument("--technique", type=_technique, default=ExitTechnique("never"),
                   help="softmax | state | classifier | never | always-at=K")
    _add_engine_args(p)
    p.add_argument("--report", type=Path)
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("--transcript", type=Path, help="write the iteration transcript as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare techniques against full-layer decoding")
    p.add_argument("--techniques", type=lambda s: [_technique(x) for x in s.split(",")],
                   default=[ExitTechnique.parse(x) for x in ("softmax", "state", "classifier")])
    _add_engine_args(p)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sched-train", help="train a layer-scheduling policy")
    _add_mdp_args(p)
    _add_train_args(p)
    p.add_argument("--kind", choices=("q_table", "linear"), default="q_table")
    p.add_argument("--out", type=Path, help="dump the trained policy as JSON")
    p.add_argument("--check-oracle", action="store_true", help="compare against value iteration")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_sched_train)

    p = sub.add_parser("sched-eval", help="evaluate scheduling policies")
    _add_mdp_args(p)
    _add_train_args(p)
    p.add_argument("--policies", type=lambda s: s.split(","), default=["greedy", "q_table"],
                   help="comma list of greedy, q_table, linear, optimal")
    p.add_argument("--episodes", type=int, default=10_000)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_sched_eval)

    p = sub.add_parser("oracle", help="run a reference oracle")
    osub = p.add_subparsers(dest="which", metavar="ORACLE", required=True)
    od = osub.add_parser("decode", help="engine (never) vs per-sequence reference decoder")
    _add_engine_args(od)
    od.set_defaults(func=cmd_oracle)
    os_ = osub.add_parser("sched", help="exact value iteration on the scheduling MDP")
    _add_mdp_args(os_)
    os_.add_argument("--out", type=Path)
    os_.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("exitserve: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "policies", None):
        unknown = set(args.policies) - {"greedy", "q_table", "linear", "optimal"}
        if unknown:
            print(f"exitserve: error: unknown policies {sorted(unknown)}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"exitserve: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
