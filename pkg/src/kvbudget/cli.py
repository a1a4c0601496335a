"""Command-line surface tying the pipeline together.

Subcommands: ``synth`` (trace generation), ``analyze`` (Lorenz/Gini
export), ``plan`` (budget configuration), ``simulate`` (decode
simulation), ``compare`` (policy sweeps) and ``replay`` (re-run a
recorded manifest). Every command writes a RunManifest next to its first
output; replaying the manifest reproduces all outputs bit-exactly.

Exit codes: 0 success, 1 usage error, 2 validation/parse error,
3 infeasible budget.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import (
    BudgetSpec,
    baseline_config,
    estimate_offline,
    load_config,
    plan_online,
    save_config,
)
from .cachesim import (
    disturbance,
    prefill_compress,
    replay_steps,
    retained_info,
)
from .errors import BudgetError, KVBudgetError, ParseError, ValidationError
from .importance import compute_importance, priority_sequence
from .lorenz import layer_stats
from .toymodel import ToyModel, decode, forward_trace
from .trace import load_trace, save_trace, synth_trace, trace_prefix


class UsageError(KVBudgetError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _default_seed() -> int:
    env = os.environ.get("KVBUDGET_SEED")
    return int(env) if env else 0


def parse_budget(value) -> float:
    """Accept fractions ("0.5") or percentages ("50%")."""
    if isinstance(value, (int, float)):
        return float(value)
    text = value.strip()
    try:
        if text.endswith("%"):
            return float(text[:-1]) / 100.0
        return float(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse budget {value!r}") from exc


def _parse_budget_list(value) -> list[float]:
    if isinstance(value, list):
        return [parse_budget(v) for v in value]
    items = [item for item in str(value).split(",") if item.strip()]
    if not items:
        raise UsageError("budget list is empty")
    return [parse_budget(item) for item in items]


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_manifest(command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str]) -> str:
    params = {k: v for k, v in vars(args).items() if k != "func"}
    seed = params.get("seed")
    if seed is None:
        seed = params.get("toy_seed")
    manifest = {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "params": params,
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
    }
    path = str(outputs[0]) + ".manifest.json"
    Path(path).write_text(json.dumps(manifest, sort_keys=True))
    return path


def _budget_from_args(args: argparse.Namespace) -> BudgetSpec:
    return BudgetSpec(
        r=parse_budget(args.budget),
        delta_tol=args.delta_tol,
        max_steps=args.max_steps,
        min_tokens_per_layer=args.min_per_layer,
    )


def _add_budget_flags(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--budget", required=required, default=None,
                        help="compression ratio, fraction or percentage (0.5 or 50%%)")
    parser.add_argument("--delta-tol", type=float, default=0.025,
                        help="termination threshold on the budget difference")
    parser.add_argument("--max-steps", type=int, default=32)
    parser.add_argument("--min-per-layer", "--layers-min", dest="min_per_layer",
                        type=int, default=1,
                        help="minimum retained tokens per layer")


def _plan_for(seq, meta, policy: str, budget: BudgetSpec, sink: int):
    if policy == "prefixkv":
        return plan_online(seq, budget)
    return baseline_config(policy, budget, meta, sink_count=sink if policy == "local" else None)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def run_synth(args: argparse.Namespace) -> list[str]:
    if args.seed is None:
        args.seed = _default_seed()
    if args.mode == "dirichlet":
        values = [float(v) for v in str(args.concentration).split(",") if v.strip()]
        if len(values) == 1:
            values = values * args.layers
        if len(values) != args.layers:
            raise UsageError(
                f"--concentration needs 1 or {args.layers} values, got {len(values)}"
            )
        args.concentration = ",".join(repr(v) for v in values)
        trace = synth_trace(args.layers, args.heads, args.seq, values,
                            seed=args.seed, with_kv=args.kv, label=args.label)
    else:
        model = ToyModel(layers=args.layers, heads=args.heads, dim=args.dim,
                         vocab=args.vocab, seed=args.seed)
        prompt = np.random.default_rng(args.seed).integers(0, args.vocab, size=args.seq)
        trace = forward_trace(model, prompt)
    save_trace(trace, args.out)
    outputs = [args.out]
    _write_manifest("synth", args, [], outputs)
    return outputs


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

def run_analyze(args: argparse.Namespace) -> list[str]:
    trace = load_trace(args.trace)
    seq = priority_sequence(compute_importance(trace))
    stats = layer_stats(seq)
    if args.layer is not None:
        if not 0 <= args.layer < trace.meta.layers:
            raise ValidationError(f"layer {args.layer} out of range")
        stats = [stats[args.layer]]
    curve_rows = []
    stat_rows = []
    for s in stats:
        for x, y in zip(s.curve.x, s.curve.y):
            curve_rows.append([s.layer, float(x), float(y)])
        stat_rows.append([s.layer, s.gini])
    _write_csv(args.out_curves, ["layer", "x", "y"], curve_rows)
    _write_csv(args.out_stats, ["layer", "gini"], stat_rows)
    outputs = [args.out_curves, args.out_stats]
    _write_manifest("analyze", args, [args.trace], outputs)
    return outputs


# --------------------------------------------------------------------------
# plan
# --------------------------------------------------------------------------

def run_plan(args: argparse.Namespace) -> list[str]:
    budget = _budget_from_args(args)
    traces = [load_trace(p) for p in args.traces]
    if args.prefill is not None:
        traces = [trace_prefix(t, args.prefill) for t in traces]
    if args.policy != "prefixkv":
        if len(traces) != 1:
            raise UsageError("baseline policies plan from exactly one trace")
        config = baseline_config(args.policy, budget, traces[0].meta,
                                 sink_count=args.sink if args.policy == "local" else None)
    elif args.offline:
        seqs = [priority_sequence(compute_importance(t)) for t in traces]
        config = estimate_offline(seqs, budget, method=args.method)
    else:
        if len(traces) != 1:
            raise UsageError("online planning takes exactly one trace; pass --offline for several")
        config = plan_online(priority_sequence(compute_importance(traces[0])), budget)
    save_config(config, args.out)
    outputs = [args.out]
    _write_manifest("plan", args, list(args.traces), outputs)
    return outputs


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _write_sim_outputs(args, state, prefill_info) -> list[str]:
    with open(args.out_log, "w") as handle:
        for record in state.step_log:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    info_rows = [[0, l, float(v)] for l, v in enumerate(prefill_info)]
    for record in state.step_log:
        for l, v in enumerate(record["retained_info"]):
            info_rows.append([record["step"], l, float(v)])
    _write_csv(args.out_info, ["step", "layer", "retained_info"], info_rows)
    return [args.out_log, args.out_info]


def run_simulate(args: argparse.Namespace) -> list[str]:
    if (args.trace is None) == (args.toy_seed is None):
        raise UsageError("pass exactly one of --trace or --toy-seed")
    if args.disturb and args.toy_seed is None:
        raise UsageError("--disturb requires the toy-model input")
    if args.disturb and args.steps < 1:
        raise UsageError("--disturb needs at least one decode step")

    inputs = []
    report = None
    if args.trace is not None:
        inputs.append(args.trace)
        trace = load_trace(args.trace)
        n_total = trace.meta.seq_len
        if args.config is not None:
            inputs.append(args.config)
            config = load_config(args.config)
        else:
            if args.budget is None:
                raise UsageError("pass --config or --budget")
            n0 = n_total - args.steps
            if n0 < 1:
                raise ValidationError(f"trace of length {n_total} too short for {args.steps} steps")
            budget = _budget_from_args(args)
            prefix = trace_prefix(trace, n0)
            seq = priority_sequence(compute_importance(prefix))
            config = _plan_for(seq, prefix.meta, args.policy, budget, args.sink)
        prefill = trace_prefix(trace, config.seq_len)
        state = prefill_compress(prefill, config, protect_distance=args.protect,
                                 merge_policy=args.merge)
        prefill_info = retained_info(state, state.report_profile)
        replay_steps(trace, state, args.steps)
    else:
        model = ToyModel(layers=args.toy_layers, heads=args.toy_heads,
                         dim=args.toy_dim, vocab=args.toy_vocab, seed=args.toy_seed)
        prompt = np.random.default_rng(model.seed).integers(0, model.vocab,
                                                            size=args.prompt_len)
        trace = forward_trace(model, prompt)
        if args.config is not None:
            inputs.append(args.config)
            config = load_config(args.config)
            if config.seq_len != args.prompt_len:
                raise ValidationError(
                    f"configuration covers {config.seq_len} positions, prompt has {args.prompt_len}"
                )
        else:
            if args.budget is None:
                raise UsageError("pass --config or --budget")
            budget = _budget_from_args(args)
            seq = priority_sequence(compute_importance(trace))
            config = _plan_for(seq, trace.meta, args.policy, budget, args.sink)
        state = prefill_compress(trace, config, protect_distance=args.protect,
                                 merge_policy=args.merge)
        prefill_info = retained_info(state, state.report_profile)
        if args.steps > 0:
            decode(model, prompt, args.steps, state)
        if args.disturb:
            report = disturbance(model, args.prompt_len, args.steps, config,
                                 protect_distance=args.protect, merge_policy=args.merge)

    outputs = _write_sim_outputs(args, state, prefill_info)
    if report is not None:
        rows = []
        for l in range(report.mae.shape[0]):
            for t in range(report.mae.shape[1]):
                rows.append([l, t, float(report.mae[l, t])])
        _write_csv(args.out_disturb, ["layer", "token_index", "mae"], rows)
        outputs.append(args.out_disturb)
    _write_manifest("simulate", args, inputs, outputs)
    return outputs


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

def run_compare(args: argparse.Namespace) -> list[str]:
    budgets = _parse_budget_list(args.budgets)
    args.budgets = ",".join(repr(b) for b in budgets)
    policies = [p for p in str(args.policies).split(",") if p]
    merges = [m for m in str(args.merge).split(",") if m]
    if not budgets or not policies or not merges:
        raise UsageError("budgets, policies and merge modes must be non-empty")
    if (args.traces is None or not args.traces) == (args.toy_seed is None):
        raise UsageError("pass trace files or --toy-seed, not both")

    rows = []
    if args.toy_seed is not None:
        models = [ToyModel(layers=args.toy_layers, heads=args.toy_heads, dim=args.toy_dim,
                           vocab=args.toy_vocab, seed=args.toy_seed + i)
                  for i in range(args.runs)]
        contexts = []
        for model in models:
            prompt = np.random.default_rng(model.seed).integers(0, model.vocab,
                                                                size=args.prompt_len)
            trace = forward_trace(model, prompt)
            seq = priority_sequence(compute_importance(trace))
            contexts.append((model, trace, seq))
        for r in budgets:
            budget = BudgetSpec(r=r, delta_tol=args.delta_tol, max_steps=args.max_steps,
                                min_tokens_per_layer=args.min_per_layer)
            for policy in policies:
                for mode in merges:
                    mins, means, maes = [], [], []
                    for model, trace, seq in contexts:
                        config = _plan_for(seq, trace.meta, policy, budget, args.sink)
                        state = prefill_compress(trace, config, protect_distance=args.protect,
                                                 merge_policy=mode)
                        info = retained_info(state, state.report_profile)
                        mins.append(float(info.min()))
                        means.append(float(info.mean()))
                        report = disturbance(model, args.prompt_len, args.decode_len, config,
                                             protect_distance=args.protect, merge_policy=mode)
                        maes.append(float(report.mae.mean()))
                    rows.append([r, policy, mode,
                                 float(np.mean(mins)), float(np.mean(means)),
                                 float(np.mean(maes))])
        header = ["budget", "policy", "merge", "min_retained_info",
                  "mean_retained_info", "mean_mae"]
        inputs = []
    else:
        loaded = [load_trace(p) for p in args.traces]
        contexts = []
        for trace in loaded:
            n0 = trace.meta.seq_len - args.steps
            if n0 < 1:
                raise ValidationError("trace too short for the requested decode steps")
            prefix = trace_prefix(trace, n0)
            seq = priority_sequence(compute_importance(prefix))
            contexts.append((trace, prefix, seq))
        for r in budgets:
            budget = BudgetSpec(r=r, delta_tol=args.delta_tol, max_steps=args.max_steps,
                                min_tokens_per_layer=args.min_per_layer)
            for policy in policies:
                for mode in merges:
                    mins, means = [], []
                    for trace, prefix, seq in contexts:
                        config = _plan_for(seq, prefix.meta, policy, budget, args.sink)
                        state = prefill_compress(prefix, config, protect_distance=args.protect,
                                                 merge_policy=mode)
                        if args.steps:
                            replay_steps(trace, state, args.steps)
                        info = retained_info(state, state.report_profile)
                        mins.append(float(info.min()))
                        means.append(float(info.mean()))
                    rows.append([r, policy, mode,
                                 float(np.mean(mins)), float(np.mean(means))])
        header = ["budget", "policy", "merge", "min_retained_info", "mean_retained_info"]
        inputs = list(args.traces)

    _write_csv(args.out, header, rows)
    outputs = [args.out]
    _write_manifest("compare", args, inputs, outputs)
    return outputs


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------

RUNNERS = {
    "synth": run_synth,
    "analyze": run_analyze,
    "plan": run_plan,
    "simulate": run_simulate,
    "compare": run_compare,
}


def run_replay(args: argparse.Namespace) -> list[str]:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read manifest {args.manifest}: {exc}") from exc
    command = manifest.get("command")
    if command not in RUNNERS:
        raise ParseError(f"manifest names unknown command {command!r}")
    params = manifest.get("params")
    if not isinstance(params, dict):
        raise ParseError("manifest field 'params' must be an object")
    return RUNNERS[command](argparse.Namespace(**params))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvbudget",
                     description="Layer-adaptive KV cache retention budgets")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic or toy-model trace")
    p.add_argument("--mode", choices=["dirichlet", "toy"], default="dirichlet")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seq", type=int, default=64)
    p.add_argument("--concentration", default="1.0",
                   help="per-layer Dirichlet parameters, comma separated")
    p.add_argument("--kv", action="store_true", help="emit unit-norm key/value vectors")
    p.add_argument("--dim", type=int, default=64, help="toy model width")
    p.add_argument("--vocab", type=int, default=256, help="toy model vocabulary")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--label", default="dirichlet")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("analyze", help="export Lorenz curves and Gini coefficients")
    p.add_argument("trace")
    p.add_argument("--layer", type=int, default=None, help="restrict output to one layer")
    p.add_argument("--out-curves", default="lorenz.csv")
    p.add_argument("--out-stats", default="gini.csv")
    p.set_defaults(func=run_analyze)

    p = sub.add_parser("plan", help="derive a prefix configuration for a budget")
    _add_budget_flags(p)
    p.add_argument("--policy", choices=["prefixkv", "uniform", "pyramid", "local"],
                   default="prefixkv")
    p.add_argument("--sink", type=int, default=4, help="sink positions for the local policy")
    p.add_argument("--offline", action="store_true",
                   help="estimate one configuration from several sample traces")
    p.add_argument("--method", choices=["per-sample-mean", "pooled-curve"],
                   default="per-sample-mean")
    p.add_argument("--prefill", type=int, default=None,
                   help="plan on the first K positions only")
    p.add_argument("--out", default="config.json")
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=run_plan)

    p = sub.add_parser("simulate", help="run prefill compression plus decode maintenance")
    p.add_argument("--config", default=None)
    _add_budget_flags(p, required=False)
    p.add_argument("--policy", choices=["prefixkv", "uniform", "pyramid", "local"],
                   default="prefixkv")
    p.add_argument("--sink", type=int, default=4)
    p.add_argument("--trace", default=None)
    p.add_argument("--toy-seed", type=int, default=None)
    p.add_argument("--toy-layers", type=int, default=8)
    p.add_argument("--toy-heads", type=int, default=4)
    p.add_argument("--toy-dim", type=int, default=64)
    p.add_argument("--toy-vocab", type=int, default=256)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--merge", choices=["none", "position", "feature"], default="none")
    p.add_argument("--protect", type=int, default=10)
    p.add_argument("--disturb", action="store_true",
                   help="also measure feature disturbance (toy mode)")
    p.add_argument("--out-log", default="sim.jsonl")
    p.add_argument("--out-info", default="retained_info.csv")
    p.add_argument("--out-disturb", default="disturbance.csv")
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("compare", help="sweep budgets x policies x merge modes")
    p.add_argument("--budgets", required=True, help="comma-separated budget list")
    p.add_argument("--policies", default="prefixkv,uniform,pyramid,local")
    p.add_argument("--merge", default="none")
    p.add_argument("--delta-tol", type=float, default=0.025)
    p.add_argument("--max-steps", type=int, default=32)
    p.add_argument("--min-per-layer", "--layers-min", dest="min_per_layer",
                   type=int, default=1)
    p.add_argument("--sink", type=int, default=4)
    p.add_argument("--protect", type=int, default=10)
    p.add_argument("--steps", type=int, default=0,
                   help="replayed decode steps per trace")
    p.add_argument("--toy-seed", type=int, default=None)
    p.add_argument("--toy-layers", type=int, default=8)
    p.add_argument("--toy-heads", type=int, default=4)
    p.add_argument("--toy-dim", type=int, default=64)
    p.add_argument("--toy-vocab", type=int, default=256)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--decode-len", type=int, default=16)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out", default="compare.csv")
    p.add_argument("traces", nargs="*")
    p.set_defaults(func=run_compare)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.set_defaults(func=run_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 3
    except KVBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
