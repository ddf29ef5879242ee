"""Command-line front end.

Every subcommand that writes a file also writes ``<out>.manifest.json``
recording the config, seeds, input digests and tool version, so a run can
be repeated exactly.  Exit codes: 0 success, 2 bad config or usage,
3 bad input data.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from archgraph import __version__
from archgraph.bench import DEFAULT_TASKS, HIGHER, LOWER, gen_synthetic, load_benchmark, save_benchmark
from archgraph.errors import ArchGraphError, ConfigError, ParseError
from archgraph.graph import format_edgelist, read_edgelist
from archgraph.mwas import MwasParams, mwas_approx, mwas_bruteforce
from archgraph.predictor import PredictorState, TrainConfig
from archgraph.search import (
    METHODS,
    Pretrained,
    SearchConfig,
    arch_graph_search,
    prepare_target,
    pretrain,
    relation_graph,
    results_csv,
    run_experiment,
    runs_csv,
    summary_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors already; keep that but make it explicit."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config handling


def _read_config_file(path):
    try:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
    except Exception as exc:  # unreadable or unparsable config is a config error
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a mapping")
    return doc


def _nested(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{name}' settings: {exc}") from None


def build_config(doc: dict) -> SearchConfig:
    """SearchConfig from a plain mapping; nested ``mwas`` and ``train`` mappings allowed."""
    doc = dict(doc)
    known = {f.name for f in dataclasses.fields(SearchConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mwas" in doc:
        doc["mwas"] = _nested(MwasParams, doc["mwas"], "mwas")
    if "train" in doc:
        doc["train"] = _nested(TrainConfig, doc["train"], "train")
    try:
        return SearchConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: SearchConfig) -> dict:
    return dataclasses.asdict(cfg)


def _config(args) -> SearchConfig:
    doc = _read_config_file(args.config) if args.config else {}
    for key in ("trust_alpha", "trust_k", "trust_cap", "top_k", "m", "b_f", "b_v", "p"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if args.seed is not None:
        doc["seed"] = args.seed
    return build_config(doc)


def parse_seeds(text: str) -> list[int]:
    """``"1..20"`` (inclusive range) or a comma list such as ``"0,3,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError(f"no seeds in {text!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return seeds


# ---------------------------------------------------------------------------
# Manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, command, config, seeds=(), inputs=()):
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _sibling(out, suffix):
    p = Path(out)
    return p.with_name(p.stem + suffix + p.suffix)


# ---------------------------------------------------------------------------
# Checkpoints carry the source sample so trust references survive a round trip


def save_pretrained(pre: Pretrained, path):
    pre.state.save(path)
    doc = json.loads(Path(path).read_text())
    doc["source_idx"] = [int(i) for i in pre.source_idx]
    doc["source_task"] = pre.source_task
    Path(path).write_text(json.dumps(doc))


def load_pretrained(path) -> Pretrained:
    state = PredictorState.load(path)
    doc = json.loads(Path(path).read_text())
    idx = np.asarray(doc.get("source_idx", []), dtype=np.intp)
    return Pretrained(state, idx, doc.get("source_task"))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_synth(args):
    tasks = DEFAULT_TASKS
    if args.target_corr is not None:
        tasks = (("source", HIGHER, 1.0), ("target", LOWER if args.lower_better else HIGHER, args.target_corr))
    bench = gen_synthetic(args.n, args.nodes, args.ops, tasks, noise_sd=args.noise_sd, seed=args.seed or 0)
    save_benchmark(bench, args.out)
    write_manifest(args.out, "gen-synth", {
        "n": args.n, "nodes": args.nodes, "ops": args.ops, "noise_sd": args.noise_sd,
        "tasks": [list(t) for t in tasks],
    }, [args.seed or 0])
    return EXIT_OK


def cmd_pretrain(args):
    bench = load_benchmark(args.bench)
    cfg = _config(args)
    pre = pretrain(bench, cfg)
    save_pretrained(pre, args.out)
    write_manifest(args.out, "pretrain", config_to_dict(cfg), [cfg.seed], [args.bench])
    return EXIT_OK


def cmd_search(args):
    bench = load_benchmark(args.bench)
    cfg = _config(args).with_target(args.task)
    inputs = [args.bench]
    pre = None
    if args.checkpoint:
        pre = load_pretrained(args.checkpoint)
        inputs.append(args.checkpoint)
    res = arch_graph_search(bench, cfg, pre, method=args.method, oracle=args.oracle)
    _emit(runs_csv([res]), args.out)
    if args.out:
        write_manifest(args.out, "search", {**config_to_dict(cfg), "method": args.method, "oracle": args.oracle},
                       [cfg.seed], inputs)
    return EXIT_OK


def cmd_experiment(args):
    bench = load_benchmark(args.bench)
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = parse_seeds(args.seeds)
    targets = [t.strip() for t in args.targets.split(",")] if args.targets else None
    results = run_experiment(bench, methods, seeds, cfg, jobs=args.jobs, targets=targets)
    _emit(results_csv(results), args.out)
    if args.out:
        Path(_sibling(args.out, ".runs")).write_text(runs_csv(results))
        Path(_sibling(args.out, ".summary")).write_text(summary_csv(results))
        write_manifest(args.out, "experiment", {**config_to_dict(cfg), "methods": methods, "targets": targets},
                       seeds, [args.bench])
    else:
        sys.stderr.write(summary_csv(results))
    return EXIT_OK


def cmd_mwas(args):
    g = read_edgelist(args.graph)
    try:
        params = MwasParams(eps=args.eps, seed=args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = mwas_bruteforce(g, args.eps) if args.brute_force else mwas_approx(g, params)
    text = format_edgelist(res.subgraph) + json.dumps(res.summary()) + "\n"
    _emit(text, args.out)
    if args.out:
        write_manifest(args.out, "mwas", {"eps": args.eps, "brute_force": args.brute_force}, [args.seed or 0],
                       [args.graph])
    return EXIT_OK


def cmd_build_graph(args):
    bench = load_benchmark(args.bench)
    cfg = _config(args).with_target(args.task)
    inputs = [args.bench]
    if args.checkpoint:
        pre = load_pretrained(args.checkpoint)
        inputs.append(args.checkpoint)
    else:
        pre = pretrain(bench, cfg)
    prep = prepare_target(bench, cfg, pre)
    top = prep.coarse[: cfg.top_k]
    g = relation_graph(prep, top)
    header = "# candidates: " + " ".join(bench.ids[i] for i in top) + "\n"
    _emit(header + format_edgelist(g), args.out)
    if args.out:
        write_manifest(args.out, "build-graph", config_to_dict(cfg), [cfg.seed], inputs)
    return EXIT_OK


def _read_long_csv(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"method", "task", "metric", "value", "seed"}
    if rows and not need <= set(rows[0]):
        raise ParseError(f"expected columns {sorted(need)}", 1)
    return rows


def cmd_metrics(args):
    """Mean and variance of each (method, task, metric) in a long results CSV."""
    import csv
    import io

    groups = {}
    for lineno, row in enumerate(_read_long_csv(args.results), start=2):
        try:
            v = float(row["value"])
        except ValueError:
            raise ParseError(f"non-numeric value {row['value']!r}", lineno) from None
        groups.setdefault((row["method"], row["task"], row["metric"]), []).append(v)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "task", "metric", "mean", "var", "n"])
    by_method = {}
    for (method, task, metric), vals in groups.items():
        a = np.asarray(vals)
        w.writerow([method, task, metric, repr(float(a.mean())), repr(float(a.var())), len(a)])
        by_method.setdefault((method, metric), []).append(float(a.mean()))
    for (method, metric), means in by_method.items():
        w.writerow([method, "avg", metric, repr(float(np.mean(means))), "nan", len(means)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(p, out_help="output path (default: standard output)"):
    p.add_argument("--seed", type=int, default=None, help="root seed; every random stream derives from it")
    p.add_argument("--config", default=None, help="JSON or YAML file of SearchConfig keys")
    p.add_argument("--out", default=None, help=out_help)


def _budget_flags(p):
    p.add_argument("--m", type=int, default=None, help="source-task architectures to evaluate")
    p.add_argument("--b-f", dest="b_f", type=int, default=None, help="target architectures used for finetuning")
    p.add_argument("--b-v", dest="b_v", type=int, default=None, help="target architectures used for validation")
    p.add_argument("--p", type=int, default=None, help="final evaluations of top-ranked candidates")
    p.add_argument("--top-k", dest="top_k", type=int, default=None, help="candidates kept for the relation graph")


def _trust_flags(p):
    p.add_argument("--trust-alpha", type=float, default=None, help="fraction of sparsest reference points dropped")
    p.add_argument("--trust-k", type=int, default=None, help="neighbour rank used for density filtering")
    p.add_argument("--trust-cap", type=float, default=None, help="upper cap on a trust score")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="archgraph", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"archgraph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic JSON-lines benchmark")
    _common(p, "benchmark path (required)")
    p.add_argument("--n", type=int, default=4096, help="number of architectures")
    p.add_argument("--nodes", type=int, default=6, help="cell nodes per architecture")
    p.add_argument("--ops", type=int, default=4, help="operation vocabulary size")
    p.add_argument("--noise-sd", type=float, default=0.1, help="per-task metric noise in latent units")
    p.add_argument("--target-corr", type=float, default=None,
                   help="emit a source plus one target task at this rank correlation instead of the default tasks")
    p.add_argument("--lower-better", action="store_true", help="with --target-corr, make the target lower-is-better")
    p.set_defaults(func=cmd_gen_synth, need_out=True)

    p = sub.add_parser("pretrain", help="train the source-task predictor and save a checkpoint")
    _common(p, "checkpoint path (required)")
    p.add_argument("--bench", required=True, help="JSON-lines benchmark")
    p.add_argument("--m", type=int, default=None, help="source-task architectures to evaluate")
    p.set_defaults(func=cmd_pretrain, need_out=True)

    p = sub.add_parser("search", help="run one search method on one target task")
    _common(p)
    p.add_argument("--bench", required=True, help="JSON-lines benchmark")
    p.add_argument("--task", required=True, help="target task name")
    p.add_argument("--method", default="arch-graph", choices=METHODS)
    p.add_argument("--checkpoint", default=None, help="pretrained source predictor (else pretrain first)")
    p.add_argument("--oracle", action="store_true", help="replace the predictor by the ground truth")
    _budget_flags(p)
    _trust_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("experiment", help="every method on every target for a list of seeds")
    _common(p, "long-format results CSV; .runs and .summary CSVs are written next to it")
    p.add_argument("--bench", required=True, help="JSON-lines benchmark")
    p.add_argument("--methods", default="arch-graph,arch-graph-zero,random-search",
                   help=f"comma list from {', '.join(METHODS)}")
    p.add_argument("--seeds", default="0..19", help="inclusive range 'a..b' or comma list")
    p.add_argument("--targets", default=None, help="comma list of target tasks (default: all but the source)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel worker processes")
    _budget_flags(p)
    _trust_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("mwas", help="maximal weighted acyclic subgraph of an edge-list graph")
    _common(p)
    p.add_argument("graph", help="edge-list file: 'src dst [weight]' per line")
    p.add_argument("--eps", type=float, default=0.5, help="drop-ratio threshold")
    p.add_argument("--brute-force", action="store_true", help="exact search (small graphs only)")
    p.set_defaults(func=cmd_mwas)

    p = sub.add_parser("build-graph", help="trust-weighted relation graph over the coarse top-k")
    _common(p)
    p.add_argument("--bench", required=True, help="JSON-lines benchmark")
    p.add_argument("--task", required=True, help="target task name")
    p.add_argument("--checkpoint", default=None, help="pretrained source predictor (else pretrain first)")
    _budget_flags(p)
    _trust_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("metrics", help="summarise a long-format results CSV")
    p.add_argument("results", help="CSV with columns method,task,metric,value,seed")
    p.add_argument("--out", default=None, help="output path (default: standard output)")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if getattr(args, "need_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArchGraphError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
