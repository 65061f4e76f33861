"""Command-line surface: index, ask, eval, inspect-tree.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .backends import probe_capabilities
from .config import AppConfig, build_backends, load_config
from .corpus import BM25Index, load_corpus_jsonl, load_index, save_index
from .errors import ConfigError, TreeciteError
from .evaluation import load_dataset, run_benchmark
from .mcts import SearchConfig, run_search, tree_to_dict, tree_to_dot
from .protocol import load_template

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _add_search_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="generation seed")
    parser.add_argument("--iterations", type=int, default=None, help="max search iterations")
    parser.add_argument("--depth", type=int, default=None, help="max tree depth")
    parser.add_argument("--children", type=int, default=None, help="max children per node")
    parser.add_argument("--reflections", type=int, default=None, help="max reflections per step")
    parser.add_argument("--uct-weight", type=float, default=None, help="UCT exploration weight")
    parser.add_argument("--no-reflection", action="store_true", help="skip the reflection loop")
    parser.add_argument("--no-rg", action="store_true", help="disable the generation reward")
    parser.add_argument("--no-ra", action="store_true", help="disable the attribution reward")
    parser.add_argument("--no-search", action="store_true", help="greedy single-path generation")


def _apply_search_flags(cfg: SearchConfig, args: argparse.Namespace) -> SearchConfig:
    return SearchConfig(
        uct_weight=args.uct_weight if args.uct_weight is not None else cfg.uct_weight,
        max_children=args.children if args.children is not None else cfg.max_children,
        max_depth=args.depth if args.depth is not None else cfg.max_depth,
        max_iterations=args.iterations if args.iterations is not None else cfg.max_iterations,
        max_reflections=args.reflections if args.reflections is not None else cfg.max_reflections,
        retrieval_k=cfg.retrieval_k,
        disable_reflection=args.no_reflection or cfg.disable_reflection,
        disable_rg=args.no_rg or cfg.disable_rg,
        disable_ra=args.no_ra or cfg.disable_ra,
        disable_search=args.no_search or cfg.disable_search,
        rg_clip=cfg.rg_clip,
    )


def _load_app(args: argparse.Namespace) -> AppConfig:
    config = load_config(args.config)
    logging.basicConfig(level=getattr(logging, config.log_level.upper(), logging.INFO))
    return config


def _load_retriever(config: AppConfig) -> BM25Index:
    if config.index_path:
        return load_index(config.resolve(config.index_path))
    if config.corpus_path:
        return BM25Index(load_corpus_jsonl(config.resolve(config.corpus_path)))
    raise ConfigError("config needs paths.corpus or paths.index for this command")


def cmd_index(args: argparse.Namespace) -> int:
    corpus = load_corpus_jsonl(args.corpus)
    index = BM25Index(corpus)
    save_index(index, args.out)
    print(f"indexed {len(corpus)} passages -> {args.out}")
    return EXIT_OK


def cmd_ask(args: argparse.Namespace) -> int:
    config = _load_app(args)
    cfg = _apply_search_flags(config.search, args)
    retriever = _load_retriever(config)
    backends = build_backends(config)
    probe_capabilities(backends)
    template = load_template(config.dataset_tag, config.templates_dir and config.resolve(config.templates_dir))
    seed = args.seed if args.seed is not None else config.seed
    answer, tree, stats = run_search(
        args.question, retriever, backends, cfg,
        template=template, seed=seed, premise_budget=config.premise_budget,
    )
    print(answer.text)
    if answer.partial:
        print("(partial answer: search ended without an explicit stop)")
    if answer.citation_key:
        print("\nCitations:")
        for pid in sorted(answer.citation_key):
            print(f"  [{pid}] {answer.citation_key[pid]}")
    print(
        f"\nsearch: {stats.iterations} iterations, {stats.nodes_created} nodes, "
        f"{stats.evaluations} evaluations, {stats.reflections_used} reflections"
    )
    calls = ", ".join(f"{role}={n}" for role, n in sorted(stats.call_counts.items())) or "none"
    print(f"backend calls: {calls}")
    if args.dump_tree:
        Path(args.dump_tree).write_text(
            json.dumps(tree_to_dict(tree), indent=2, ensure_ascii=False), encoding="utf-8"
        )
        print(f"tree written to {args.dump_tree}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_app(args)
    cfg = _apply_search_flags(config.search, args)
    dataset_path = args.dataset or (config.dataset_path and config.resolve(config.dataset_path))
    if not dataset_path:
        raise ConfigError("no dataset given: pass one or set paths.dataset in the config")
    dataset = load_dataset(dataset_path, config.dataset_tag)
    backends = build_backends(config)
    probe_capabilities(backends)
    template = load_template(config.dataset_tag, config.templates_dir and config.resolve(config.templates_dir))
    workers = args.workers if args.workers is not None else config.workers
    seed = args.seed if args.seed is not None else config.seed
    report = run_benchmark(
        dataset, cfg, backends, template,
        limit=args.limit, workers=workers, seed=seed,
        premise_budget=config.premise_budget,
    )
    if args.report:
        report_path = Path(args.report)
    else:
        report_dir = config.resolve(config.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        report_path = report_dir / f"report-{config.dataset_tag}.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json(), encoding="utf-8")
    report_path.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"evaluated {len(report.items)} item(s) [{report.dataset_tag}]")
    for name in sorted(report.aggregate):
        print(f"  {name}: {report.aggregate[name]:.4f}")
    if report.failed_items:
        print(f"  failed items: {report.failed_items}")
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_inspect_tree(args: argparse.Namespace) -> int:
    path = Path(args.tree)
    if not path.exists():
        raise ConfigError(f"tree file not found: {path}")
    try:
        tree = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid tree JSON: {exc}") from exc

    def walk(node: dict, depth: int) -> tuple[int, int]:
        count, deepest = 1, depth
        for child in node.get("children", []):
            c, d = walk(child, depth + 1)
            count += c
            deepest = max(deepest, d)
        return count, deepest

    nodes, depth = walk(tree, 0)
    print(f"nodes: {nodes}, depth: {depth}, root N={tree['N']} V={tree['V']:.4f}")
    if args.dot:
        Path(args.dot).write_text(tree_to_dot(tree), encoding="utf-8")
        print(f"DOT graph written to {args.dot}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treecite",
        description="Attributed question answering via tree search over retrieve-then-cite steps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build a retrieval index from a JSONL corpus")
    p_index.add_argument("corpus", help="JSONL corpus, one {id,title,text} object per line")
    p_index.add_argument("-o", "--out", required=True, help="output index file")
    p_index.set_defaults(func=cmd_index)

    p_ask = sub.add_parser("ask", help="answer one question with citations")
    p_ask.add_argument("question")
    p_ask.add_argument("--config", required=True, help="TOML config file")
    p_ask.add_argument("--dump-tree", default=None, help="write the search tree as JSON")
    _add_search_flags(p_ask)
    p_ask.set_defaults(func=cmd_ask)

    p_eval = sub.add_parser("eval", help="run the benchmark harness over a dataset")
    p_eval.add_argument("dataset", nargs="?", default=None, help="dataset JSON file")
    p_eval.add_argument("--config", required=True, help="TOML config file")
    p_eval.add_argument("--limit", type=int, default=None, help="evaluate only the first N items")
    p_eval.add_argument("--workers", type=int, default=None, help="parallel search workers")
    p_eval.add_argument("--report", default=None, help="report output path (JSON; CSV written alongside)")
    _add_search_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_tree = sub.add_parser("inspect-tree", help="summarize a dumped search tree")
    p_tree.add_argument("tree", help="tree JSON from ask --dump-tree")
    p_tree.add_argument("--dot", default=None, help="also write a Graphviz DOT file")
    p_tree.set_defaults(func=cmd_inspect_tree)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TreeciteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
