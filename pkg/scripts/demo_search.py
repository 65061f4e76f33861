#!/usr/bin/env python3
"""Run a fully scripted search end to end and print the tree and answer.

The fixture is a tiny crater-lake question with two branches: the better one
needs a reflection to recover from a dead-end first query, then answers in
two cited sentences. Everything is deterministic.

    python scripts/demo_search.py                 # run in memory
    python scripts/demo_search.py --write-assets demo_assets
                                                  # also emit CLI fixtures

The emitted assets make the CLI runnable offline:

    treecite ask "What shaped the crater lake and what lives in it?" \
        --config demo_assets/config.toml --dump-tree demo_assets/tree.json
    treecite eval demo_assets/dataset.json --config demo_assets/config.toml \
        --report demo_assets/report.json
"""

import argparse
import json
import re
import sys
from pathlib import Path

from treecite import (
    BM25Index,
    BackendSet,
    Rule,
    ScriptedBackend,
    SearchConfig,
    chunk_documents,
    run_search,
    tree_to_dict,
)

QUESTION = "What shaped the crater lake and what lives in it?"

DOCUMENTS = [
    ("Lake formation",
     "The deep caldera lake formed after a volcanic collapse left a basin that "
     "slowly filled with rain and snowmelt."),
    ("Lake wildlife",
     "Introduced trout and native newts now dominate the caldera lake's cold waters."),
    ("Nearby trails",
     "Rim trails circle the caldera with views of the lake below."),
]

S1 = "The lake filled a basin left by a volcanic collapse [1]."
S2 = "Trout and newts dominate its cold waters [2]."
S3 = "Rim trails circle the caldera [1]."

POLICY_RULES = [
    {"match": r"Question: What shaped the crater lake and what lives in it\?$",
     "regex": True,
     "response": ["Search: first settlers homestead", "Search: rim trails viewpoints", "End"]},
    {"match": r"Reflexion: The search found nothing useful[^\n]*$", "regex": True,
     "response": "Search: volcanic collapse basin snowmelt"},
    {"match": r"\(Title: Lake formation\)[^\n]*$", "regex": True,
     "response": f"Output: {S1}"},
    {"match": r"Output: " + re.escape(S1) + "$", "regex": True,
     "response": "Search: trout newts cold waters"},
    {"match": r"\(Title: Lake wildlife\)[^\n]*$", "regex": True,
     "response": f"Output: {S2}"},
    {"match": r"Output: " + re.escape(S2) + "$", "regex": True, "response": "End"},
    {"match": r"\(Title: Nearby trails\)[^\n]*$", "regex": True,
     "response": f"Output: {S3}"},
    {"match": r"Output: " + re.escape(S3) + "$", "regex": True, "response": "End"},
]

REFLECTOR_RULES = [
    {"match": r"Search query: first settlers homestead", "regex": True,
     "response": "insufficient"},
    {"match": r"Search query: ", "regex": True, "response": "supportive"},
    {"match": r"Search: first settlers homestead$", "regex": True,
     "response": "Reflexion: The search found nothing useful. It might be better "
                 "to search how the lake formed."},
]


def _clean(sentence: str) -> str:
    return re.sub(r"\s?\[\d+\]", "", sentence)


SCORER_POLICY_RULES = [
    {"match": _clean(S1), "response": -2.2},
    {"match": _clean(S2), "response": -2.8},
    {"match": _clean(S3), "response": -3.0},
]
SCORER_REFERENCE_RULES = [
    {"match": _clean(S1), "response": -2.9},
    {"match": _clean(S2), "response": -3.1},
    {"match": _clean(S3), "response": -3.2},
]
JUDGE_RULES = [
    {"match": r"hypothesis: " + re.escape(_clean(S1)) + "$", "regex": True, "response": True},
    {"match": r"hypothesis: " + re.escape(_clean(S2)) + "$", "regex": True, "response": True},
    {"match": r"hypothesis: " + re.escape(_clean(S3)) + "$", "regex": True, "response": False},
]

ALL_RULES = {
    "policy": POLICY_RULES,
    "reflector": REFLECTOR_RULES,
    "scorer_policy": SCORER_POLICY_RULES,
    "scorer_reference": SCORER_REFERENCE_RULES,
    "judge": JUDGE_RULES,
}

CONFIG_TOML = """[search]
max_iterations = 20

[run]
dataset_tag = "asqa"
seed = 0

[paths]
corpus = "corpus.jsonl"
report_dir = "."

[backends.policy]
kind = "scripted"
rules = "rules/policy.json"

[backends.reflector]
kind = "scripted"
rules = "rules/reflector.json"

[backends.scorer_policy]
kind = "scripted"
rules = "rules/scorer_policy.json"

[backends.scorer_reference]
kind = "scripted"
rules = "rules/scorer_reference.json"

[backends.judge]
kind = "scripted"
rules = "rules/judge.json"
"""


def compile_rules(entries):
    return ScriptedBackend(
        [
            Rule(re.compile(e["match"], re.DOTALL) if e.get("regex") else e["match"], e["response"])
            for e in entries
        ]
    )


def build_demo():
    corpus = chunk_documents(DOCUMENTS, source_label="crater-lake-demo")
    backends = BackendSet(
        policy=compile_rules(POLICY_RULES),
        reflector=compile_rules(REFLECTOR_RULES),
        scorer_policy=compile_rules(SCORER_POLICY_RULES),
        scorer_reference=compile_rules(SCORER_REFERENCE_RULES),
        judge=compile_rules(JUDGE_RULES),
    )
    return QUESTION, BM25Index(corpus), backends


def write_assets(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "rules").mkdir(exist_ok=True)
    corpus = chunk_documents(DOCUMENTS, source_label="crater-lake-demo")
    with (directory / "corpus.jsonl").open("w", encoding="utf-8") as fh:
        for p in corpus:
            fh.write(json.dumps({"id": p.id, "title": p.title, "text": p.body}) + "\n")
    for name, rules in ALL_RULES.items():
        (directory / "rules" / f"{name}.json").write_text(
            json.dumps({"rules": rules}, indent=1), encoding="utf-8"
        )
    (directory / "config.toml").write_text(CONFIG_TOML, encoding="utf-8")
    dataset = [
        {
            "question": QUESTION,
            "docs": [{"id": p.id, "title": p.title, "text": p.body} for p in corpus],
            "qa_pairs": [
                {"short_answers": ["volcanic collapse"]},
                {"short_answers": ["trout"]},
            ],
        }
    ]
    (directory / "dataset.json").write_text(json.dumps(dataset, indent=1), encoding="utf-8")
    print(f"assets written to {directory}/")


def print_tree(node: dict, indent: str = "") -> None:
    state = node["state"]
    label = state["sentence"] or ("End" if state["is_end"] else "(root)")
    marks = []
    if state["reflections_used"]:
        marks.append(f"reflections={state['reflections_used']}")
    if node["terminal"]:
        marks.append("terminal")
    suffix = f"  [{', '.join(marks)}]" if marks else ""
    print(f"{indent}N={node['N']} V={node['V']:.3f}  {label}{suffix}")
    for child in node["children"]:
        print_tree(child, indent + "    ")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--write-assets", metavar="DIR", default=None)
    parser.add_argument("--iterations", type=int, default=20)
    args = parser.parse_args()

    if args.write_assets:
        write_assets(Path(args.write_assets))

    question, index, backends = build_demo()
    answer, tree, stats = run_search(
        question, index, backends, SearchConfig(max_iterations=args.iterations)
    )
    print(f"Question: {question}\n")
    print(f"Answer:   {answer.text}\n")
    print("Citations:")
    for pid in sorted(answer.citation_key):
        print(f"  [{pid}] {answer.citation_key[pid]}")
    print(
        f"\nSearch: {stats.iterations} iterations, {stats.nodes_created} nodes, "
        f"{stats.evaluations} evaluations, {stats.reflections_used} reflections"
    )
    print("Backend calls:", dict(sorted(stats.call_counts.items())))
    print("\nTree:")
    print_tree(tree_to_dict(tree))
    return 0


if __name__ == "__main__":
    sys.exit(main())
