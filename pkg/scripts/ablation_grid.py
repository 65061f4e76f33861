#!/usr/bin/env python3
"""Run the demo question under each ablation switch and tabulate the outcome.

Shows how the runtime flags change tree shape, backend usage and the answer:
no tree search collapses to a greedy chain, no reflection keeps dead-end
retrievals, and disabling either reward removes its backend calls entirely.

    python scripts/ablation_grid.py
"""

import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from demo_search import build_demo  # noqa: E402

from treecite import SearchConfig, run_search  # noqa: E402

MODES = [
    ("full", {}),
    ("no-search", {"disable_search": True}),
    ("no-reflection", {"disable_reflection": True}),
    ("no-rg", {"disable_rg": True}),
    ("no-ra", {"disable_ra": True}),
]


def main() -> int:
    base = SearchConfig(max_iterations=20)
    rows = []
    for name, overrides in MODES:
        question, index, backends = build_demo()
        cfg = replace(base, **overrides)
        answer, tree, stats = run_search(question, index, backends, cfg)
        calls = stats.call_counts
        rows.append(
            {
                "mode": name,
                "nodes": stats.nodes_created,
                "evals": stats.evaluations,
                "reflections": stats.reflections_used,
                "reflector": calls.get("reflector", 0),
                "scorer": calls.get("scorer_policy", 0) + calls.get("scorer_reference", 0),
                "judge": calls.get("judge", 0),
                "sentences": len(answer.sentences),
            }
        )

    headers = ["mode", "nodes", "evals", "reflections", "reflector", "scorer", "judge", "sentences"]
    widths = {h: max(len(h), *(len(str(r[h])) for r in rows)) for h in headers}
    print("  ".join(h.ljust(widths[h]) for h in headers))
    print("  ".join("-" * widths[h] for h in headers))
    for row in rows:
        print("  ".join(str(row[h]).ljust(widths[h]) for h in headers))
    return 0


if __name__ == "__main__":
    sys.exit(main())
