"""Benchmark harness: load datasets, search per question, score, report.

Dataset files are JSON arrays of {"question", "docs": [...], gold...} where
gold is dataset-specific: ASQA carries "qa_pairs" with short-answer alias
sets, QAMPARI carries "answers" as entity alias lists, ELI5 carries "claims".
Each question's docs array is its private retrieval pool: the harness builds
a per-question index over it rather than searching a full corpus.

Correctness metrics are computed on the citation-stripped answer; citation
recall/precision reuse the reward-side operations on the answer's own turns,
so the report values match the reward seen at the answer's terminal node.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendSet
from .corpus import BM25Index, Corpus, Passage, passages_from_docs
from .errors import ConfigError, EvaluationError
from .mcts import SearchConfig, run_search, tree_to_dict
from .protocol import PromptTemplate
from .rewards import EntailsFn, citation_precision, citation_recall

logger = logging.getLogger(__name__)

_MARKER = re.compile(r"\s?\[\d+\]")


def normalize_answer(text: str) -> str:
    """Lowercase, map punctuation (any unicode P* category) to spaces,
    collapse whitespace."""
    mapped = "".join(
        " " if unicodedata.category(c).startswith("P") else c for c in text.lower()
    )
    return re.sub(r"\s+", " ", mapped).strip()


def strip_citation_markers(text: str) -> str:
    return re.sub(r"\s+", " ", _MARKER.sub("", text)).strip()


@dataclass
class BenchmarkItem:
    question: str
    candidate_passages: list[Passage]
    gold: list
    dataset_tag: str

    def __post_init__(self) -> None:
        if not self.candidate_passages:
            raise ConfigError(f"question {self.question!r} has no candidate passages")
        if not self.gold:
            raise ConfigError(f"question {self.question!r} has no gold annotations")


def _gold_for(tag: str, obj: dict) -> list:
    if tag == "asqa":
        pairs = obj.get("qa_pairs") or []
        return [list(p.get("short_answers", [])) for p in pairs]
    if tag == "qampari":
        return [list(aliases) for aliases in obj.get("answers", [])]
    if tag == "eli5":
        return list(obj.get("claims", []))
    raise ConfigError(f"unknown dataset tag {tag!r}")


def load_dataset(path: str | Path, dataset_tag: str) -> list[BenchmarkItem]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid dataset JSON: {exc}") from exc
    if not isinstance(payload, list) or not payload:
        raise ConfigError(f"{path}: dataset must be a non-empty JSON array")
    items = []
    for i, obj in enumerate(payload):
        try:
            items.append(
                BenchmarkItem(
                    question=str(obj["question"]),
                    candidate_passages=passages_from_docs(obj["docs"]),
                    gold=_gold_for(dataset_tag, obj),
                    dataset_tag=dataset_tag,
                )
            )
        except (KeyError, ConfigError) as exc:
            raise ConfigError(f"{path}: item {i} is malformed: {exc}") from exc
    return items


def em_recall(answer: str, gold: Sequence[Sequence[str]]) -> float:
    """Fraction of gold answer sets with at least one alias appearing as a
    substring of the normalized answer."""
    if not gold:
        return 0.0
    normalized = normalize_answer(answer)
    hit = 0
    for aliases in gold:
        for alias in aliases:
            alias_norm = normalize_answer(alias)
            if alias_norm and alias_norm in normalized:
                hit += 1
                break
    return hit / len(gold)


def _split_entities(answer: str) -> list[str]:
    text = strip_citation_markers(answer).rstrip(".")
    entities = [e.strip() for e in text.split(",") if e.strip()]
    if len(entities) <= 1:
        sentences = [s.strip() for s in re.split(r"[.?!]+", text) if s.strip()]
        if len(sentences) > 1:
            logger.warning("list answer had no commas; falling back to sentence splitting")
            entities = sentences
    return entities


def qampari_scores(answer: str, gold: Sequence[Sequence[str]]) -> tuple[float, float]:
    """(recall-5, precision) for list answers.

    Entities are comma-split after citation stripping and matched to gold
    aliases by normalized exact match. Recall-5 is min(distinct gold sets
    matched, 5) / 5.
    """
    entities = _split_entities(answer)
    if not entities:
        return 0.0, 0.0
    alias_tables = [{normalize_answer(a) for a in aliases} for aliases in gold]
    matched_sets: set[int] = set()
    correct = 0
    for entity in entities:
        norm = normalize_answer(entity)
        for set_idx, aliases in enumerate(alias_tables):
            if norm in aliases:
                correct += 1
                matched_sets.add(set_idx)
                break
    recall5 = min(len(matched_sets), 5) / 5
    precision = correct / len(entities)
    return recall5, precision


def claim_recall(answer: str, claims: Sequence[str], judge: EntailsFn) -> float:
    """Fraction of gold claims entailed by the whole answer."""
    if not claims:
        return 0.0
    if not answer.strip():
        return 0.0
    entailed = 0
    for claim in claims:
        try:
            verdict = judge.entails(answer, claim) if hasattr(judge, "entails") else judge(answer, claim)
        except EvaluationError:
            raise
        except Exception as exc:
            raise EvaluationError(f"claim entailment failed: {exc}") from exc
        if verdict:
            entailed += 1
    return entailed / len(claims)


@dataclass
class ItemReport:
    question: str
    answer: str
    citations: list[int] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    tree_stats: dict = field(default_factory=dict)
    partial: bool = False
    failed: bool = False
    error: str = ""


@dataclass
class RunReport:
    dataset_tag: str
    items: list[ItemReport]
    aggregate: dict[str, float]
    failed_items: int
    config: dict
    ledger_summary: dict[str, int]
    notes: dict[str, str]
    created_at: str

    def to_json(self, include_timestamp: bool = True) -> str:
        payload = {
            "dataset_tag": self.dataset_tag,
            "notes": self.notes,
            "config": self.config,
            "aggregate": self.aggregate,
            "failed_items": self.failed_items,
            "ledger_summary": self.ledger_summary,
            "items": [
                {
                    "question": i.question,
                    "answer": i.answer,
                    "citations": i.citations,
                    "metrics": i.metrics,
                    "tree_stats": i.tree_stats,
                    "partial": i.partial,
                    "failed": i.failed,
                    "error": i.error,
                }
                for i in self.items
            ],
        }
        if include_timestamp:
            payload["created_at"] = self.created_at
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)

    def to_csv(self) -> str:
        metric_names = sorted({name for i in self.items for name in i.metrics})
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["index", "question", "failed", *metric_names])
        for idx, item in enumerate(self.items):
            writer.writerow(
                [idx, item.question, int(item.failed)]
                + [item.metrics.get(name, "") for name in metric_names]
            )
        return buffer.getvalue()


def _config_snapshot(cfg: SearchConfig, dataset_tag: str, workers: int, seed: Optional[int]) -> dict:
    snapshot = {
        "search": {
            "uct_weight": cfg.uct_weight,
            "max_children": cfg.max_children,
            "max_depth": cfg.max_depth,
            "max_iterations": cfg.max_iterations,
            "max_reflections": cfg.max_reflections,
            "retrieval_k": cfg.retrieval_k,
            "disable_reflection": cfg.disable_reflection,
            "disable_rg": cfg.disable_rg,
            "disable_ra": cfg.disable_ra,
            "disable_search": cfg.disable_search,
            "rg_clip": cfg.rg_clip,
        },
        "dataset_tag": dataset_tag,
        "workers": workers,
        "seed": seed,
    }
    return snapshot


def evaluate_item(
    item: BenchmarkItem,
    cfg: SearchConfig,
    backends: BackendSet,
    template: PromptTemplate,
    seed: Optional[int] = None,
    premise_budget: Optional[int] = None,
    keep_tree: bool = False,
) -> ItemReport:
    scoped = backends.fork_ledger()
    index = BM25Index(Corpus(item.candidate_passages, source_label="question-pool"))
    answer, tree, stats = run_search(
        item.question, index, scoped, cfg,
        template=template, seed=seed, premise_budget=premise_budget,
    )
    clean_answer = strip_citation_markers(answer.text)
    metrics: dict[str, float] = {}
    if item.dataset_tag == "asqa":
        metrics["em_recall"] = em_recall(clean_answer, item.gold)
    elif item.dataset_tag == "qampari":
        recall5, precision = qampari_scores(answer.text, item.gold)
        metrics["recall5"] = recall5
        metrics["precision"] = precision
    else:
        metrics["claim_recall"] = claim_recall(clean_answer, item.gold, scoped.entails)
    metrics["citation_recall"] = citation_recall(answer.cited, scoped.entails, premise_budget)
    metrics["citation_precision"] = citation_precision(answer.cited, scoped.entails, premise_budget)
    report = ItemReport(
        question=item.question,
        answer=answer.text,
        citations=sorted(answer.citation_key),
        metrics=metrics,
        tree_stats={
            "iterations": stats.iterations,
            "nodes_created": stats.nodes_created,
            "evaluations": stats.evaluations,
            "reflections_used": stats.reflections_used,
            "call_counts": stats.call_counts,
            "call_counts_with_metrics": scoped.ledger.counts_by_role(),
        },
        partial=answer.partial,
    )
    if keep_tree:
        report.tree_stats["tree"] = tree_to_dict(tree)
    return report


def run_benchmark(
    dataset: Sequence[BenchmarkItem],
    cfg: SearchConfig,
    backends: BackendSet,
    template: PromptTemplate,
    limit: Optional[int] = None,
    workers: int = 1,
    seed: Optional[int] = None,
    premise_budget: Optional[int] = None,
) -> RunReport:
    """Search and score every item; item failures are recorded and skipped in
    the aggregates, which are exact means over the non-failed items."""
    if not dataset:
        raise ConfigError("dataset has no items")
    items = list(dataset[:limit]) if limit is not None else list(dataset)
    dataset_tag = items[0].dataset_tag

    def one(item: BenchmarkItem) -> ItemReport:
        try:
            return evaluate_item(
                item, cfg, backends, template,
                seed=seed, premise_budget=premise_budget,
            )
        except Exception as exc:
            logger.warning("item failed: %r (%s)", item.question, exc)
            return ItemReport(question=item.question, answer="", failed=True, error=str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, items))
    else:
        reports = [one(item) for item in items]

    metric_names = sorted({name for r in reports if not r.failed for name in r.metrics})
    aggregate = {}
    ok = [r for r in reports if not r.failed]
    for name in metric_names:
        values = [r.metrics[name] for r in ok if name in r.metrics]
        aggregate[name] = sum(values) / len(values) if values else 0.0
    ledger_summary: dict[str, int] = {}
    for r in reports:
        for role, n in r.tree_stats.get("call_counts_with_metrics", {}).items():
            ledger_summary[role] = ledger_summary.get(role, 0) + n
    return RunReport(
        dataset_tag=dataset_tag,
        items=reports,
        aggregate=aggregate,
        failed_items=len(reports) - len(ok),
        config=_config_snapshot(cfg, dataset_tag, workers, seed),
        ledger_summary=ledger_summary,
        notes={"qampari_matching": "normalized-exact"},
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
