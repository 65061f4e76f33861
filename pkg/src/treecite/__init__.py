"""Attributed question answering via tree search.

A policy model answers a question one cited sentence at a time: it thinks up
a retrieval query, searches a passage corpus, reflects on poor evidence and
reformulates, then verbalizes a sentence citing the retrieved documents.
A Monte Carlo tree search explores alternative generation paths, scored by
the sum of a generation reward (aligned-vs-reference log-likelihood ratios)
and an attribution reward (citation recall/precision F1 under an entailment
judge).
"""

__version__ = "0.1.0"

from .backends import (
    BackendSet,
    CallLedger,
    GenerationParams,
    Rule,
    ScriptedBackend,
)
from .corpus import (
    BM25Index,
    Corpus,
    Passage,
    RankedHit,
    build_index,
    chunk_documents,
    load_corpus_jsonl,
)
from .errors import (
    BackendUnavailable,
    CapabilityError,
    CitationError,
    ConfigError,
    EvaluationError,
    ProtocolError,
    ScriptedBackendError,
    SearchExhausted,
    TreeciteError,
)
from .mcts import (
    AttributedAnswer,
    NodeState,
    SearchConfig,
    SearchStats,
    TreeNode,
    backpropagate,
    extract_best_path,
    run_search,
    select,
    tree_to_dict,
    tree_to_dot,
    uct_score,
)
from .protocol import (
    Action,
    End,
    Output,
    PromptTemplate,
    Reflexion,
    Search,
    SearchAttempt,
    Turn,
    extract_citations,
    load_template,
    parse_action,
    parse_transcript,
    render_prompt,
    render_transcript,
    validate_citations,
)
from .rewards import (
    RewardBreakdown,
    SentenceScore,
    attribution_progress_reward,
    citation_precision,
    citation_recall,
    generation_progress_reward,
)

__all__ = [
    "AttributedAnswer",
    "Action",
    "BM25Index",
    "BackendSet",
    "BackendUnavailable",
    "CallLedger",
    "CapabilityError",
    "CitationError",
    "ConfigError",
    "Corpus",
    "End",
    "EvaluationError",
    "GenerationParams",
    "NodeState",
    "Output",
    "Passage",
    "PromptTemplate",
    "ProtocolError",
    "RankedHit",
    "Reflexion",
    "RewardBreakdown",
    "Rule",
    "ScriptedBackend",
    "ScriptedBackendError",
    "Search",
    "SearchAttempt",
    "SearchConfig",
    "SearchExhausted",
    "SearchStats",
    "SentenceScore",
    "TreeNode",
    "TreeciteError",
    "Turn",
    "attribution_progress_reward",
    "backpropagate",
    "build_index",
    "chunk_documents",
    "citation_precision",
    "citation_recall",
    "extract_best_path",
    "extract_citations",
    "generation_progress_reward",
    "load_corpus_jsonl",
    "load_template",
    "parse_action",
    "parse_transcript",
    "render_prompt",
    "render_transcript",
    "run_search",
    "select",
    "tree_to_dict",
    "tree_to_dot",
    "uct_score",
    "validate_citations",
]
