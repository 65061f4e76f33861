"""Tree search over retrieve-then-cite generation steps.

Each tree node holds one completed generation turn (query, retrieved
documents, cited sentence); the root holds only the question. An iteration
runs four phases: UCT selection of an expandable node, expansion through the
think / retrieve / reflect / verbalize loop, reward evaluation of each new
child over its full root path, and backpropagation of visit counts and
running-mean values. The final answer is the concatenation of sentences along
the best root-to-leaf path, with citations remapped from prompt-local
document numbers to corpus passage ids.

One tree is mutated by a single worker; separate questions can run as
independent searches in parallel.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import BackendSet, GenerationParams
from .corpus import Passage, Retriever
from .errors import (
    BackendUnavailable,
    CitationError,
    ConfigError,
    EvaluationError,
    ProtocolError,
    ScriptedBackendError,
    SearchExhausted,
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
    format_document_line,
    load_template,
    parse_action,
    render_prompt,
    validate_citations,
)
from .rewards import (
    CitedSentence,
    EntailmentVerdict,
    RewardBreakdown,
    SentenceScore,
    attribution_progress_reward,
    generation_progress_reward,
)

logger = logging.getLogger(__name__)

BASE_TEMPERATURE = 0.7
RETRY_TEMPERATURE_JITTER = 0.3
MAX_ACTION_TOKENS = 256

_node_ids = itertools.count()
_MARKER = re.compile(r"\s?\[(\d+)\]")


@dataclass
class SearchConfig:
    """Engine limits and ablation switches."""

    uct_weight: float = 0.2
    max_children: int = 3
    max_depth: int = 6
    max_iterations: int = 30
    max_reflections: int = 10
    retrieval_k: int = 3
    disable_reflection: bool = False
    disable_rg: bool = False
    disable_ra: bool = False
    disable_search: bool = False
    rg_clip: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("max_children", "max_depth", "max_iterations", "max_reflections", "retrieval_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.uct_weight < 0:
            raise ConfigError(f"uct_weight must be >= 0, got {self.uct_weight}")


@dataclass
class NodeState:
    """What a node contributed to the transcript: its turn, or nothing at the
    root / at an explicit stop."""

    turn: Optional[Turn] = None
    is_end: bool = False

    @property
    def query(self) -> str:
        return self.turn.query if self.turn else ""

    @property
    def retrieved(self) -> list[Passage]:
        return self.turn.retrieved if self.turn else []

    @property
    def sentence(self) -> str:
        return self.turn.sentence if self.turn else ""

    @property
    def citations(self) -> list[int]:
        return list(self.turn.citations) if self.turn else []

    @property
    def reflections_used(self) -> int:
        return self.turn.reflections_used if self.turn else 0

    def signature(self) -> tuple:
        return (self.turn.signature() if self.turn else None, self.is_end)


class TreeNode:
    """Search tree node: visit count N and value V, the running mean of every
    reward backpropagated through it."""

    def __init__(
        self,
        state: NodeState,
        parent: Optional["TreeNode"] = None,
        terminal: bool = False,
        truncated: bool = False,
    ):
        self.state = state
        self.parent = parent
        self.children: list[TreeNode] = []
        self.visit_count = 0
        self.value = 0.0
        self.terminal = terminal
        self.truncated = truncated
        self.expansion_done = False
        self.reward: Optional[RewardBreakdown] = None
        self.created_index = next(_node_ids)
        self.depth = 0 if parent is None else parent.depth + 1

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"TreeNode(depth={self.depth}, N={self.visit_count}, V={self.value:.4f}, "
            f"terminal={self.terminal}, children={len(self.children)})"
        )


def uct_score(node: TreeNode, parent: TreeNode, w: float) -> float:
    """V(s) + w * sqrt(ln N(parent) / N(s)); unvisited nodes score +inf so
    they are always tried first."""
    if node.visit_count == 0:
        return math.inf
    return node.value + w * math.sqrt(math.log(parent.visit_count) / node.visit_count)


def _expandable(node: TreeNode, cfg: SearchConfig) -> bool:
    return (
        not node.terminal
        and not node.expansion_done
        and node.depth < cfg.max_depth
        and len(node.children) < cfg.max_children
    )


def _live(node: TreeNode, cfg: SearchConfig) -> bool:
    if _expandable(node, cfg):
        return True
    return any(_live(child, cfg) for child in node.children)


def select(root: TreeNode, cfg: SearchConfig) -> TreeNode:
    """Descend by maximal UCT (ties to the earliest-created child), returning
    the first node that can still take a new child."""
    if not _live(root, cfg):
        raise SearchExhausted("every reachable node is terminal or fully expanded")
    node = root
    while not _expandable(node, cfg):
        candidates = [c for c in node.children if _live(c, cfg)]
        node = max(candidates, key=lambda c: (uct_score(c, node, cfg.uct_weight), -c.created_index))
    return node


def backpropagate(node: TreeNode, reward: float) -> None:
    """Update N and the running-mean V on the node and every ancestor."""
    current: Optional[TreeNode] = node
    while current is not None:
        current.value = (current.value * current.visit_count + reward) / (current.visit_count + 1)
        current.visit_count += 1
        current = current.parent


def extract_best_path(root: TreeNode) -> list[TreeNode]:
    """Root-to-leaf path of the best candidate leaf: terminal leaves are
    preferred; ranked by V, then N, then earliest creation."""
    leaves: list[TreeNode] = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n.children:
            stack.extend(n.children)
        else:
            leaves.append(n)
    terminal = [leaf for leaf in leaves if leaf.terminal]
    candidates = terminal or leaves
    best = max(candidates, key=lambda n: (n.value, n.visit_count, -n.created_index))
    path = []
    node: Optional[TreeNode] = best
    while node is not None:
        path.append(node)
        node = node.parent
    return list(reversed(path))


def path_turns(node: TreeNode) -> list[Turn]:
    turns = []
    current: Optional[TreeNode] = node
    while current is not None:
        if current.state.turn is not None:
            turns.append(current.state.turn)
        current = current.parent
    return list(reversed(turns))


def accumulated_doc_map(turns: Sequence[Turn]) -> dict[int, Passage]:
    mapping: dict[int, Passage] = {}
    for turn in turns:
        mapping.update(turn.doc_map())
    return mapping


def cited_sentences(turns: Sequence[Turn]) -> list[CitedSentence]:
    """Citation-stripped sentences paired with their cited passages, resolved
    against every document retrieved so far on the path."""
    doc_map: dict[int, Passage] = {}
    out: list[CitedSentence] = []
    for turn in turns:
        doc_map.update(turn.doc_map())
        if not turn.sentence:
            continue
        clean, _ = extract_citations(turn.sentence)
        passages = [doc_map[c] for c in turn.citations if c in doc_map]
        out.append((clean, passages))
    return out


class RewardEngine:
    """Progress rewards for partial responses, with per-question memoization
    of sentence scores and entailment verdicts."""

    def __init__(
        self,
        backends: BackendSet,
        cfg: SearchConfig,
        question: str,
        premise_budget: Optional[int] = None,
    ):
        self.backends = backends
        self.cfg = cfg
        self.question = question
        self.premise_budget = premise_budget
        self._score_cache: dict[tuple[str, str], tuple[float, float, int]] = {}
        self._verdict_cache: dict[tuple[str, str], EntailmentVerdict] = {}

    def scoring_context(self, previous: Sequence[str]) -> str:
        if previous:
            return f"{self.question}\n{' '.join(previous)}"
        return self.question

    def sentence_scores(self, sentences: Sequence[str]) -> list[SentenceScore]:
        scores: list[SentenceScore] = []
        prefix_tokens = 0
        previous: list[str] = []
        for sentence in sentences:
            context = self.scoring_context(previous)
            key = (context, sentence)
            if key not in self._score_cache:
                policy_lp, token_count = self.backends.score("scorer_policy", context, sentence)
                reference_lp, _ = self.backends.score("scorer_reference", context, sentence)
                self._score_cache[key] = (policy_lp, reference_lp, token_count)
            policy_lp, reference_lp, token_count = self._score_cache[key]
            score = SentenceScore(policy_lp, reference_lp, prefix_tokens)
            logger.debug("sentence score %r: %s (tokens=%d)", sentence[:50], score, token_count)
            scores.append(score)
            prefix_tokens += token_count
            previous.append(sentence)
        return scores

    def _cached_entails(self, premise: str, hypothesis: str) -> bool:
        key = (premise, hypothesis)
        if key not in self._verdict_cache:
            verdict = EntailmentVerdict(
                premise=premise,
                hypothesis=hypothesis,
                entailed=self.backends.entails(premise, hypothesis),
            )
            logger.debug("entailment verdict: %s", verdict)
            self._verdict_cache[key] = verdict
        return self._verdict_cache[key].entailed

    def verdicts(self) -> list[EntailmentVerdict]:
        return list(self._verdict_cache.values())

    def generation(self, sentences: Sequence[str]) -> float:
        if self.cfg.disable_rg or not sentences:
            return 0.0
        r_g = generation_progress_reward(self.sentence_scores(sentences))
        if self.cfg.rg_clip is not None:
            r_g = max(-self.cfg.rg_clip, min(self.cfg.rg_clip, r_g))
        return r_g

    def attribution(self, cited: Sequence[CitedSentence]) -> float:
        if self.cfg.disable_ra or not cited:
            return 0.0
        return attribution_progress_reward(cited, self._cached_entails, self.premise_budget)


def evaluate(node: TreeNode, engine: RewardEngine) -> RewardBreakdown:
    """Reward the partial response along the node's root path and store the
    breakdown on the node."""
    turns = path_turns(node)
    cited = cited_sentences(turns)
    sentences = [s for s, _ in cited]
    try:
        r_g = engine.generation(sentences)
        r_a = engine.attribution(cited)
    except EvaluationError:
        raise
    except (BackendUnavailable, ScriptedBackendError) as exc:
        raise EvaluationError(f"reward backend failed: {exc}") from exc
    breakdown = RewardBreakdown(r_g=r_g, r_a=r_a)
    node.reward = breakdown
    return breakdown


@dataclass
class AnswerSentence:
    text: str
    rendered: str
    passages: list[Passage]

    @property
    def passage_ids(self) -> list[int]:
        return [p.id for p in self.passages]


@dataclass
class AttributedAnswer:
    """The final answer: sentence texts with bracketed passage-id citations,
    plus a citation key and the per-sentence cited passages for metric reuse."""

    text: str
    sentences: list[AnswerSentence]
    citation_key: dict[int, str]
    partial: bool

    @property
    def cited(self) -> list[CitedSentence]:
        return [(s.text, s.passages) for s in self.sentences]


@dataclass
class SearchStats:
    iterations: int = 0
    nodes_created: int = 0
    evaluations: int = 0
    failed_expansions: int = 0
    failed_evaluations: int = 0
    reflections_used: int = 0
    terminal_found: bool = False
    partial: bool = False
    call_counts: dict[str, int] = field(default_factory=dict)


def remap_citation_markers(sentence: str, allowed: set[int], doc_map: dict[int, Passage]) -> str:
    """Rewrite document-number markers to passage-id markers, dropping any
    marker that did not survive citation validation."""

    def repl(m: re.Match) -> str:
        n = int(m.group(1))
        if n in allowed and n in doc_map:
            space = " " if m.group(0)[0].isspace() else ""
            return f"{space}[{doc_map[n].id}]"
        return ""

    out = _MARKER.sub(repl, sentence)
    return re.sub(r"\s+", " ", out).strip()


class TreeSearch:
    """One search over one question. Not safe for concurrent mutation."""

    def __init__(
        self,
        question: str,
        retriever: Retriever,
        backends: BackendSet,
        cfg: SearchConfig,
        template: PromptTemplate,
        seed: Optional[int] = None,
        premise_budget: Optional[int] = None,
    ):
        self.question = question
        self.retriever = retriever
        self.backends = backends
        self.cfg = cfg
        self.template = template
        self.seed = seed
        self.engine = RewardEngine(backends, cfg, question, premise_budget)
        self.stats = SearchStats()
        self.root = TreeNode(NodeState())

    def _params(self, temperature: float) -> GenerationParams:
        return GenerationParams(
            temperature=temperature,
            max_tokens=MAX_ACTION_TOKENS,
            stop_sequences=("\n",),
            seed=self.seed,
        )

    def _action(
        self,
        role: str,
        prompt: str,
        accept: tuple[type, ...],
        temperature: float = BASE_TEMPERATURE,
    ) -> Optional[Action]:
        """One model action, re-prompting once with a temperature bump on a
        malformed or out-of-place response."""
        for temp in (temperature, temperature + RETRY_TEMPERATURE_JITTER):
            raw = self.backends.generate(role, prompt, self._params(temp))
            try:
                action = parse_action(raw)
            except ProtocolError as exc:
                logger.warning("malformed %s response (%s), re-prompting", role, exc)
                continue
            if isinstance(action, accept):
                return action
            logger.warning(
                "%s emitted %s where one of %s was expected",
                role, type(action).__name__, [t.__name__ for t in accept],
            )
        return None

    def _judgment_prompt(self, turn: Turn) -> str:
        lines = [f"Question: {self.question}", f"Search query: {turn.query}"]
        if turn.attempts and turn.attempts[-1].docs:
            lines.extend(format_document_line(n, p) for n, p in turn.attempts[-1].docs)
        else:
            lines.append("No documents were retrieved.")
        lines.append(
            "Based on the documents above, is the retrieved evidence supportive "
            'enough to continue answering the question? Answer "supportive" or "insufficient".'
        )
        return "\n".join(lines)

    def _evidence_supportive(self, turn: Turn) -> bool:
        raw = self.backends.generate("reflector", self._judgment_prompt(turn), self._params(0.0))
        text = raw.strip().lower()
        if text.startswith("supportive"):
            return True
        return "supportive" in text and "insufficient" not in text

    def _attempt_search(self, turn: Turn, query: str, next_number: int) -> int:
        hits = self.retriever.retrieve(query, k=self.cfg.retrieval_k)
        docs = []
        for hit in hits:
            docs.append((next_number, self.retriever.passage(hit.passage_id)))
            next_number += 1
        turn.attempts.append(SearchAttempt(query=query, docs=docs))
        return next_number

    def _make_child(self, node: TreeNode) -> Optional[TreeNode]:
        try:
            return self._build_child(node)
        except (BackendUnavailable, ScriptedBackendError) as exc:
            logger.warning("child expansion failed: %s", exc)
            return None

    def _build_child(self, node: TreeNode) -> Optional[TreeNode]:
        history = path_turns(node)
        next_number = sum(len(a.docs) for t in history for a in t.attempts) + 1

        think = self._action("policy", render_prompt(self.template, self.question, history), (Search, End))
        if think is None:
            return None
        if isinstance(think, End):
            return self._attach(node, Turn(), is_end=True)

        turn = Turn()
        next_number = self._attempt_search(turn, think.query, next_number)

        if not self.cfg.disable_reflection:
            while turn.reflections_used < self.cfg.max_reflections:
                if self._evidence_supportive(turn):
                    break
                prompt = render_prompt(self.template, self.question, [*history, turn])
                reflection = self._action("reflector", prompt, (Reflexion,))
                if reflection is None:
                    break
                turn.reflections.append(reflection.thought)
                prompt = render_prompt(self.template, self.question, [*history, turn])
                reformulated = self._action("policy", prompt, (Search,))
                if reformulated is None:
                    turn.reflections.pop()
                    break
                next_number = self._attempt_search(turn, reformulated.query, next_number)

        visible = set(accumulated_doc_map([*history, turn]).keys())
        prompt = render_prompt(self.template, self.question, [*history, turn])
        for temp in (BASE_TEMPERATURE, BASE_TEMPERATURE + RETRY_TEMPERATURE_JITTER):
            raw = self.backends.generate("policy", prompt, self._params(temp))
            try:
                action = parse_action(raw)
            except ProtocolError as exc:
                logger.warning("malformed verbalization (%s), re-prompting", exc)
                continue
            if isinstance(action, End):
                return self._attach(node, turn, is_end=True)
            if not isinstance(action, Output):
                logger.warning("expected Output or End at verbalization, got %s", type(action).__name__)
                continue
            if not action.citations:
                logger.warning("uncited output rejected: %r", action.sentence)
                continue
            try:
                action = validate_citations(action, visible)
            except CitationError as exc:
                logger.warning("verbalization failed citation validation (%s), re-prompting", exc)
                continue
            turn.sentence = action.sentence
            turn.citations = list(action.citations)
            return self._attach(node, turn)
        return None

    def _attach(self, node: TreeNode, turn: Turn, is_end: bool = False) -> Optional[TreeNode]:
        state = NodeState(turn=turn if (turn.attempts or turn.sentence) else None, is_end=is_end)
        signature = state.signature()
        if any(child.state.signature() == signature for child in node.children):
            logger.debug("dropping duplicate child state at depth %d", node.depth + 1)
            return None
        depth = node.depth + 1
        terminal = is_end or depth >= self.cfg.max_depth
        truncated = terminal and not is_end
        child = TreeNode(state, parent=node, terminal=terminal, truncated=truncated)
        node.children.append(child)
        self.stats.nodes_created += 1
        return child

    def expand(self, node: TreeNode, limit: Optional[int] = None) -> list[TreeNode]:
        """Create up to max_children new children. A round that creates none
        marks a childless node terminal and a filled node done expanding."""
        requested = self.cfg.max_children - len(node.children)
        if limit is not None:
            requested = min(requested, limit)
        created: list[TreeNode] = []
        for _ in range(requested):
            child = self._make_child(node)
            if child is None:
                self.stats.failed_expansions += 1
                continue
            created.append(child)
            self.stats.reflections_used += child.state.reflections_used
        if not created:
            if node.children:
                node.expansion_done = True
            else:
                node.terminal = True
        return created

    def run(self) -> tuple[AttributedAnswer, TreeNode, SearchStats]:
        ledger_start = len(self.backends.ledger)
        if self.cfg.disable_search:
            self._run_greedy()
        else:
            self._run_mcts()
        answer = self._final_answer()
        counts: dict[str, int] = {}
        for record in self.backends.ledger.records()[ledger_start:]:
            counts[record.role] = counts.get(record.role, 0) + 1
        self.stats.call_counts = counts
        return answer, self.root, self.stats

    def _run_mcts(self) -> None:
        for _ in range(self.cfg.max_iterations):
            try:
                node = select(self.root, self.cfg)
            except SearchExhausted:
                logger.info("search tree saturated after %d iterations", self.stats.iterations)
                break
            self.stats.iterations += 1
            for child in self.expand(node):
                try:
                    breakdown = evaluate(child, self.engine)
                except EvaluationError as exc:
                    self.stats.failed_evaluations += 1
                    logger.warning("evaluation aborted for one child: %s", exc)
                    continue
                self.stats.evaluations += 1
                backpropagate(child, breakdown.total)

    def _run_greedy(self) -> None:
        """Single-chain generation: one child per step, no selection and no
        reward evaluation."""
        node = self.root
        while not node.terminal and node.depth < self.cfg.max_depth:
            self.stats.iterations += 1
            children = self.expand(node, limit=1)
            if not children:
                break
            node = children[0]

    def _final_answer(self) -> AttributedAnswer:
        path = extract_best_path(self.root)
        leaf = path[-1]
        doc_map: dict[int, Passage] = {}
        sentences: list[AnswerSentence] = []
        citation_key: dict[int, str] = {}
        for node in path:
            turn = node.state.turn
            if turn is None:
                continue
            doc_map.update(turn.doc_map())
            if not turn.sentence:
                continue
            clean, _ = extract_citations(turn.sentence)
            passages = [doc_map[c] for c in turn.citations if c in doc_map]
            rendered = remap_citation_markers(turn.sentence, set(turn.citations), doc_map)
            for p in passages:
                citation_key[p.id] = p.title
            sentences.append(AnswerSentence(text=clean, rendered=rendered, passages=passages))
        ended = leaf.state.is_end
        self.stats.terminal_found = ended
        self.stats.partial = not ended
        return AttributedAnswer(
            text=" ".join(s.rendered for s in sentences),
            sentences=sentences,
            citation_key=citation_key,
            partial=not ended,
        )


def run_search(
    question: str,
    retriever: Retriever,
    backends: BackendSet,
    cfg: SearchConfig,
    template: Optional[PromptTemplate] = None,
    seed: Optional[int] = None,
    premise_budget: Optional[int] = None,
) -> tuple[AttributedAnswer, TreeNode, SearchStats]:
    """Run one full search and return (answer, tree root, stats)."""
    template = template or load_template("asqa")
    search = TreeSearch(
        question, retriever, backends, cfg, template,
        seed=seed, premise_budget=premise_budget,
    )
    return search.run()


def tree_to_dict(node: TreeNode) -> dict:
    """JSON-serializable dump of a (sub)tree."""
    reward = None
    if node.reward is not None:
        reward = {"r_g": node.reward.r_g, "r_a": node.reward.r_a, "total": node.reward.total}
    return {
        "state": {
            "query": node.state.query,
            "sentence": node.state.sentence,
            "citations": node.state.citations,
            "retrieved": [p.id for p in node.state.retrieved],
            "reflections_used": node.state.reflections_used,
            "is_end": node.state.is_end,
        },
        "N": node.visit_count,
        "V": node.value,
        "terminal": node.terminal,
        "truncated": node.truncated,
        "reward": reward,
        "children": [tree_to_dict(child) for child in node.children],
    }


def tree_to_dot(tree: dict) -> str:
    """Graphviz DOT rendering of a dumped tree (as produced by tree_to_dict)."""
    lines = ["digraph search_tree {", "  node [shape=box, fontsize=10];"]
    counter = itertools.count()

    def walk(node: dict) -> int:
        node_id = next(counter)
        label = f"N={node['N']} V={node['V']:.3f}"
        sentence = node["state"]["sentence"]
        if sentence:
            snippet = sentence[:48].replace("\\", "\\\\").replace('"', "'")
            label += f"\\n{snippet}"
        if node["state"]["is_end"]:
            label += "\\nEnd"
        style = ', style=filled, fillcolor="lightgrey"' if node["terminal"] else ""
        lines.append(f'  n{node_id} [label="{label}"{style}];')
        for child in node["children"]:
            child_id = walk(child)
            lines.append(f"  n{node_id} -> n{child_id};")
        return node_id

    walk(tree)
    lines.append("}")
    return "\n".join(lines)
