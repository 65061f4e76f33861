"""The think-verbalize-cite action grammar and prompt rendering.

The agent speaks a four-operation line protocol:

    Search: <key words>
    Reflexion: <thoughts>
    Output: <sentence(s) with bracketed citations like [1][2]>
    End

Citations are 1-based document numbers, assigned globally per question in
retrieval order ("Document [k] (Title: ...) ..."). An Output keeps its text
exactly as emitted (markers included) so transcripts round-trip; the stripped
form used for scoring comes from extract_citations. The "Reflexion" spelling
is part of the wire grammar and is kept verbatim.

All functions here are pure over immutable inputs.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .corpus import Passage
from .errors import CitationError, ConfigError, ProtocolError

logger = logging.getLogger(__name__)

MAX_CITATIONS_PER_SENTENCE = 3

TEMPLATE_DIR = Path(__file__).parent / "templates"
DATASET_TAGS = ("asqa", "qampari", "eli5")

_CITATION = re.compile(r"\[(\d+)\]")
_CITATION_WITH_SPACE = re.compile(r"\s*\[(\d+)\]")
_KEYWORD = re.compile(r"^(search|reflexion|output)\s*:\s*(.*)$", re.IGNORECASE | re.DOTALL)
_END = re.compile(r"^end\s*[.!]?\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class Search:
    query: str


@dataclass(frozen=True)
class Reflexion:
    thought: str


@dataclass(frozen=True)
class Output:
    sentence: str
    citations: tuple[int, ...]


@dataclass(frozen=True)
class End:
    pass


Action = Union[Search, Reflexion, Output, End]


def extract_citations(sentence: str) -> tuple[str, list[int]]:
    """Collect bracketed citation numbers in order of appearance, deduplicated
    keeping the first occurrence and capped at three; return the sentence with
    markers removed and whitespace normalized alongside them.
    """
    if not sentence:
        raise ProtocolError("cannot extract citations from empty text", raw=sentence)
    seen: list[int] = []
    for m in _CITATION.finditer(sentence):
        n = int(m.group(1))
        if n not in seen:
            seen.append(n)
    if len(seen) > MAX_CITATIONS_PER_SENTENCE:
        logger.warning(
            "sentence cites %d documents, keeping the first %d: %r",
            len(seen), MAX_CITATIONS_PER_SENTENCE, sentence,
        )
        seen = seen[:MAX_CITATIONS_PER_SENTENCE]
    clean = _CITATION_WITH_SPACE.sub("", sentence)
    clean = re.sub(r"\s+", " ", clean).strip()
    return clean, seen


def parse_action(raw: str) -> Action:
    """Parse one model response into an Action.

    Only the first non-empty line is considered. Never raises anything but
    ProtocolError, whatever the input text.
    """
    if not raw or not raw.strip():
        raise ProtocolError("empty model response", raw=raw or "")
    line = next(l for l in re.split(r"\r?\n", raw) if l.strip()).strip()
    if _END.match(line):
        return End()
    m = _KEYWORD.match(line)
    if not m:
        raise ProtocolError(f"unrecognized action line: {line!r}", raw=raw)
    keyword = m.group(1).lower()
    payload = m.group(2).strip()
    if not payload:
        raise ProtocolError(f"{keyword} action with an empty payload", raw=raw)
    if keyword == "search":
        return Search(payload)
    if keyword == "reflexion":
        return Reflexion(payload)
    _, citations = extract_citations(payload)
    return Output(sentence=payload, citations=tuple(citations))


def format_action(action: Action) -> str:
    """Serialize an action exactly as it appears in a transcript line."""
    if isinstance(action, Search):
        return f"Search: {action.query}"
    if isinstance(action, Reflexion):
        return f"Reflexion: {action.thought}"
    if isinstance(action, Output):
        return f"Output: {action.sentence}"
    return "End"


def validate_citations(action: Output, visible_ids: set[int]) -> Output:
    """Drop citations that do not name a document visible in the prompt.

    Raises CitationError when filtering removed entries and left none: the
    verbalization cited only unknown documents and counts as failed.
    """
    kept = tuple(c for c in action.citations if c in visible_ids)
    if len(kept) < len(action.citations):
        dropped = [c for c in action.citations if c not in visible_ids]
        if not kept:
            raise CitationError(f"all citations {dropped} are outside the visible documents")
        logger.warning("dropping citations to unseen documents %s: %r", dropped, action.sentence)
    return replace(action, citations=kept)


@dataclass
class SearchAttempt:
    """One retrieval within a turn: the query and its documents, tagged with
    the prompt-visible document numbers assigned at retrieval time.
    """

    query: str
    docs: list[tuple[int, Passage]] = field(default_factory=list)

    def doc_numbers(self) -> list[int]:
        return [n for n, _ in self.docs]


@dataclass
class Turn:
    """One completed generation step: attempts (searches) interleaved with
    reflections, ending in a cited sentence. Citations are document numbers
    and may reference documents retrieved in earlier turns.
    """

    attempts: list[SearchAttempt] = field(default_factory=list)
    reflections: list[str] = field(default_factory=list)
    sentence: str = ""
    citations: list[int] = field(default_factory=list)

    @property
    def query(self) -> str:
        return self.attempts[-1].query if self.attempts else ""

    @property
    def retrieved(self) -> list[Passage]:
        return [p for _, p in self.attempts[-1].docs] if self.attempts else []

    @property
    def reflections_used(self) -> int:
        return len(self.reflections)

    def doc_map(self) -> dict[int, Passage]:
        mapping: dict[int, Passage] = {}
        for attempt in self.attempts:
            for n, p in attempt.docs:
                mapping[n] = p
        return mapping

    def signature(self) -> tuple:
        return (
            tuple((a.query, tuple(a.doc_numbers())) for a in self.attempts),
            tuple(self.reflections),
            self.sentence,
            tuple(self.citations),
        )


def format_document_line(number: int, passage: Passage) -> str:
    return f"Document [{number}] (Title: {passage.title}) {passage.body}"


def transcript_lines(turns: Sequence[Turn], ended: bool = False) -> list[str]:
    """Serialize turns into protocol lines: Search / Document / Reflexion /
    Output, with a trailing End when the question is finished.
    """
    lines: list[str] = []
    for turn in turns:
        for i, attempt in enumerate(turn.attempts):
            lines.append(f"Search: {attempt.query}")
            for number, passage in attempt.docs:
                lines.append(format_document_line(number, passage))
            if i < len(turn.reflections):
                lines.append(f"Reflexion: {turn.reflections[i]}")
        if turn.sentence:
            lines.append(f"Output: {turn.sentence}")
    if ended:
        lines.append("End")
    return lines


def render_transcript(question: str, turns: Sequence[Turn], ended: bool = False) -> str:
    """The full per-question transcript, starting from its Question line."""
    return "\n".join([f"Question: {question}", *transcript_lines(turns, ended=ended)])


_DOCUMENT_LINE = re.compile(r"^Document \[(\d+)\] \(Title: (.*?)\) (.*)$")


def parse_transcript(text: str) -> tuple[str, list[Turn], bool]:
    """Invert render_transcript: recover (question, turns, ended) from a
    transcript. Passages are synthesized with their document number as id.
    """
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("Question:"):
        raise ProtocolError("transcript must start with a Question line", raw=text[:100])
    question = lines[0][len("Question:") :].strip()
    turns: list[Turn] = []
    current: Optional[Turn] = None
    ended = False
    for line in lines[1:]:
        doc = _DOCUMENT_LINE.match(line)
        if doc:
            if current is None or not current.attempts:
                raise ProtocolError(f"document line outside a search: {line!r}", raw=line)
            number = int(doc.group(1))
            current.attempts[-1].docs.append(
                (number, Passage.make(number, doc.group(2), doc.group(3)))
            )
            continue
        action = parse_action(line)
        if isinstance(action, Search):
            if current is None or current.sentence:
                if current is not None:
                    turns.append(current)
                current = Turn()
            current.attempts.append(SearchAttempt(query=action.query))
        elif isinstance(action, Reflexion):
            if current is None:
                raise ProtocolError(f"reflexion before any search: {line!r}", raw=line)
            current.reflections.append(action.thought)
        elif isinstance(action, Output):
            if current is None:
                current = Turn()
            current.sentence = action.sentence
            current.citations = list(action.citations)
        else:
            ended = True
            break
    if current is not None:
        turns.append(current)
    return question, turns, ended


@dataclass
class PromptTemplate:
    """A few-shot instruction prompt for one dataset.

    Stored on disk as plain text: the instruction block, demonstration
    transcripts (each starting with a "Question:" line and ending with "End"),
    and a closing block whose final line is "Question: {question}".
    """

    instruction: str
    demonstrations: list[str]
    closing: str
    dataset_tag: str = "asqa"

    def __post_init__(self) -> None:
        if "{question}" not in self.closing:
            raise ConfigError("template closing block must contain the {question} placeholder")
        if not self.demonstrations:
            raise ConfigError("template must ship at least one demonstration")

    def prefix(self, question: str) -> str:
        parts = [self.instruction, *self.demonstrations, self.closing]
        return "\n\n".join(parts).replace("{question}", question)


def parse_template_text(text: str, dataset_tag: str = "asqa") -> PromptTemplate:
    """Split a plain-text template into instruction, demonstrations and the
    closing block. Demonstrations start at "Question:" lines and end at their
    "End" line; the closing block is whatever follows the last End up to and
    including the "Question: {question}" line.
    """
    lines = text.splitlines()
    question_starts = [i for i, l in enumerate(lines) if l.startswith("Question:")]
    if not question_starts:
        raise ConfigError("template has no Question: lines")
    placeholder_start = None
    for i in question_starts:
        if "{question}" in lines[i]:
            placeholder_start = i
    if placeholder_start is None:
        raise ConfigError("template has no 'Question: {question}' placeholder line")
    instruction = "\n".join(lines[: question_starts[0]]).strip()
    demo_starts = [i for i in question_starts if i != placeholder_start]
    demonstrations = []
    last_end = demo_starts[0] if demo_starts else placeholder_start
    for j, start in enumerate(demo_starts):
        stop = demo_starts[j + 1] if j + 1 < len(demo_starts) else placeholder_start
        block = lines[start:stop]
        # a demo runs through its final "End" line; anything after belongs to the closing text
        end_positions = [i for i, l in enumerate(block) if l.strip() == "End"]
        if not end_positions:
            raise ConfigError("template demonstration does not end with an End line")
        cut = end_positions[-1] + 1
        demonstrations.append("\n".join(block[:cut]).strip())
        last_end = start + cut
    closing = "\n".join(lines[last_end:]).strip()
    return PromptTemplate(
        instruction=instruction,
        demonstrations=demonstrations,
        closing=closing,
        dataset_tag=dataset_tag,
    )


def load_template(dataset_tag: str, templates_dir: str | Path | None = None) -> PromptTemplate:
    directory = Path(templates_dir) if templates_dir else TEMPLATE_DIR
    path = directory / f"{dataset_tag}.txt"
    if not path.exists():
        raise ConfigError(f"no prompt template for dataset {dataset_tag!r} at {path}")
    return parse_template_text(path.read_text(encoding="utf-8"), dataset_tag=dataset_tag)


def render_prompt(
    template: PromptTemplate,
    question: str,
    history: Sequence[Turn],
    pending: Optional[str] = None,
) -> str:
    """Deterministic prompt serialization: instruction, demonstrations, the
    question, then the history transcript. `pending` is appended as a final
    partial line for the model to complete.
    """
    parts = [template.prefix(question)]
    parts.extend(transcript_lines(history))
    if pending is not None:
        parts.append(pending)
    return "\n".join(parts)
