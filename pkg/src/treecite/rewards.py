"""Progress rewards over a partial response.

Two signals are summed: a generation reward, the weighted sum of per-sentence
log-likelihood ratios between an aligned scoring model and its reference
(weight 1/max(1, tokens-in-prefix)); and an attribution reward, the F1 of
citation recall and citation precision as judged by an entailment model.

Citation recall: a sentence scores 1 when the concatenation of its cited
passages entails it, 0 otherwise; uncited sentences score 0; the reward is
the mean over sentences. Citation precision: a citation scores 1 when the
sentence's full citation set entails it AND the set minus that citation does
not (an empty remainder never entails, so a lone supporting citation is
precise); the reward is the mean over all citations, 0 if there are none.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .corpus import Passage
from .errors import EvaluationError

logger = logging.getLogger(__name__)

# (citation-stripped sentence, its cited passages in citation order)
CitedSentence = tuple[str, Sequence[Passage]]


@dataclass(frozen=True)
class SentenceScore:
    """Scoring backends' view of one sentence given its prefix.

    Logprobs are summed token log-probabilities as reported by the backends
    and are recorded as-is; prefix_token_count is the token count of all
    earlier sentences.
    """

    policy_logprob: float
    reference_logprob: float
    prefix_token_count: int


@dataclass(frozen=True)
class RewardBreakdown:
    r_g: float
    r_a: float

    @property
    def total(self) -> float:
        return self.r_g + self.r_a


@dataclass(frozen=True)
class EntailmentVerdict:
    premise: str
    hypothesis: str
    entailed: bool


def generation_progress_reward(scores: Sequence[SentenceScore]) -> float:
    """Sum of per-sentence log-ratio terms weighted by 1/max(1, prefix tokens).

    The first sentence has an empty prefix; its denominator is clamped to 1.
    """
    total = 0.0
    for s in scores:
        weight = 1.0 / max(1, s.prefix_token_count)
        total += weight * (s.policy_logprob - s.reference_logprob)
    return total


def build_premise(passages: Sequence[Passage]) -> str:
    """Concatenate cited passages as the judge's premise, title-prefixed, in
    citation order, joined by blank lines.
    """
    return "\n\n".join(f"Title: {p.title}. {p.body}" for p in passages)


def truncate_premise_segments(
    passages: Sequence[Passage], max_tokens: Optional[int]
) -> list[Passage]:
    """Trim the tail of each passage proportionally when the combined premise
    would exceed the judge's input budget (whitespace tokens).
    """
    if max_tokens is None:
        return list(passages)
    lengths = [len(p.body.split()) for p in passages]
    total = sum(lengths)
    if total <= max_tokens:
        return list(passages)
    logger.warning("premise of %d tokens exceeds judge budget %d; truncating", total, max_tokens)
    trimmed = []
    for p, n in zip(passages, lengths):
        keep = max(1, int(n * max_tokens / total))
        body = " ".join(p.body.split()[:keep])
        trimmed.append(Passage.make(p.id, p.title, body))
    return trimmed


EntailsFn = Callable[[str, str], bool]


def _checked(judge: EntailsFn, premise: str, hypothesis: str) -> bool:
    fn = judge.entails if hasattr(judge, "entails") else judge
    try:
        return fn(premise, hypothesis)
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"entailment judge failed: {exc}") from exc


def citation_recall(
    turns: Sequence[CitedSentence],
    judge: EntailsFn,
    premise_budget: Optional[int] = None,
) -> float:
    """Fraction of sentences entailed by their own concatenated citations."""
    if not turns:
        return 0.0
    supported = 0
    for sentence, passages in turns:
        if not passages:
            continue
        premise = build_premise(truncate_premise_segments(passages, premise_budget))
        if _checked(judge, premise, sentence):
            supported += 1
    return supported / len(turns)


def citation_precision(
    turns: Sequence[CitedSentence],
    judge: EntailsFn,
    premise_budget: Optional[int] = None,
) -> float:
    """Fraction of citations that are individually load-bearing.

    The full-set verdict is computed once per sentence and reused across its
    citations, so at most 1 + |citations| judge calls are issued per sentence.
    """
    scores: list[int] = []
    for sentence, passages in turns:
        if not passages:
            continue
        usable = truncate_premise_segments(passages, premise_budget)
        full_entails = _checked(judge, build_premise(usable), sentence)
        for j in range(len(usable)):
            if not full_entails:
                scores.append(0)
                continue
            rest = usable[:j] + usable[j + 1 :]
            if not rest:
                # empty premise never entails: a lone supporting citation is precise
                scores.append(1)
                continue
            rest_entails = _checked(judge, build_premise(rest), sentence)
            scores.append(0 if rest_entails else 1)
    if not scores:
        return 0.0
    return sum(scores) / len(scores)


def attribution_progress_reward(
    turns: Sequence[CitedSentence],
    judge: EntailsFn,
    premise_budget: Optional[int] = None,
) -> float:
    """F1 of citation recall and precision; 0 when both are 0.

    Verdicts are memoized across the two passes so shared premises are judged
    once.
    """
    cache: dict[tuple[str, str], bool] = {}

    def cached(premise: str, hypothesis: str) -> bool:
        key = (premise, hypothesis)
        if key not in cache:
            cache[key] = _checked(judge, premise, hypothesis)
        return cache[key]

    recall = citation_recall(turns, cached, premise_budget)
    precision = citation_precision(turns, cached, premise_budget)
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)
