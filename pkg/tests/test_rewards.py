import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treecite import (
    Passage,
    SentenceScore,
    attribution_progress_reward,
    citation_precision,
    citation_recall,
    generation_progress_reward,
)
from treecite.errors import EvaluationError
from treecite.rewards import build_premise, truncate_premise_segments

P1 = Passage.make(1, "One", "first passage body")
P2 = Passage.make(2, "Two", "second passage body")
P3 = Passage.make(3, "Three", "third passage body")


class TableJudge:
    """Entailment table keyed by (premise, hypothesis); every call counted."""

    def __init__(self, table: dict, default: bool | None = None):
        self.table = table
        self.default = default
        self.calls = 0

    def __call__(self, premise: str, hypothesis: str) -> bool:
        self.calls += 1
        if (premise, hypothesis) in self.table:
            return self.table[(premise, hypothesis)]
        if self.default is None:
            raise KeyError((premise[:40], hypothesis[:40]))
        return self.default


class TestGenerationReward:
    def test_empty_is_zero(self):
        assert generation_progress_reward([]) == 0.0

    def test_first_sentence_clamps_prefix_to_one(self):
        scores = [SentenceScore(policy_logprob=-1.2, reference_logprob=-1.5, prefix_token_count=0)]
        assert generation_progress_reward(scores) == pytest.approx(0.3, abs=1e-12)

    def test_two_sentences_weighted_sum(self):
        scores = [
            SentenceScore(-1.0, -1.3, 0),   # delta 0.3, weight 1
            SentenceScore(-2.0, -2.7, 7),   # delta 0.7, weight 1/7
        ]
        assert generation_progress_reward(scores) == pytest.approx(0.4, abs=1e-12)

    @given(
        deltas=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
        prefixes=st.lists(st.integers(0, 40), min_size=6, max_size=6),
        scale=st.floats(-3, 3),
    )
    @settings(max_examples=80)
    def test_linearity_in_deltas(self, deltas, prefixes, scale):
        base = [
            SentenceScore(d, 0.0, p) for d, p in zip(deltas, prefixes)
        ]
        scaled = [
            SentenceScore(d * scale, 0.0, p) for d, p in zip(deltas, prefixes)
        ]
        assert generation_progress_reward(scaled) == pytest.approx(
            scale * generation_progress_reward(base), rel=1e-9, abs=1e-9
        )

    @given(
        scores=st.lists(
            st.builds(
                SentenceScore,
                st.floats(-10, 0),
                st.floats(-10, 0),
                st.integers(0, 50),
            ),
            min_size=1,
            max_size=6,
        )
    )
    @settings(max_examples=80)
    def test_monotone_accumulation(self, scores):
        # appending one sentence adds exactly one new weighted term
        full = generation_progress_reward(scores)
        head = generation_progress_reward(scores[:-1])
        last = scores[-1]
        term = (last.policy_logprob - last.reference_logprob) / max(1, last.prefix_token_count)
        assert full == pytest.approx(head + term, rel=1e-12, abs=1e-12)


class TestCitationRecall:
    def test_two_sentences_one_entailed(self):
        judge = TableJudge(
            {
                (build_premise([P1]), "First claim."): True,
                (build_premise([P2]), "Second claim."): False,
            }
        )
        turns = [("First claim.", [P1]), ("Second claim.", [P2])]
        assert citation_recall(turns, judge) == 0.5

    def test_all_uncited_is_zero_with_no_calls(self):
        judge = TableJudge({})
        turns = [("One.", []), ("Two.", [])]
        assert citation_recall(turns, judge) == 0.0
        assert judge.calls == 0

    def test_single_entailed_sentence_is_one(self):
        judge = TableJudge({(build_premise([P1, P2]), "Claim."): True})
        assert citation_recall([("Claim.", [P1, P2])], judge) == 1.0

    def test_premise_format(self):
        assert build_premise([P1, P2]) == (
            "Title: One. first passage body\n\nTitle: Two. second passage body"
        )

    def test_empty_turns(self):
        assert citation_recall([], TableJudge({})) == 0.0


class TestCitationPrecision:
    def test_lone_supporting_citation_is_precise(self):
        judge = TableJudge({(build_premise([P1]), "Claim."): True})
        assert citation_precision([("Claim.", [P1])], judge) == 1.0
        assert judge.calls == 1

    def test_redundant_pair_scores_by_leave_one_out(self):
        # full set entails; {P2} alone entails; {P1} alone does not.
        judge = TableJudge(
            {
                (build_premise([P1, P2]), "Claim."): True,
                (build_premise([P2]), "Claim."): True,
                (build_premise([P1]), "Claim."): False,
            }
        )
        # dropping P1 leaves entailment intact -> P1 scores 0
        # dropping P2 breaks entailment -> P2 scores 1
        assert citation_precision([("Claim.", [P1, P2])], judge) == 0.5

    def test_full_set_not_entailing_zeroes_all(self):
        judge = TableJudge({(build_premise([P1, P2]), "Claim."): False})
        assert citation_precision([("Claim.", [P1, P2])], judge) == 0.0
        assert judge.calls == 1

    def test_no_citations_anywhere_is_zero(self):
        assert citation_precision([("A.", []), ("B.", [])], TableJudge({})) == 0.0

    def test_call_budget(self):
        # budget: at most sum_i (1 + |C_i|)
        judge = TableJudge({}, default=True)
        turns = [("S1.", [P1, P2, P3]), ("S2.", [P1]), ("S3.", [P2, P3])]
        citation_precision(turns, judge)
        assert judge.calls <= (1 + 3) + (1 + 1) + (1 + 2)


class TestAttributionF1:
    def test_perfect(self):
        judge = TableJudge({}, default=True)
        assert attribution_progress_reward([("A.", [P1])], judge) == 1.0

    def test_f1_arithmetic(self):
        # recall 0.5 (one of two sentences entailed), precision 1.0 over the
        # single citation of the entailed sentence... build explicit table:
        judge = TableJudge(
            {
                (build_premise([P1]), "A."): True,
                (build_premise([P2]), "B."): False,
            }
        )
        turns = [("A.", [P1]), ("B.", [P2])]
        recall = citation_recall(turns, judge)
        precision = citation_precision(turns, judge)
        assert recall == 0.5 and precision == 0.5
        assert attribution_progress_reward(turns, judge) == pytest.approx(0.5)

    def test_zero_when_both_zero(self):
        judge = TableJudge({}, default=False)
        assert attribution_progress_reward([("A.", [P1])], judge) == 0.0

    def test_rec_half_prec_one_gives_two_thirds(self):
        # one cited+entailed sentence, one uncited sentence
        judge = TableJudge({(build_premise([P1]), "A."): True})
        turns = [("A.", [P1]), ("B.", [])]
        assert citation_recall(turns, judge) == 0.5
        assert citation_precision(turns, judge) == 1.0
        assert attribution_progress_reward(turns, judge) == pytest.approx(2 / 3)

    def test_judge_failure_wraps_into_evaluation_error(self):
        def broken(premise, hypothesis):
            raise RuntimeError("judge offline")

        with pytest.raises(EvaluationError):
            citation_recall([("A.", [P1])], broken)

    def test_memoizes_repeated_premises(self):
        judge = TableJudge({}, default=True)
        attribution_progress_reward([("A.", [P1])], judge)
        # recall needs 1 call; precision reuses it through the cache
        assert judge.calls == 1


class TestPremiseTruncation:
    def test_no_budget_keeps_passages(self):
        assert truncate_premise_segments([P1, P2], None) == [P1, P2]

    def test_within_budget_untouched(self):
        assert truncate_premise_segments([P1], 100) == [P1]

    def test_proportional_tail_trim(self):
        long1 = Passage.make(1, "L1", " ".join(f"a{i}" for i in range(40)))
        long2 = Passage.make(2, "L2", " ".join(f"b{i}" for i in range(40)))
        trimmed = truncate_premise_segments([long1, long2], 20)
        counts = [len(p.body.split()) for p in trimmed]
        assert sum(counts) <= 20
        assert counts[0] == counts[1]
        assert trimmed[0].body.startswith("a0 ")
