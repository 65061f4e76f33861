"""Acceptance suite: one test per criterion, each printing a PASS line.

Tolerances and runtime budgets are pinned here; every expected value is
either computed by an independent oracle inside this module or asserted
exactly.
"""

import itertools
import json
import random
import re
import time
from decimal import Decimal, getcontext

import pytest

from test_golden_transcripts import EXPECTED_ACTIONS, action_lines
from worlds import random_world

from treecite import (
    BM25Index,
    Corpus,
    NodeState,
    Passage,
    Rule,
    ScriptedBackend,
    SearchConfig,
    SentenceScore,
    TreeNode,
    backpropagate,
    generation_progress_reward,
    load_template,
    parse_action,
    parse_transcript,
    render_transcript,
    run_search,
    uct_score,
)
from treecite.backends import BackendSet
from treecite.corpus import bm25_score_all
from treecite.evaluation import BenchmarkItem, run_benchmark
from treecite.rewards import (
    attribution_progress_reward,
    build_premise,
    citation_precision,
    citation_recall,
)

TEMPLATE = load_template("asqa")

getcontext().prec = 50


def report(number: int, name: str) -> None:
    print(f"ACCEPTANCE {number} ({name}): PASS")


def test_01_uct_arithmetic_against_high_precision_oracle():
    started = time.perf_counter()
    rng = random.Random(1001)
    for _ in range(1000):
        v = rng.uniform(-5.0, 5.0)
        n_parent = rng.randint(1, 1_000_000)
        n_child = rng.randint(1, n_parent)
        w = rng.uniform(0.0, 2.0)
        parent = TreeNode(NodeState())
        parent.visit_count = n_parent
        child = TreeNode(NodeState(), parent=parent)
        child.visit_count = n_child
        child.value = v
        got = uct_score(child, parent, w)
        oracle = Decimal(v) + Decimal(w) * (
            Decimal(n_parent).ln() / Decimal(n_child)
        ).sqrt()
        assert abs(got - float(oracle)) <= 1e-12
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"took {elapsed:.3f}s"
    report(1, "UCT arithmetic")


def test_02_backpropagation_running_mean_replay():
    started = time.perf_counter()

    def ancestry(node):
        seen = set()
        while node is not None:
            seen.add(id(node))
            node = node.parent
        return seen

    for seed in range(5):
        rng = random.Random(2000 + seed)
        root = TreeNode(NodeState())
        nodes = [root]
        events = []
        for _ in range(200):
            if rng.random() < 0.5 or len(nodes) < 4:
                parent = rng.choice(nodes)
                child = TreeNode(NodeState(), parent=parent)
                parent.children.append(child)
                nodes.append(child)
            target = rng.choice(nodes)
            reward = rng.uniform(0.0, 2.0)
            backpropagate(target, reward)
            events.append((target, reward))
        paths = {id(n): ancestry(n) for n in nodes}
        for node in nodes:
            through = [r for target, r in events if id(node) in paths[id(target)]]
            assert node.visit_count == len(through)
            if through:
                assert abs(node.value - sum(through) / len(through)) <= 1e-12
            else:
                assert node.value == 0.0
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"took {elapsed:.3f}s"
    report(2, "backpropagation running mean")


def test_03_scripted_world_optimality():
    started = time.perf_counter()
    cfg = SearchConfig(max_iterations=100)
    for seed in range(10):
        world = random_world(seed)
        paths = world.enumerate_paths()
        assert 0 < len(paths) <= 20
        best = world.best_path()
        answer, _, _ = run_search(
            world.question, world.index(), world.backends(), cfg, TEMPLATE
        )
        assert answer.text == world.expected_answer_text(best), f"world seed {seed}"
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"took {elapsed:.3f}s"
    report(3, "scripted-world optimality")


# --- criterion 4: brute-force reference for the citation rules -----------------


def brute_recall(turns, verdicts):
    if not turns:
        return 0.0
    scores = []
    for sentence, passages in turns:
        if not passages:
            scores.append(0)
        else:
            scores.append(1 if verdicts[(build_premise(passages), sentence)] else 0)
    return sum(scores) / len(scores)


def brute_precision(turns, verdicts):
    per_citation = []
    for sentence, passages in turns:
        if not passages:
            continue
        full = verdicts[(build_premise(passages), sentence)]
        for j in range(len(passages)):
            rest = passages[:j] + passages[j + 1 :]
            rest_entails = verdicts[(build_premise(rest), sentence)] if rest else False
            per_citation.append(1 if (full and not rest_entails) else 0)
    if not per_citation:
        return 0.0
    return sum(per_citation) / len(per_citation)


def brute_f1(recall, precision):
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)


def test_04_citation_metric_oracle_exhaustive():
    started = time.perf_counter()
    pool = [Passage.make(i, f"T{i}", f"body {i}") for i in range(6)]
    sentences = ["First statement.", "Second statement."]
    checked = 0
    for c1, c2 in itertools.product(range(4), repeat=2):
        cited = [pool[:c1], pool[3 : 3 + c2]]
        turns = list(zip(sentences, cited))
        # every premise the rules can ask about: the full set and each
        # leave-one-out subset with at least one passage
        probes = []
        for sentence, passages in turns:
            if not passages:
                continue
            probes.append((build_premise(passages), sentence))
            if len(passages) > 1:
                for j in range(len(passages)):
                    rest = passages[:j] + passages[j + 1 :]
                    probes.append((build_premise(rest), sentence))
        for bits in itertools.product([False, True], repeat=len(probes)):
            verdicts = dict(zip(probes, bits))

            def judge(premise, hypothesis):
                return verdicts[(premise, hypothesis)]

            recall = citation_recall(turns, judge)
            precision = citation_precision(turns, judge)
            f1 = attribution_progress_reward(turns, judge)
            assert recall == brute_recall(turns, verdicts)
            assert precision == brute_precision(turns, verdicts)
            assert f1 == brute_f1(brute_recall(turns, verdicts), brute_precision(turns, verdicts))
            checked += 1
    assert checked == 729
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"took {elapsed:.3f}s"
    report(4, "citation metric oracle")


def test_05_generation_reward_hand_computed():
    # k = 0 clamp: empty prefix counts as one token
    single = [SentenceScore(-1.2, -1.5, 0)]
    assert generation_progress_reward(single) == pytest.approx(0.3, abs=1e-9)

    multi = [
        SentenceScore(-1.0, -1.3, 0),
        SentenceScore(-2.0, -2.7, 7),
        SentenceScore(-0.5, -0.9, 12),
    ]
    expected = 0.3 / 1 + 0.7 / 7 + 0.4 / 12
    assert generation_progress_reward(multi) == pytest.approx(expected, abs=1e-9)

    rng = random.Random(5)
    for _ in range(200):
        scores = [
            SentenceScore(rng.uniform(-9, 0), rng.uniform(-9, 0), rng.randint(0, 60))
            for _ in range(rng.randint(1, 8))
        ]
        by_hand = sum(
            (s.policy_logprob - s.reference_logprob) / max(1, s.prefix_token_count)
            for s in scores
        )
        assert generation_progress_reward(scores) == pytest.approx(by_hand, abs=1e-9)
    report(5, "generation reward")


def test_06_protocol_golden_round_trips():
    for tag in ("asqa", "qampari", "eli5"):
        golden = load_template(tag).demonstrations[0]
        question, turns, ended = parse_transcript(golden)
        assert ended
        assert render_transcript(question, turns, ended=True) == golden
        actions = [parse_action(line) for line in action_lines(golden)]
        assert actions == EXPECTED_ACTIONS[tag]
    report(6, "protocol golden transcripts")


def test_07_ablation_purity(two_branch_world):
    world = two_branch_world

    backends = world.backends()
    run_search(world.question, world.index(), backends,
               SearchConfig(max_iterations=10, disable_reflection=True), TEMPLATE)
    assert backends.ledger.counts_by_role().get("reflector", 0) == 0

    backends = world.backends()
    run_search(world.question, world.index(), backends,
               SearchConfig(max_iterations=10, disable_rg=True), TEMPLATE)
    counts = backends.ledger.counts_by_role()
    assert counts.get("scorer_policy", 0) == 0
    assert counts.get("scorer_reference", 0) == 0

    backends = world.backends()
    run_search(world.question, world.index(), backends,
               SearchConfig(max_iterations=10, disable_ra=True), TEMPLATE)
    assert backends.ledger.counts_by_role().get("judge", 0) == 0

    _, tree, _ = run_search(world.question, world.index(), world.backends(),
                            SearchConfig(disable_search=True), TEMPLATE)
    node = tree
    while node.children:
        assert len(node.children) == 1
        node = node.children[0]
    report(7, "ablation purity")


def test_08_retrieval_oracle_randomized():
    rng = random.Random(8008)
    vocab = [f"word{i}" for i in range(18)]
    for trial in range(5):
        n = rng.randint(10, 100)
        passages = []
        for i in range(n):
            # duplicated bodies force score ties, exercising the id tie-break
            if i % 7 == 3 and i > 0:
                passages.append(Passage.make(i, f"t{i}", passages[i - 1].body))
            else:
                body = " ".join(rng.choices(vocab, k=rng.randint(2, 14)))
                passages.append(Passage.make(i, f"t{i}", body))
        corpus = Corpus(passages, "rand")
        index = BM25Index(corpus)
        for _ in range(50):
            query = " ".join(rng.choices(vocab, k=rng.randint(1, 5)))
            k = rng.randint(1, 12)
            expected = sorted(
                bm25_score_all(corpus, query).items(), key=lambda kv: (-kv[1], kv[0])
            )[:k]
            got = [(h.passage_id, h.score) for h in index.retrieve(query, k=k)]
            assert got == expected
    report(8, "retrieval oracle")


def test_09_constraint_enforcement():
    cfg = SearchConfig(max_iterations=100)
    for seed in (3, 4):
        world = random_world(seed)
        answer, tree, _ = run_search(
            world.question, world.index(), world.backends(), cfg, TEMPLATE
        )
        for sentence in answer.sentences:
            assert 0 < len(sentence.passage_ids) <= 3

        def walk(node, depth):
            assert depth <= 6
            assert len(node.children) <= 3
            if node.state.turn is not None and node.state.sentence:
                assert 0 < len(node.state.citations) <= 3
            for child in node.children:
                walk(child, depth + 1)

        walk(tree, 0)

    # over-citing policies are capped to three citations before validation
    corpus = Corpus(
        [
            Passage.make(0, "A", "shared topicz token alpha"),
            Passage.make(1, "B", "shared topicz token beta"),
            Passage.make(2, "C", "shared topicz token gamma"),
        ],
        "overcite",
    )
    question = "Overcite?"
    policy = ScriptedBackend(
        [
            Rule(re.compile(r"Question: Overcite\?$"), "Search: topicz"),
            Rule(
                re.compile(r"token \w+$"),
                ["Output: Everything at once [1][2][3][4][5].", "End"],
            ),
            Rule(re.compile(r"Output: Everything at once.*$"), "End"),
        ]
    )
    backends = BackendSet(
        policy=policy,
        reflector=ScriptedBackend([Rule(re.compile("."), "supportive")]),
        scorer_policy=ScriptedBackend([Rule(re.compile("."), -1.0)]),
        scorer_reference=ScriptedBackend([Rule(re.compile("."), -2.0)]),
        judge=ScriptedBackend([Rule(re.compile("."), True)]),
    )
    answer, _, _ = run_search(question, BM25Index(corpus), backends,
                              SearchConfig(max_iterations=10), TEMPLATE)
    assert answer.sentences
    assert all(len(s.passage_ids) <= 3 for s in answer.sentences)
    report(9, "constraint enforcement")


def test_10_determinism_byte_identical_reports(two_branch_world):
    world = two_branch_world
    items = [
        BenchmarkItem(
            question=world.question,
            candidate_passages=sorted(world.passages.values(), key=lambda p: p.id),
            gold=[["Fact a"]],
            dataset_tag="asqa",
        )
    ]
    cfg = SearchConfig(max_iterations=25)
    first = run_benchmark(items, cfg, world.backends(), TEMPLATE, seed=42)
    second = run_benchmark(items, cfg, world.backends(), TEMPLATE, seed=42)
    a = first.to_json(include_timestamp=False)
    b = second.to_json(include_timestamp=False)
    assert a.encode("utf-8") == b.encode("utf-8")
    json.loads(a)
    report(10, "determinism")
