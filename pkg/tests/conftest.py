import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from worlds import WorldNode, build_world  # noqa: E402

from treecite import BM25Index, Corpus, Passage  # noqa: E402


@pytest.fixture
def toy_corpus() -> Corpus:
    return Corpus(
        [
            Passage.make(0, "Rivers", "The long river crosses the northern plain and floods in spring."),
            Passage.make(1, "Mountains", "The granite mountain range shelters the valley from storms."),
            Passage.make(2, "Cities", "The old city grew around the river crossing and its stone bridge."),
            Passage.make(3, "Forests", "Pine forests cover the foothills below the mountain snow line."),
            Passage.make(4, "Climate", "Spring floods follow the mountain snow melt most years."),
        ],
        "toy",
    )


@pytest.fixture
def toy_index(toy_corpus) -> BM25Index:
    return BM25Index(toy_corpus)


@pytest.fixture
def two_branch_world():
    """Two one-sentence branches: 'a' is entailed and better scored, 'b' is not."""
    a = WorldNode("a", policy_lp=-2.0, reference_lp=-3.0, entailed=True, has_end=True)
    b = WorldNode("b", policy_lp=-4.0, reference_lp=-3.5, entailed=False, has_end=True)
    return build_world([a, b])
