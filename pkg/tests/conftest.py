from __future__ import annotations

import itertools
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pytest

from termfactor.annotate import phrase_occurs
from termfactor.termbase import TermBase, TermEntry


@pytest.fixture(autouse=True)
def isolated_config_home(tmp_path_factory, monkeypatch):
    """Keep the user's ~/.config/termfactor out of every test."""
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path_factory.mktemp("xdg")))


class TableScorer:
    """
    Toy model: next-token log-probabilities are a fixed random table indexed
    by decoding position and previous token. The integer source shifts the
    position, so different sources give different distributions.
    """

    def __init__(self, vocab_size: int = 5, depth: int = 6, seed: int = 0, eos_id: int = 0, sharpness: float = 2.0):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(depth, vocab_size + 1, vocab_size)) * sharpness
        self.table = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.depth = depth
        self.start = vocab_size

    def encode(self, source: int) -> int:
        return int(source)

    def log_probs(self, state: int, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        rows = []
        for prefix in prefixes:
            previous = prefix[-1] if prefix else self.start
            rows.append(self.table[(len(prefix) + state) % self.depth, previous])
        return np.array(rows)


def sequence_log_prob(scorer: TableScorer, source: int, tokens: Sequence[int]) -> float:
    state = scorer.encode(source)
    total = 0.0
    for i, token in enumerate(tokens):
        total += float(scorer.log_probs(state, [tuple(tokens[:i])])[0][token])
    return total


def exhaustive_best(
    scorer: TableScorer,
    source: int,
    max_len: int,
    alpha: float = 0.7,
    constraints: Sequence[Sequence[int]] = (),
) -> Optional[Tuple[int, ...]]:
    """Best finished sequence (EOS included) of at most max_len tokens containing every constraint."""
    eos = scorer.eos_id
    content = [t for t in range(scorer.vocab_size) if t != eos]
    best: Optional[Tuple[float, Tuple[int, ...]]] = None
    for length in range(max_len):
        for body in itertools.product(content, repeat=length):
            if not all(phrase_occurs([str(t) for t in body], [str(t) for t in c]) for c in constraints):
                continue
            tokens = body + (eos,)
            score = sequence_log_prob(scorer, source, tokens) / (len(tokens) ** alpha)
            key = (-score, tokens)
            if best is None or key < best:
                best = key
    return None if best is None else best[1]


def greedy(scorer: TableScorer, source: int, max_len: int) -> Tuple[int, ...]:
    state = scorer.encode(source)
    tokens: List[int] = []
    while len(tokens) < max_len:
        token = int(np.argmax(scorer.log_probs(state, [tuple(tokens)])[0]))
        tokens.append(token)
        if token == scorer.eos_id:
            break
    return tuple(tokens)


@pytest.fixture
def election_termbase() -> TermBase:
    return TermBase("election", (TermEntry(("alternates",), ("Stellvertreter",)),))


ELECTION_SENTENCE = "All alternates shall be elected for one term".split()
ELECTION_REFERENCE = "Alle Stellvertreter werden für eine Amtszeit gewählt".split()
