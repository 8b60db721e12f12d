from __future__ import annotations

import itertools
from typing import Dict, Sequence, Tuple

import numpy as np
import pytest

from conftest import TableScorer, exhaustive_best, greedy
from termfactor.decode import (
    Constraint,
    ConstraintState,
    Hypothesis,
    allocate_banks,
    beam_search,
    constrained_beam_search_dba,
    measure_latency,
    min_inputs_for,
    track_constraint_progress,
)


def test_hypothesis_score_is_length_normalized() -> None:
    hyp = Hypothesis(tokens=(3, 4, 0), log_prob=-3.0, finished=True)

    assert hyp.score(0.7) == pytest.approx(-3.0 / 3 ** 0.7)
    assert hyp.output(eos_id=0) == [3, 4]
    assert Hypothesis((), 0.0).score() == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_beam_one_is_greedy(seed: int) -> None:
    scorer = TableScorer(seed=seed)

    result = beam_search(scorer, 0, beam_size=1, max_len=6)

    assert result.best.tokens == greedy(scorer, 0, 6)


@pytest.mark.parametrize("seed", range(10))
def test_saturating_beam_finds_global_optimum(seed: int) -> None:
    scorer = TableScorer(vocab_size=6, seed=seed)

    result = beam_search(scorer, 0, beam_size=6 ** 4, max_len=4)

    assert result.best.tokens == exhaustive_best(scorer, 0, max_len=4)


@pytest.mark.parametrize("seed", range(10))
def test_no_beam_beats_the_global_optimum(seed: int) -> None:
    scorer = TableScorer(vocab_size=6, seed=seed)
    optimum = beam_search(scorer, 0, beam_size=6 ** 4, max_len=4).best.score()

    for beam_size in range(1, 9):
        best = beam_search(scorer, 0, beam_size=beam_size, max_len=4).best
        if best.finished:
            assert best.score() <= optimum


class PrefixScorer:
    """Toy model over {0: EOS, 1, 2} with hand-set next-token probabilities per prefix."""

    def __init__(self, table: Dict[Tuple[int, ...], Sequence[float]]):
        self.table = table
        self.vocab_size = 3
        self.eos_id = 0

    def encode(self, source: int) -> int:
        return source

    def log_probs(self, state: int, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        return np.log(np.array([self.table.get(tuple(p), (1 / 3, 1 / 3, 1 / 3)) for p in prefixes]))


def test_wider_beam_finds_the_late_bloomer() -> None:
    # Greedy takes token 1; the best finished hypothesis is (2, EOS)
    scorer = PrefixScorer({
        (): (0.05, 0.55, 0.40),
        (1,): (0.30, 0.35, 0.35),
        (2,): (0.90, 0.05, 0.05),
    })
    optimum = exhaustive_best(scorer, 0, max_len=3)
    scores = [beam_search(scorer, 0, beam_size=k, max_len=3).best.score() for k in range(1, 9)]

    assert optimum == (2, 0)
    assert scores == sorted(scores)
    assert scores[0] < scores[1]
    for k in range(2, 9):
        assert beam_search(scorer, 0, beam_size=k, max_len=3).best.tokens == optimum


def test_wider_beam_can_score_lower() -> None:
    # At step two the (2, x) prefixes crowd out (1, 1), whose EOS is the better ending
    scorer = PrefixScorer({
        (): (0.02, 0.50, 0.48),
        (1,): (0.20, 0.40, 0.40),
        (1, 1): (0.90, 0.05, 0.05),
        (2,): (0.02, 0.49, 0.49),
        (2, 1): (0.50, 0.25, 0.25),
        (2, 2): (0.50, 0.25, 0.25),
    })

    narrow = beam_search(scorer, 0, beam_size=1, max_len=3).best
    wide = beam_search(scorer, 0, beam_size=2, max_len=3).best

    assert narrow.tokens == greedy(scorer, 0, 3) == (1, 1, 0)
    assert wide.tokens == (2, 1, 0)
    assert narrow.finished and wide.finished
    assert wide.score() < narrow.score()


def test_nbest_is_sorted() -> None:
    result = beam_search(TableScorer(seed=4), 0, beam_size=5, max_len=5, nbest=3)

    scores = [h.score() for h in result.nbest]
    assert result.nbest[0] == result.best
    assert scores == sorted(scores, reverse=True)
    assert len(result.nbest) <= 3


def test_unfinished_fallback_when_max_len_is_short() -> None:
    scorer = TableScorer(seed=1)
    scorer.table[:, :, scorer.eos_id] = -50.0

    result = beam_search(scorer, 0, beam_size=3, max_len=2)

    assert len(result.best.tokens) == 2
    assert not result.best.finished


def test_beam_size_must_be_positive() -> None:
    with pytest.raises(ValueError):
        beam_search(TableScorer(), 0, beam_size=0)


def test_no_constraints_is_plain_beam_search() -> None:
    scorer = TableScorer(vocab_size=6, depth=7, seed=11)

    for source in range(1000):
        plain = beam_search(scorer, source, beam_size=4, max_len=5)
        constrained = constrained_beam_search_dba(scorer, source, [], beam_size=4, max_len=5)
        assert constrained.best == plain.best


@pytest.mark.parametrize("seed", range(100))
def test_single_token_constraint_appears(seed: int) -> None:
    scorer = TableScorer(vocab_size=6, seed=seed)
    token = 1 + seed % 5

    result = constrained_beam_search_dba(scorer, seed, [[token]], beam_size=5, max_len=6)

    assert token in result.best.output(scorer.eos_id)


def _constraint_cases():
    rng = np.random.default_rng(7)
    for seed in range(60):
        count = int(rng.integers(1, 3))
        constraints = [
            [int(t) for t in rng.integers(1, 5, size=int(rng.integers(1, 3)))]
            for _ in range(count)
        ]
        if sum(len(c) for c in constraints) <= 4:
            yield seed, constraints


@pytest.mark.parametrize("seed,constraints", list(_constraint_cases()))
def test_dba_matches_constrained_oracle(seed: int, constraints) -> None:
    scorer = TableScorer(vocab_size=5, seed=100 + seed)

    result = constrained_beam_search_dba(scorer, 0, constraints, beam_size=1500, max_len=5)

    assert result.best.tokens == exhaustive_best(scorer, 0, max_len=5, constraints=constraints)


def test_two_constraints_are_both_met() -> None:
    scorer = TableScorer(vocab_size=8, seed=5)

    result = constrained_beam_search_dba(scorer, 0, [[3, 4], [6]], beam_size=5, max_len=10)

    output = result.best.output(scorer.eos_id)
    assert 6 in output
    assert any(output[i:i + 2] == [3, 4] for i in range(len(output)))
    assert result.best.constraints.all_met


def test_unmeetable_constraints_return_most_progress() -> None:
    scorer = TableScorer(vocab_size=5, seed=2)

    result = constrained_beam_search_dba(scorer, 0, [[1, 2, 3]], beam_size=5, max_len=2)

    assert not result.best.finished
    assert result.best.tokens == (1, 2)
    assert result.best.bank == 2


@pytest.mark.parametrize("constraints", [[[]], [[7]], [[-1]], [[1], [2, 99]]])
def test_invalid_constraints(constraints) -> None:
    with pytest.raises(ValueError):
        constrained_beam_search_dba(TableScorer(vocab_size=5), 0, constraints)


def test_constraint_progress() -> None:
    a, b = 1, 2
    state = ConstraintState.start([[a, b]])

    after_a = track_constraint_progress(state, a)
    assert after_a.constraints[0].tokens_met == 1
    assert track_constraint_progress(after_a, b).constraints[0].satisfied
    # Mismatch resets, then the token re-opens the constraint
    assert track_constraint_progress(after_a, a).constraints[0].tokens_met == 1
    assert track_constraint_progress(after_a, 3).constraints[0].tokens_met == 0


def test_satisfied_constraint_is_frozen() -> None:
    done = Constraint((1, 2), tokens_met=2)

    for token in range(5):
        assert done.advance(token) == done


def test_constraint_state_bookkeeping() -> None:
    state = ConstraintState.start([[1, 2], [3]])

    assert (state.bank, state.total, state.all_met) == (0, 3, False)
    assert state.next_tokens() == [1, 3]
    state = state.advance(3).advance(1)
    assert (state.bank, state.next_tokens()) == (2, [2])
    state = state.advance(2)
    assert state.all_met and state.bank == 3


@pytest.mark.parametrize(
    "available,beam_size,expected",
    [
        ([10, 10, 10], 5, [1, 2, 2]),
        ([10, 0, 0], 6, [6, 0, 0]),
        ([1, 1, 1], 10, [1, 1, 1]),
        ([0, 5, 0], 4, [0, 4, 0]),
        ([0, 0, 9], 3, [0, 0, 3]),
        ([4], 3, [3]),
    ],
)
def test_allocate_banks(available, beam_size, expected) -> None:
    assert allocate_banks(available, beam_size) == expected


def test_allocate_banks_never_exceeds_beam_or_supply() -> None:
    for available in itertools.product(range(4), repeat=3):
        for beam_size in range(1, 8):
            taken = allocate_banks(list(available), beam_size)
            assert sum(taken) == min(beam_size, sum(available))
            assert all(t <= a for t, a in zip(taken, available))


class StubClock:
    def __init__(self, step: float):
        self.now = 0.0
        self.step = step

    def __call__(self) -> float:
        self.now += self.step
        return self.now


def test_latency_of_constant_time_decoder() -> None:
    stats = measure_latency(lambda item: item, list(range(10)), percentile=50, clock=StubClock(0.5))

    assert stats.value == pytest.approx(0.5)
    assert stats.median == pytest.approx(0.5)
    assert stats.count == 10


def test_latency_needs_enough_inputs() -> None:
    with pytest.raises(ValueError):
        measure_latency(lambda item: item, list(range(99)), percentile=99)

    stats = measure_latency(lambda item: item, list(range(100)), percentile=99, clock=StubClock(0.25))
    assert stats.value == pytest.approx(0.25)


def test_min_inputs_for() -> None:
    assert min_inputs_for(99) == 100
    assert min_inputs_for(50) == 2
    assert min_inputs_for(99.9) == 1000
    with pytest.raises(ValueError):
        min_inputs_for(100)
