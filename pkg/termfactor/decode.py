"""
Beam search decoding, unconstrained and lexically constrained.

Constrained decoding uses dynamic beam allocation: candidates are grouped
into banks by the number of constraint tokens they have met, and the beam is
shared out across banks so the cost stays constant in the number of
constraints.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_LENGTH_PENALTY = 0.7


class Scorer(Protocol):
    """Anything that can score next-token continuations for a source."""

    eos_id: int
    vocab_size: int

    def encode(self, source: Any) -> Any:
        ...

    def log_probs(self, state: Any, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities [len(prefixes), vocab_size] of the next token."""
        ...


@dataclass(frozen=True)
class Constraint:
    ids: Tuple[int, ...]
    tokens_met: int = 0

    @property
    def satisfied(self) -> bool:
        return self.tokens_met == len(self.ids)

    @property
    def next_id(self) -> Optional[int]:
        return None if self.satisfied else self.ids[self.tokens_met]

    def advance(self, token: int) -> "Constraint":
        if self.satisfied:
            return self
        if self.ids[self.tokens_met] == token:
            return Constraint(self.ids, self.tokens_met + 1)
        # Mismatch: start over, then see whether this token opens the constraint again
        return Constraint(self.ids, 1 if self.ids[0] == token else 0)


@dataclass(frozen=True)
class ConstraintState:
    constraints: Tuple[Constraint, ...] = ()

    @classmethod
    def start(cls, phrases: Sequence[Sequence[int]]) -> "ConstraintState":
        return cls(tuple(Constraint(tuple(p)) for p in phrases))

    @property
    def bank(self) -> int:
        return sum(c.tokens_met for c in self.constraints)

    @property
    def total(self) -> int:
        return sum(len(c.ids) for c in self.constraints)

    @property
    def all_met(self) -> bool:
        return all(c.satisfied for c in self.constraints)

    def next_tokens(self) -> List[int]:
        return sorted({c.next_id for c in self.constraints if not c.satisfied})

    def advance(self, token: int) -> "ConstraintState":
        return ConstraintState(tuple(c.advance(token) for c in self.constraints))


def track_constraint_progress(state: ConstraintState, next_token: int) -> ConstraintState:
    """
    Advance every constraint by one emitted token.

    A constraint in progress moves forward when the token is its next id; on a
    mismatch its progress resets, and the token is re-checked against the
    constraint's first id. Satisfied constraints never change.
    """
    return state.advance(next_token)


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool = False
    constraints: Optional[ConstraintState] = None

    def score(self, alpha: float = DEFAULT_LENGTH_PENALTY) -> float:
        """Length-normalized log-probability."""
        return self.log_prob / (max(len(self.tokens), 1) ** alpha)

    def output(self, eos_id: int) -> List[int]:
        """Emitted ids without the end-of-sequence marker."""
        return list(self.tokens[:-1] if self.finished and self.tokens and self.tokens[-1] == eos_id else self.tokens)

    @property
    def bank(self) -> int:
        return self.constraints.bank if self.constraints is not None else 0


@dataclass
class DecodeResult:
    best: Hypothesis
    nbest: List[Hypothesis] = field(default_factory=list)


def _rank(hypotheses: Sequence[Hypothesis], alpha: float) -> List[Hypothesis]:
    return sorted(hypotheses, key=lambda h: (-h.score(alpha), h.tokens))


def _result(finished: List[Hypothesis], active: List[Hypothesis], alpha: float, nbest: int,
            fallback_key: Optional[Callable[[Hypothesis], Any]] = None) -> DecodeResult:
    ranked = _rank(finished, alpha)
    if ranked:
        return DecodeResult(best=ranked[0], nbest=ranked[:nbest])
    if fallback_key is not None:
        ranked = sorted(active, key=fallback_key)
    else:
        ranked = _rank(active, alpha)
    return DecodeResult(best=ranked[0], nbest=ranked[:nbest])


def beam_search(
    scorer: Scorer,
    source: Any,
    beam_size: int = 5,
    max_len: int = 100,
    alpha: float = DEFAULT_LENGTH_PENALTY,
    nbest: int = 1,
) -> DecodeResult:
    """
    Length-normalized beam search.

    At every step the beam_size best continuations (by cumulative
    log-probability) of the active hypotheses are kept; those ending in EOS
    move to the finished list. The best finished hypothesis by normalized score
    wins, or the best unfinished one if nothing finished within max_len.
    A wider beam may still return a lower score, since finished hypotheses use
    up beam slots.

    Args:
        scorer: Model adapter
        source: Encoded input understood by the scorer
        beam_size: Number of hypotheses kept per step
        max_len: Maximum number of emitted tokens, EOS included
        alpha: Length normalization exponent
        nbest: Number of hypotheses to return

    Returns:
        DecodeResult: Best hypothesis and the n-best list
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")

    state = scorer.encode(source)
    eos = scorer.eos_id
    active = [Hypothesis(tokens=(), log_prob=0.0)]
    finished: List[Hypothesis] = []

    for _ in range(max_len):
        scores = scorer.log_probs(state, [h.tokens for h in active])
        vocab_size = scores.shape[1]
        cumulative = (np.array([h.log_prob for h in active])[:, None] + scores).ravel()
        order = np.argsort(-cumulative, kind="stable")[:beam_size]

        survivors: List[Hypothesis] = []
        for flat_index in order:
            value = float(cumulative[flat_index])
            if not math.isfinite(value):
                break
            h, token = divmod(int(flat_index), vocab_size)
            hyp = Hypothesis(active[h].tokens + (token,), value, token == eos)
            (finished if hyp.finished else survivors).append(hyp)

        active = survivors
        if not active:
            break

    return _result(finished, active, alpha, nbest)


def allocate_banks(available: Sequence[int], beam_size: int) -> List[int]:
    """
    Share beam slots across constraint banks.

    Slots are split evenly over the banks, with the remainder going to the
    highest banks. Slots a bank cannot fill move to the nearest lower bank
    with spare candidates, otherwise to the nearest higher one.

    Args:
        available: Number of candidates in each bank 0..C
        beam_size: Total number of slots

    Returns:
        Number of candidates to take from each bank
    """
    num_banks = len(available)
    base, extra = divmod(beam_size, num_banks)
    quota = [base] * num_banks
    for i in range(extra):
        quota[num_banks - 1 - i] += 1
    taken = [min(q, a) for q, a in zip(quota, available)]

    for bank in reversed(range(num_banks)):
        unused = quota[bank] - taken[bank]
        while unused > 0:
            lower = [b for b in range(bank - 1, -1, -1) if taken[b] < available[b]]
            higher = [b for b in range(bank + 1, num_banks) if taken[b] < available[b]]
            receivers = lower or higher
            if not receivers:
                return taken
            taken[receivers[0]] += 1
            unused -= 1
    return taken


def constrained_beam_search_dba(
    scorer: Scorer,
    source: Any,
    constraints: Sequence[Sequence[int]],
    beam_size: int = 5,
    max_len: int = 100,
    alpha: float = DEFAULT_LENGTH_PENALTY,
    nbest: int = 1,
) -> DecodeResult:
    """
    Lexically constrained beam search with dynamic beam allocation.

    Each step collects, for every active hypothesis, its top beam_size
    continuations, the next token of each unmet constraint, and its single best
    continuation. Candidates are grouped into banks by constraint tokens met
    and the beam is allocated across banks. EOS is only allowed once every
    constraint is met. Without constraints this is exactly beam_search.

    Args:
        scorer: Model adapter
        source: Encoded input understood by the scorer
        constraints: Target phrases as subword id sequences
        beam_size: Number of hypotheses kept per step
        max_len: Maximum number of emitted tokens, EOS included
        alpha: Length normalization exponent
        nbest: Number of hypotheses to return

    Returns:
        DecodeResult: Best finished hypothesis, or the unfinished hypothesis
        with the most constraint tokens met if none finished

    Raises:
        ValueError: If a constraint is empty or holds an out-of-vocabulary id
    """
    if not constraints:
        return beam_search(scorer, source, beam_size, max_len, alpha, nbest)
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    for phrase in constraints:
        if not phrase:
            raise ValueError("Constraints must be non-empty id sequences")
        bad = [i for i in phrase if not 0 <= i < scorer.vocab_size]
        if bad:
            raise ValueError(f"Constraint {list(phrase)} contains out-of-vocabulary id(s) {bad}")

    state = scorer.encode(source)
    eos = scorer.eos_id
    initial = ConstraintState.start(constraints)
    num_banks = initial.total + 1
    active = [Hypothesis(tokens=(), log_prob=0.0, constraints=initial)]
    finished: List[Hypothesis] = []

    for _ in range(max_len):
        scores = scorer.log_probs(state, [h.tokens for h in active])
        banks: List[List[Hypothesis]] = [[] for _ in range(num_banks)]

        for h, hyp in enumerate(active):
            row = scores[h].copy()
            if not hyp.constraints.all_met:
                row[eos] = -math.inf
            top = np.argsort(-row, kind="stable")[:beam_size].tolist()
            tokens = set(top)
            tokens.update(hyp.constraints.next_tokens())
            tokens.add(int(np.argmax(row)))

            for token in sorted(tokens):
                if not math.isfinite(row[token]):
                    continue
                progress = track_constraint_progress(hyp.constraints, token)
                candidate = Hypothesis(hyp.tokens + (token,), hyp.log_prob + float(row[token]),
                                       token == eos, progress)
                banks[progress.bank].append(candidate)

        for bank in banks:
            bank.sort(key=lambda c: (-c.log_prob, c.tokens))
        taken = allocate_banks([len(b) for b in banks], beam_size)

        survivors: List[Hypothesis] = []
        for bank, count in zip(banks, taken):
            for hyp in bank[:count]:
                (finished if hyp.finished else survivors).append(hyp)

        active = survivors
        if not active:
            break

    return _result(finished, active, alpha, nbest, fallback_key=lambda h: (-h.bank, -h.score(alpha), h.tokens))


@dataclass
class LatencyStats:
    percentile: float
    value: float
    mean: float
    median: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "percentile": self.percentile,
            "value": self.value,
            "mean": self.mean,
            "median": self.median,
            "count": self.count,
        }


def min_inputs_for(percentile: float) -> int:
    """Smallest sample for which the percentile is more than an extreme value."""
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    return math.ceil(round(100.0 / min(percentile, 100.0 - percentile), 9))


def measure_latency(
    decoder: Callable[[Any], Any],
    inputs: Sequence[Any],
    percentile: float = 99.0,
    clock: Callable[[], float] = time.perf_counter,
) -> LatencyStats:
    """
    Time a decoder one input at a time (batch size 1).

    Args:
        decoder: Callable translating a single input
        inputs: Test inputs, decoded strictly in order
        percentile: Percentile to report (e.g. 99 for P99)
        clock: Time source in seconds

    Returns:
        LatencyStats: Requested percentile plus mean and median, in seconds

    Raises:
        ValueError: If there are too few inputs for the percentile
    """
    required = min_inputs_for(percentile)
    if len(inputs) < required:
        raise ValueError(f"P{percentile:g} latency needs at least {required} inputs, got {len(inputs)}")

    durations = []
    for item in inputs:
        start = clock()
        decoder(item)
        durations.append(clock() - start)

    times = np.asarray(durations, dtype=np.float64)
    stats = LatencyStats(
        percentile=percentile,
        value=float(np.percentile(times, percentile)),
        mean=float(times.mean()),
        median=float(np.median(times)),
        count=len(durations),
    )
    logger.info("Latency over %d inputs: P%g %.4fs, mean %.4fs", stats.count, percentile, stats.value, stats.mean)
    return stats
