"""
Term matching and inline source annotation with factor streams.

Factor values: 0 for ordinary source words, 1 for source words covered by a
term match, 2 for injected target-term words.
"""

import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import ahocorasick

from .termbase import TermBase, TermEntry
from .utils import PathLike, read_lines, read_token_lines, write_lines, write_token_lines

logger = logging.getLogger(__name__)

SOURCE_WORD = 0
SOURCE_TERM = 1
TARGET_TERM = 2
FACTOR_VALUES = (SOURCE_WORD, SOURCE_TERM, TARGET_TERM)

DEFAULT_MIN_STEM_LEN = 4


class AnnotationMode(str, Enum):
    APPEND = "append"
    REPLACE = "replace"


class MatchKind(str, Enum):
    EXACT = "exact"
    APPROXIMATE = "approximate"


@dataclass(frozen=True)
class FactoredSentence:
    tokens: Tuple[str, ...]
    factors: Tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.factors):
            raise ValueError(
                f"Token/factor length mismatch: {len(self.tokens)} tokens, {len(self.factors)} factors"
            )
        bad = [f for f in self.factors if f not in FACTOR_VALUES]
        if bad:
            raise ValueError(f"Factor values must be in {FACTOR_VALUES}, found {bad[0]}")

    @classmethod
    def plain(cls, tokens: Sequence[str]) -> "FactoredSentence":
        """A sentence without annotations (all factors 0)."""
        return cls(tokens=tuple(tokens), factors=(SOURCE_WORD,) * len(tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TermMatch:
    entry: TermEntry
    start: int
    end: int
    kind: MatchKind = MatchKind.EXACT

    @property
    def length(self) -> int:
        return self.end - self.start


def approx_token_match(term_token: str, sentence_token: str, min_stem_len: int = DEFAULT_MIN_STEM_LEN) -> bool:
    """
    Character-sequence match allowing inflected or compounded forms.

    Args:
        term_token: Token from the term entry (the stem)
        sentence_token: Token from the sentence
        min_stem_len: Shortest term token allowed to match as a prefix

    Returns:
        True if the tokens are equal, or the sentence token starts with a term
        token of at least min_stem_len characters (both case-folded)
    """
    term = term_token.casefold()
    token = sentence_token.casefold()
    if term == token:
        return True
    return len(term) >= min_stem_len and token.startswith(term)


def phrase_occurs(
    tokens: Sequence[str],
    phrase: Sequence[str],
    approximate: bool = False,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> bool:
    """
    Check whether a phrase occurs as a contiguous token subsequence.

    All but the last phrase token must match exactly (case-folded); with
    approximate=True the last token may match by approx_token_match.
    """
    n = len(phrase)
    if n == 0 or n > len(tokens):
        return False
    folded = [t.casefold() for t in tokens]
    head = [t.casefold() for t in phrase[:-1]]
    last = phrase[-1]
    for start in range(len(tokens) - n + 1):
        if folded[start:start + n - 1] != head:
            continue
        candidate = tokens[start + n - 1]
        if candidate.casefold() == last.casefold():
            return True
        if approximate and approx_token_match(last, candidate, min_stem_len):
            return True
    return False


class TermIndex:
    """
    Lookup structure over a term base.

    Exact matches come from an Aho-Corasick automaton over the case-folded
    source phrases, each joined and padded with spaces so that hits always
    start and end on token boundaries. Approximate matching sits on top:
    single-word entries are keyed by the whole token so every stem prefix of
    a sentence token can be looked up, multi-word entries by their first token.
    """

    def __init__(self, termbase: TermBase):
        self.single: Dict[str, List[TermEntry]] = {}
        self.multi: Dict[str, List[TermEntry]] = {}
        by_key: Dict[Tuple[str, ...], List[TermEntry]] = {}
        for entry in termbase:
            key = entry.source_key
            by_key.setdefault(key, []).append(entry)
            table = self.single if len(key) == 1 else self.multi
            table.setdefault(key[0], []).append(entry)

        self.automaton = ahocorasick.Automaton()
        for key, entries in by_key.items():
            pattern = _padded(key)
            self.automaton.add_word(pattern, (len(pattern), len(key), tuple(entries)))
        # iter() refuses an automaton without words
        if by_key:
            self.automaton.make_automaton()
        logger.debug("Built term automaton over %d source phrases", len(by_key))

    def exact(self, folded: Sequence[str]) -> List[TermMatch]:
        """All exact (case-folded) phrase occurrences, overlapping ones included."""
        if self.automaton.kind != ahocorasick.AHOCORASICK or not folded:
            return []
        token_at: Dict[int, int] = {}
        offset = 0
        for i, token in enumerate(folded):
            token_at[offset] = i
            offset += len(token) + 1

        found: List[TermMatch] = []
        for end_index, (pattern_len, num_tokens, entries) in self.automaton.iter(_padded(folded)):
            start = token_at[end_index - pattern_len + 1]
            found.extend(TermMatch(entry, start, start + num_tokens, MatchKind.EXACT) for entry in entries)
        return found

    def candidates(
        self,
        sentence: Sequence[str],
        approximate: bool,
        min_stem_len: int = DEFAULT_MIN_STEM_LEN,
    ) -> List[TermMatch]:
        folded = [t.casefold() for t in sentence]
        found = self.exact(folded)
        if not approximate:
            return found

        for i, token in enumerate(folded):
            for stem_len in range(min_stem_len, len(token)):
                for entry in self.single.get(token[:stem_len], ()):
                    found.append(TermMatch(entry, i, i + 1, MatchKind.APPROXIMATE))

            for entry in self.multi.get(token, ()):
                key = entry.source_key
                end = i + len(key)
                if end > len(folded) or folded[i + 1:end - 1] != list(key[1:-1]):
                    continue
                last = folded[end - 1]
                if last != key[-1] and approx_token_match(key[-1], last, min_stem_len):
                    found.append(TermMatch(entry, i, end, MatchKind.APPROXIMATE))

        return found


def _padded(tokens: Sequence[str]) -> str:
    return " " + " ".join(tokens) + " "


def find_matches(
    sentence: Sequence[str],
    termbase: TermBase,
    approximate: bool = False,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> List[TermMatch]:
    """
    Find non-overlapping term matches in a tokenized sentence.

    Overlaps are resolved by keeping the longest match; ties go to the leftmost
    match, then to the lexicographically smallest target phrase.

    Args:
        sentence: Sentence tokens
        termbase: Term base to match against
        approximate: Allow the last term token to match by approx_token_match
        min_stem_len: Minimum stem length for approximate matches

    Returns:
        Matches sorted by start position
    """
    candidates = termbase.index.candidates(sentence, approximate, min_stem_len)
    candidates.sort(key=lambda m: (-m.length, m.start, m.entry.target_text, m.entry.source_text, m.kind.value))

    covered = [False] * len(sentence)
    chosen: List[TermMatch] = []
    for match in candidates:
        if any(covered[match.start:match.end]):
            continue
        for i in range(match.start, match.end):
            covered[i] = True
        chosen.append(match)

    return sorted(chosen, key=lambda m: m.start)


def annotate_sentence(
    sentence: Sequence[str],
    matches: Sequence[TermMatch],
    mode: AnnotationMode,
) -> FactoredSentence:
    """
    Inline the target side of each match into the sentence.

    In append mode the matched source words get factor 1 and are followed by the
    target phrase with factor 2. In replace mode the matched words are replaced
    by the target phrase with factor 2. Other words keep factor 0.

    Raises:
        ValueError: If matches overlap, are unsorted, or fall outside the sentence
    """
    mode = AnnotationMode(mode)
    tokens: List[str] = []
    factors: List[int] = []
    position = 0

    for match in matches:
        if match.start < position:
            raise ValueError(f"Matches overlap or are unsorted at span [{match.start}, {match.end})")
        if not 0 <= match.start < match.end <= len(sentence):
            raise ValueError(f"Match span [{match.start}, {match.end}) outside sentence of length {len(sentence)}")

        tokens.extend(sentence[position:match.start])
        factors.extend([SOURCE_WORD] * (match.start - position))
        if mode == AnnotationMode.APPEND:
            tokens.extend(sentence[match.start:match.end])
            factors.extend([SOURCE_TERM] * match.length)
        tokens.extend(match.entry.target)
        factors.extend([TARGET_TERM] * len(match.entry.target))
        position = match.end

    tokens.extend(sentence[position:])
    factors.extend([SOURCE_WORD] * (len(sentence) - position))
    return FactoredSentence(tokens=tuple(tokens), factors=tuple(factors))


@dataclass
class ParallelCorpus:
    """Factored source sentences with their references."""

    sources: List[FactoredSentence] = field(default_factory=list)
    targets: List[Tuple[str, ...]] = field(default_factory=list)
    origins: List[int] = field(default_factory=list)
    annotated: List[bool] = field(default_factory=list)
    mode: Optional[AnnotationMode] = None

    def __len__(self) -> int:
        return len(self.sources)

    @property
    def num_annotated(self) -> int:
        return sum(self.annotated)

    @classmethod
    def plain(cls, src: Sequence[Sequence[str]], tgt: Sequence[Sequence[str]]) -> "ParallelCorpus":
        _check_aligned(src, tgt)
        return cls(
            sources=[FactoredSentence.plain(s) for s in src],
            targets=[tuple(t) for t in tgt],
            origins=list(range(len(src))),
            annotated=[False] * len(src),
        )


def _check_aligned(src: Sequence, tgt: Sequence) -> None:
    if len(src) != len(tgt):
        raise ValueError(f"Corpora are not aligned: {len(src)} source vs {len(tgt)} target sentences")


def _selection_key(seed: int, index: int) -> float:
    # Per-sentence randomness so that selection does not depend on processing order
    return random.Random(f"{seed}:{index}").random()


def eligible_matches(
    source: Sequence[str],
    reference: Sequence[str],
    termbase: TermBase,
    source_approximate: bool,
    target_approximate: bool,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> List[TermMatch]:
    """Matches in the source whose target phrase occurs in the reference."""
    return [
        m for m in find_matches(source, termbase, source_approximate, min_stem_len)
        if phrase_occurs(reference, m.entry.target, target_approximate, min_stem_len)
    ]


def build_training_corpus(
    src: Sequence[Sequence[str]],
    tgt: Sequence[Sequence[str]],
    termbase: TermBase,
    mode: AnnotationMode,
    augment_fraction: float = 0.10,
    seed: int = 1,
    approximate: bool = True,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> ParallelCorpus:
    """
    Build a training corpus augmented with term-annotated copies.

    A match is only annotated when its target phrase occurs in the reference.
    The output holds every original pair (all factors 0) followed by annotated
    copies of a seeded random subset of eligible pairs, amounting to
    augment_fraction of the original size (or all eligible pairs if fewer).

    Args:
        src: Tokenized source sentences
        tgt: Tokenized reference sentences, aligned with src
        termbase: Training term base
        mode: Append or replace annotation
        augment_fraction: Number of annotated copies relative to the corpus size
        seed: Random seed for the subset selection
        approximate: Use approximate matching on both sides
        min_stem_len: Minimum stem length for approximate matches

    Returns:
        ParallelCorpus: Originals followed by annotated copies

    Raises:
        ValueError: If the corpora are misaligned or the fraction is out of range
    """
    _check_aligned(src, tgt)
    if not 0.0 <= augment_fraction <= 1.0:
        raise ValueError(f"augment_fraction must be in [0, 1], got {augment_fraction}")
    mode = AnnotationMode(mode)

    corpus = ParallelCorpus.plain(src, tgt)
    corpus.mode = mode

    wanted = math.floor(augment_fraction * len(src) + 0.5)
    if wanted == 0:
        return corpus

    eligible: Dict[int, List[TermMatch]] = {}
    for i, (source, reference) in enumerate(zip(src, tgt)):
        matches = eligible_matches(source, reference, termbase, approximate, approximate, min_stem_len)
        if matches:
            eligible[i] = matches

    chosen = sorted(eligible, key=lambda i: (_selection_key(seed, i), i))[:wanted]
    for i in sorted(chosen):
        corpus.sources.append(annotate_sentence(src[i], eligible[i], mode))
        corpus.targets.append(tuple(tgt[i]))
        corpus.origins.append(i)
        corpus.annotated.append(True)

    logger.info(
        "Annotated %d of %d eligible sentence pairs (%s mode, %d originals)",
        len(chosen), len(eligible), mode.value, len(src),
    )
    return corpus


def check_data_pool(corpus: ParallelCorpus, src: Sequence[Sequence[str]], tgt: Sequence[Sequence[str]]) -> None:
    """
    Verify that annotated copies only reuse original pairs.

    Raises:
        ValueError: If an annotated pair does not trace back to its original
    """
    for position, (source, target, origin, annotated) in enumerate(
        zip(corpus.sources, corpus.targets, corpus.origins, corpus.annotated)
    ):
        if not 0 <= origin < len(src) or tuple(tgt[origin]) != tuple(target):
            raise ValueError(f"Pair {position} does not trace back to an original reference")
        kept = [t for t, f in zip(source.tokens, source.factors) if f != TARGET_TERM]
        if not annotated or corpus.mode == AnnotationMode.APPEND:
            if kept != list(src[origin]):
                raise ValueError(f"Pair {position}: de-annotated source differs from original {origin}")
        elif not _is_subsequence(kept, src[origin]):
            raise ValueError(f"Pair {position}: source words are not drawn from original {origin}")


def _is_subsequence(needle: Sequence[str], haystack: Sequence[str]) -> bool:
    it = iter(haystack)
    return all(token in it for token in needle)


@dataclass
class EvalItem:
    source: Tuple[str, ...]
    reference: Tuple[str, ...]
    matches: List[TermMatch]

    @property
    def gold_terms(self) -> List[Tuple[str, ...]]:
        return [m.entry.target for m in self.matches]


@dataclass
class EvalSet:
    items: List[EvalItem] = field(default_factory=list)
    target_match: MatchKind = MatchKind.EXACT

    def __len__(self) -> int:
        return len(self.items)

    @property
    def sources(self) -> List[Tuple[str, ...]]:
        return [item.source for item in self.items]

    @property
    def references(self) -> List[Tuple[str, ...]]:
        return [item.reference for item in self.items]

    @property
    def gold_terms(self) -> List[List[Tuple[str, ...]]]:
        return [item.gold_terms for item in self.items]

    @property
    def num_terms(self) -> int:
        return sum(len(item.matches) for item in self.items)

    def annotated(self, mode: Optional[AnnotationMode]) -> List[FactoredSentence]:
        """Test inputs annotated in the given mode, or plain inputs for mode=None."""
        if mode is None:
            return [FactoredSentence.plain(item.source) for item in self.items]
        return [annotate_sentence(item.source, item.matches, mode) for item in self.items]

    def write(self, directory: PathLike, name: str = "test") -> Dict[str, Path]:
        """Write sources, references, gold terms and constraint lines."""
        directory = Path(directory)
        return {
            "source": write_token_lines(directory / f"{name}.tok", self.sources),
            "reference": write_token_lines(directory / f"{name}.ref", self.references),
            "terms": write_lines(
                directory / f"{name}.terms.tsv",
                ("\t".join(" ".join(term) for term in terms) for terms in self.gold_terms),
            ),
            "constraints": write_lines(
                directory / f"{name}.constraints.tsv",
                (
                    "\t".join([" ".join(item.source)] + [" ".join(term) for term in item.gold_terms])
                    for item in self.items
                ),
            ),
        }


def extract_test_set(
    src: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    termbase: TermBase,
    target_match: MatchKind = MatchKind.EXACT,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> EvalSet:
    """
    Select test sentences where a matched term is used in the reference.

    Source-side matching is exact; the reference check uses the requested
    regime (exact containment, or approximate on the last term token).

    Returns:
        EvalSet: Kept sentences with their gold term annotations
    """
    _check_aligned(src, refs)
    target_match = MatchKind(target_match)
    approximate = target_match == MatchKind.APPROXIMATE

    test_set = EvalSet(target_match=target_match)
    for source, reference in zip(src, refs):
        matches = eligible_matches(source, reference, termbase, False, approximate, min_stem_len)
        if matches:
            test_set.items.append(EvalItem(tuple(source), tuple(reference), matches))

    logger.info(
        "Extracted test set: %d of %d sentences, %d terms (%s reference match)",
        len(test_set), len(src), test_set.num_terms, target_match.value,
    )
    return test_set


def write_corpus(corpus: ParallelCorpus, directory: PathLike, name: str = "corpus") -> Dict[str, Path]:
    """Write `<name>.tok`, `<name>.factors` and `<name>.tgt` files."""
    directory = Path(directory)
    return {
        "tok": write_token_lines(directory / f"{name}.tok", (s.tokens for s in corpus.sources)),
        "factors": write_lines(
            directory / f"{name}.factors",
            (" ".join(str(f) for f in s.factors) for s in corpus.sources),
        ),
        "tgt": write_token_lines(directory / f"{name}.tgt", corpus.targets),
    }


def read_corpus(directory: PathLike, name: str = "corpus") -> ParallelCorpus:
    """Read a corpus written by write_corpus."""
    directory = Path(directory)
    tokens = read_token_lines(directory / f"{name}.tok")
    targets = read_token_lines(directory / f"{name}.tgt")
    factor_file = directory / f"{name}.factors"
    if factor_file.exists():
        factors = [[int(f) for f in line.split()] for line in read_lines(factor_file)]
    else:
        factors = [[SOURCE_WORD] * len(t) for t in tokens]

    _check_aligned(tokens, targets)
    _check_aligned(tokens, factors)
    sources = [FactoredSentence(tuple(t), tuple(f)) for t, f in zip(tokens, factors)]
    return ParallelCorpus(
        sources=sources,
        targets=[tuple(t) for t in targets],
        origins=list(range(len(sources))),
        annotated=[any(s.factors) for s in sources],
    )


def pair_factors(tokens: Iterable[Sequence[str]], factors: Optional[Iterable[Sequence[int]]] = None) -> List[FactoredSentence]:
    """Pair token lines with factor lines (all-zero factors when none are given)."""
    if factors is None:
        return [FactoredSentence.plain(t) for t in tokens]
    return [FactoredSentence(tuple(t), tuple(f)) for t, f in zip(tokens, factors)]
