"""
Terminology database ingestion, filtering and train/test splitting.
"""

import hashlib
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

from .utils import PathLike, read_lines, tokenize, write_lines

logger = logging.getLogger(__name__)


class TermBaseFormatError(ValueError):
    """Raised when a term base or frequency list file violates its format."""

    def __init__(self, path: PathLike, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


@dataclass(frozen=True)
class TermEntry:
    source: Tuple[str, ...]
    target: Tuple[str, ...]
    id: str = ""

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("Term entry needs a non-empty source and target phrase")
        if any(not token for token in self.source + self.target):
            raise ValueError(f"Term entry contains an empty token: {self.source} -> {self.target}")
        if not self.id:
            object.__setattr__(self, "id", entry_id(self.source, self.target))

    @property
    def source_text(self) -> str:
        return " ".join(self.source)

    @property
    def target_text(self) -> str:
        return " ".join(self.target)

    @property
    def source_key(self) -> Tuple[str, ...]:
        """Case-folded source phrase, used for grouping and lookups."""
        return tuple(token.casefold() for token in self.source)


def entry_id(source: Sequence[str], target: Sequence[str]) -> str:
    """Content hash of an entry, stable across files and orderings."""
    payload = " ".join(source) + "\t" + " ".join(target)
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class TermBase:
    name: str
    entries: Tuple[TermEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TermEntry]:
        return iter(self.entries)

    @cached_property
    def source_keys(self) -> frozenset:
        return frozenset(entry.source_key for entry in self.entries)

    @cached_property
    def index(self) -> "TermIndex":
        from .annotate import TermIndex

        return TermIndex(self)


def make_termbase(name: str, entries: Sequence[TermEntry]) -> TermBase:
    """Build a term base, dropping exact (source, target) duplicates but keeping order."""
    seen = set()
    unique = []
    for entry in entries:
        key = (entry.source, entry.target)
        if key in seen:
            continue
        seen.add(key)
        unique.append(entry)
    return TermBase(name=name, entries=tuple(unique))


@dataclass(frozen=True)
class FrequencyList:
    words: Tuple[str, ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        if len(self.words) != len(self.counts):
            raise ValueError("Frequency list needs one count per word")
        for prev, cur in zip(self.counts, self.counts[1:]):
            if cur > prev:
                raise ValueError("Frequency list counts must be non-increasing in rank order")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.casefold() in self._folded

    @cached_property
    def _folded(self) -> frozenset:
        return frozenset(word.casefold() for word in self.words)


def _decoded_lines(path: Path) -> Iterator[str]:
    with open(path, "rb") as f:
        for line_number, raw in enumerate(f, 1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise TermBaseFormatError(path, line_number, f"invalid UTF-8 at byte {e.start}") from e
            yield line.rstrip("\n").rstrip("\r")


def ingest_termbase(path: PathLike, name: str) -> TermBase:
    """
    Read a term base from a `source<TAB>target` TSV file.

    Blank lines are skipped. Both sides are split on whitespace.

    Args:
        path: UTF-8 TSV file, one entry per line, no header
        name: Label for the term base (e.g. "wiktionary", "iate")

    Returns:
        TermBase: Entries in file order with exact duplicates collapsed

    Raises:
        FileNotFoundError: If the file does not exist
        TermBaseFormatError: If a line is not valid UTF-8, does not have exactly
            two non-empty fields, or the file has no entries
    """
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"Term base not found: {path}")

    entries = []
    for line_number, line in enumerate(_decoded_lines(path), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise TermBaseFormatError(path, line_number, f"expected 2 tab-separated fields, found {len(fields)}")
        source, target = fields[0].split(), fields[1].split()
        if not source or not target:
            raise TermBaseFormatError(path, line_number, "empty source or target phrase")
        entries.append(TermEntry(source=tuple(source), target=tuple(target)))

    if not entries:
        raise TermBaseFormatError(path, 0, "term base is empty")

    termbase = make_termbase(name, entries)
    logger.info("Ingested %d entries (%d lines) into term base '%s'", len(termbase), len(entries), name)
    return termbase


def write_termbase(termbase: TermBase, path: PathLike) -> Path:
    """Serialize a term base in the TSV format read by ingest_termbase."""
    return write_lines(path, (f"{e.source_text}\t{e.target_text}" for e in termbase))


def build_frequency_list(corpus: PathLike, top_n: int = 500, tokenized: bool = True) -> FrequencyList:
    """
    Count case-folded word tokens of a source-side corpus.

    Words are split the same way the corpus is read for matching: on
    whitespace when tokenized, otherwise with utils.tokenize.

    Args:
        corpus: Text file, one sentence per line
        top_n: Number of words to keep
        tokenized: Whether the corpus is already tokenized

    Returns:
        FrequencyList: Most frequent words first, ties broken lexicographically

    Raises:
        ValueError: If the corpus contains no tokens or top_n is negative
    """
    if top_n < 0:
        raise ValueError(f"top_n must be >= 0, got {top_n}")

    counts: Counter = Counter()
    for line in read_lines(corpus):
        counts.update(token.casefold() for token in (line.split() if tokenized else tokenize(line)))

    if not counts:
        raise ValueError(f"Corpus is empty: {corpus}")

    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:top_n]
    return FrequencyList(words=tuple(w for w, _ in ranked), counts=tuple(c for _, c in ranked))


def write_frequency_list(freq: FrequencyList, path: PathLike) -> Path:
    """Write a frequency list as `word<TAB>count` lines in rank order."""
    return write_lines(path, (f"{w}\t{c}" for w, c in zip(freq.words, freq.counts)))


def read_frequency_list(path: PathLike) -> FrequencyList:
    """Read a frequency list written by write_frequency_list."""
    words: List[str] = []
    counts: List[int] = []
    for line_number, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[1].strip().isdigit():
            raise TermBaseFormatError(path, line_number, "expected `word<TAB>count`")
        words.append(fields[0])
        counts.append(int(fields[1]))
    try:
        return FrequencyList(words=tuple(words), counts=tuple(counts))
    except ValueError as e:
        raise TermBaseFormatError(path, 0, str(e))


def filter_termbase(termbase: TermBase, freq: FrequencyList, min_chars: int = 2) -> TermBase:
    """
    Remove entries likely to produce spurious matches.

    An entry is dropped when its source is a single word found in the frequency
    list (case-folded), or when its source side has fewer than min_chars
    characters in total. Multi-word entries are never dropped by the frequency rule.

    Args:
        termbase: Term base to filter
        freq: Frequent-word list (e.g. the top 500 source words)
        min_chars: Minimum number of source characters

    Returns:
        TermBase: Filtered copy with the same name
    """
    if min_chars < 1:
        raise ValueError(f"min_chars must be >= 1, got {min_chars}")

    kept = []
    frequent = short = 0
    for entry in termbase:
        if len(entry.source) == 1 and entry.source[0] in freq:
            frequent += 1
        elif sum(len(token) for token in entry.source) < min_chars:
            short += 1
        else:
            kept.append(entry)

    logger.info(
        "Filtered term base '%s': kept %d, dropped %d frequent and %d short entries",
        termbase.name, len(kept), frequent, short,
    )
    return TermBase(name=termbase.name, entries=tuple(kept))


def split_termbase(termbase: TermBase, test_fraction: float, seed: int) -> Tuple[TermBase, TermBase]:
    """
    Split a term base into train and test halves with disjoint source sides.

    Entries are grouped by case-folded source phrase; whole groups are assigned
    to one half. The number of test groups is test_fraction of all groups,
    rounded half up.

    Args:
        termbase: Term base to split
        test_fraction: Fraction of source groups assigned to the test half
        seed: Random seed for the group shuffle

    Returns:
        Tuple of (train, test) term bases, named "<name>.train" and "<name>.test"

    Raises:
        ValueError: If the fraction is out of range or leaves one half empty
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")

    groups: Dict[Tuple[str, ...], List[TermEntry]] = {}
    for entry in termbase:
        groups.setdefault(entry.source_key, []).append(entry)

    keys = sorted(groups)
    num_test = math.floor(test_fraction * len(keys) + 0.5)
    if num_test < 1 or num_test > len(keys) - 1:
        raise ValueError(
            f"Term base '{termbase.name}' has {len(keys)} source group(s), "
            f"too few to split with test_fraction={test_fraction}"
        )

    random.Random(seed).shuffle(keys)
    test_keys = set(keys[:num_test])

    train = [e for e in termbase if e.source_key not in test_keys]
    test = [e for e in termbase if e.source_key in test_keys]
    logger.info("Split term base '%s': %d train / %d test entries", termbase.name, len(train), len(test))
    return (
        TermBase(name=f"{termbase.name}.train", entries=tuple(train)),
        TermBase(name=f"{termbase.name}.test", entries=tuple(test)),
    )
