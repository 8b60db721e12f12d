"""
Joint byte-pair encoding over source and target text, with factor broadcast.

Segmented words use the "@@" continuation convention: every subword except
the last one of a word carries a trailing "@@" ("Stell@@ vertreter").
"""

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .annotate import FactoredSentence
from .utils import PathLike, read_lines, write_lines

logger = logging.getLogger(__name__)

END_OF_WORD = "</w>"
CONTINUATION = "@@"
MODEL_HEADER = "#termfactor-bpe"
MODEL_VERSION = 1
DEFAULT_NUM_MERGES = 4000

Pair = Tuple[str, str]


@dataclass(frozen=True)
class BpeModel:
    merges: Tuple[Pair, ...]
    vocab: FrozenSet[str]
    end_of_word: str = END_OF_WORD

    @cached_property
    def ranks(self) -> Dict[Pair, int]:
        return {pair: rank for rank, pair in enumerate(self.merges)}


@dataclass(frozen=True)
class FactoredSubwordSentence:
    subwords: Tuple[str, ...]
    factors: Tuple[int, ...]

    def __post_init__(self):
        if len(self.subwords) != len(self.factors):
            raise ValueError(
                f"Subword/factor length mismatch: {len(self.subwords)} vs {len(self.factors)}"
            )

    def __len__(self) -> int:
        return len(self.subwords)


def _word_symbols(word: str) -> Tuple[str, ...]:
    return tuple(word) + (END_OF_WORD,)


def _pairs(symbols: Sequence[str]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


def _merge_symbols(symbols: Sequence[str], pair: Pair) -> Tuple[str, ...]:
    merged: List[str] = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            merged.append(pair[0] + pair[1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def bpe_train(
    src_corpus: Iterable[Sequence[str]],
    tgt_corpus: Iterable[Sequence[str]],
    num_merges: int = DEFAULT_NUM_MERGES,
    min_frequency: int = 2,
) -> BpeModel:
    """
    Learn joint BPE merges on the concatenation of source and target corpora.

    The most frequent adjacent symbol pair is merged at each step; ties are
    broken by the lexicographic order of the pair. Learning stops early when no
    pair occurs at least min_frequency times.

    Args:
        src_corpus: Tokenized source sentences
        tgt_corpus: Tokenized target sentences
        num_merges: Maximum number of merge operations
        min_frequency: Minimum pair frequency for a merge

    Returns:
        BpeModel: Ordered merges and the symbol vocabulary of the segmented corpus
    """
    if num_merges < 0:
        raise ValueError(f"num_merges must be >= 0, got {num_merges}")

    word_counts: Counter = Counter()
    for corpus in (src_corpus, tgt_corpus):
        for sentence in corpus:
            word_counts.update(sentence)
    if not word_counts:
        raise ValueError("Cannot learn BPE from empty corpora")

    words = [_word_symbols(w) for w in sorted(word_counts)]
    freqs = [word_counts[w] for w in sorted(word_counts)]

    stats: Counter = Counter()
    where: Dict[Pair, set] = defaultdict(set)
    for idx, symbols in enumerate(words):
        for pair, n in _pairs(symbols).items():
            stats[pair] += n * freqs[idx]
            where[pair].add(idx)

    merges: List[Pair] = []
    while len(merges) < num_merges and stats:
        best, best_freq = min(stats.items(), key=lambda item: (-item[1], item[0]))
        if best_freq < min_frequency:
            break
        merges.append(best)

        for idx in sorted(where.pop(best, ())):
            old = words[idx]
            new = _merge_symbols(old, best)
            if new == old:
                continue
            for pair, n in _pairs(old).items():
                stats[pair] -= n * freqs[idx]
                if stats[pair] <= 0:
                    del stats[pair]
            for pair, n in _pairs(new).items():
                stats[pair] += n * freqs[idx]
                where[pair].add(idx)
            words[idx] = new
        stats.pop(best, None)

        if len(merges) % 1000 == 0:
            logger.debug("Learned %d merges", len(merges))

    vocab = frozenset(symbol for symbols in words for symbol in symbols)
    logger.info("Learned %d BPE merges, vocabulary of %d symbols", len(merges), len(vocab))
    return BpeModel(merges=tuple(merges), vocab=vocab)


def segment_word(word: str, model: BpeModel) -> Tuple[str, ...]:
    """
    Split one word into subwords with "@@" continuation markers.

    Merges are applied greedily by rank (the order they were learned);
    characters the model never saw simply stay single symbols.
    """
    ranks = model.ranks
    symbols: Tuple[str, ...] = _word_symbols(word)
    while len(symbols) > 1:
        ranked = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not ranked:
            break
        symbols = _merge_symbols(symbols, min(ranked)[1])

    # Fold the end-of-word symbol into the surface form
    if symbols[-1] == END_OF_WORD:
        symbols = symbols[:-1]
    else:
        symbols = symbols[:-1] + (symbols[-1][: -len(END_OF_WORD)],)
    return tuple(s + CONTINUATION for s in symbols[:-1]) + (symbols[-1],)


class Segmenter:
    """Caching wrapper around segment_word for corpus-scale application."""

    def __init__(self, model: BpeModel):
        self.model = model
        self._cache: Dict[str, Tuple[str, ...]] = {}

    def __call__(self, word: str) -> Tuple[str, ...]:
        pieces = self._cache.get(word)
        if pieces is None:
            pieces = segment_word(word, self.model)
            self._cache[word] = pieces
        return pieces


def bpe_apply(
    sentence: FactoredSentence,
    model: BpeModel,
    segmenter: Optional[Segmenter] = None,
) -> FactoredSubwordSentence:
    """
    Segment a factored sentence, broadcasting each word's factor to its subwords.

    Args:
        sentence: Word tokens with factors
        model: Trained BPE model
        segmenter: Optional cache shared across calls

    Returns:
        FactoredSubwordSentence: One factor per subword
    """
    segment = segmenter or Segmenter(model)
    subwords: List[str] = []
    factors: List[int] = []
    for token, factor in zip(sentence.tokens, sentence.factors):
        pieces = segment(token)
        subwords.extend(pieces)
        factors.extend([factor] * len(pieces))
    return FactoredSubwordSentence(subwords=tuple(subwords), factors=tuple(factors))


def bpe_apply_tokens(tokens: Sequence[str], model: BpeModel, segmenter: Optional[Segmenter] = None) -> List[str]:
    """Segment plain tokens (e.g. target sentences or constraint phrases)."""
    return list(bpe_apply(FactoredSentence.plain(tokens), model, segmenter).subwords)


def surface_forms(model: BpeModel) -> FrozenSet[str]:
    """All subword strings segment_word can emit with this model."""
    forms = set()
    symbols = set(model.vocab)
    for left, right in model.merges:
        symbols.update((left, right, left + right))
    for symbol in symbols:
        final = symbol.endswith(END_OF_WORD)
        body = symbol[: -len(END_OF_WORD)] if final else symbol
        if not body:
            continue
        if final:
            forms.add(body)
        else:
            forms.update((body, body + CONTINUATION))
        # Single characters of merged symbols can resurface in unseen words
        for char in body:
            forms.update((char, char + CONTINUATION))
    return frozenset(forms)


def bpe_decode(subwords: Sequence[str]) -> List[str]:
    """
    Join subwords back into words at the continuation markers.

    A dangling continuation at the end of the sequence is closed as a word.
    """
    words: List[str] = []
    current = ""
    for piece in subwords:
        if piece.endswith(CONTINUATION):
            current += piece[: -len(CONTINUATION)]
        else:
            words.append(current + piece)
            current = ""
    if current:
        words.append(current)
    return words


def save_bpe(model: BpeModel, path: PathLike) -> Path:
    """
    Write a BPE model: a version header, the symbol vocabulary on one line,
    then one `left right` merge rule per line in learning order.
    """
    lines = [f"{MODEL_HEADER} version={MODEL_VERSION} merges={len(model.merges)}"]
    lines.append(" ".join(sorted(model.vocab)))
    lines.extend(f"{left} {right}" for left, right in model.merges)
    return write_lines(path, lines)


def load_bpe(path: PathLike) -> BpeModel:
    """Read a BPE model written by save_bpe."""
    lines = read_lines(path)
    if len(lines) < 2 or not lines[0].startswith(MODEL_HEADER):
        raise ValueError(f"Not a BPE model file: {path}")
    header = dict(item.split("=", 1) for item in lines[0].split()[1:])
    if int(header.get("version", 0)) != MODEL_VERSION:
        raise ValueError(f"Unsupported BPE model version {header.get('version')} in {path}")

    vocab = frozenset(lines[1].split())
    merges: List[Pair] = []
    for line_number, line in enumerate(lines[2:], 3):
        parts = line.split(" ")
        if len(parts) != 2:
            raise ValueError(f"{path}:{line_number}: malformed merge rule")
        merges.append((parts[0], parts[1]))
    if len(merges) != int(header.get("merges", -1)):
        raise ValueError(f"{path}: header announces {header.get('merges')} merges, found {len(merges)}")
    return BpeModel(merges=tuple(merges), vocab=vocab)


PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)


@dataclass
class Vocabulary:
    """Subword-to-id mapping shared by source and target."""

    tokens: List[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"Vocabulary must start with the reserved symbols {RESERVED}")
        self._ids = {token: i for i, token in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("Vocabulary contains duplicate symbols")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def encode(self, subwords: Sequence[str], strict: bool = False) -> List[int]:
        """
        Map subwords to ids. Unknown subwords become <unk>, or raise a
        ValueError naming them when strict (decoding constraints must not
        silently turn into <unk>).
        """
        if strict:
            unknown = [s for s in subwords if s not in self._ids]
            if unknown:
                raise ValueError(f"Out-of-vocabulary subwords {unknown} in {' '.join(subwords)!r}")
        return [self._ids.get(s, self.unk_id) for s in subwords]

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Map ids back to subwords, dropping reserved symbols."""
        return [self.tokens[i] for i in ids if i >= len(RESERVED)]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], model: Optional[BpeModel] = None) -> "Vocabulary":
        """
        Collect every subword of the given sentences.

        With a BPE model, every piece the model can produce is added as well,
        so novel words (unseen terms) never map to <unk>.
        """
        symbols = set()
        for sentence in sentences:
            symbols.update(sentence)
        if model is not None:
            symbols.update(surface_forms(model))
        symbols.difference_update(RESERVED)
        return cls(tokens=list(RESERVED) + sorted(symbols))

    def to_json(self) -> str:
        return json.dumps(self.tokens, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(tokens=list(json.loads(payload)))
