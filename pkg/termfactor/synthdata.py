"""
Synthetic translation tasks with held-out terminology.

A task is a random word-level dictionary plus a reordering rule. Training
sentences draw on common words and on training terms (rare words listed in the
training term base); test sentences additionally contain held-out terms whose
translations never occur in any training reference, so a system can only
produce them by copying from an annotated source.
"""

import logging
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Set, Tuple

from .annotate import phrase_occurs
from .termbase import TermBase, TermEntry, write_termbase
from .utils import PathLike, write_token_lines

logger = logging.getLogger(__name__)

LETTERS = "abcdefghijklmnopqrstuvwxyz"
REORDER_RULES = ("none", "swap_pairs")
MIN_HELD_OUT_LENGTH = 5


@dataclass
class SynthTaskSpec:
    source_alphabet: int = 10
    target_alphabet: int = 10
    vocab_size: int = 60
    num_train_terms: int = 150
    held_out_terms: int = 40
    min_word_len: int = 3
    max_word_len: int = 6
    held_out_min_len: int = MIN_HELD_OUT_LENGTH
    min_sentence_len: int = 3
    max_sentence_len: int = 8
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    term_rate: float = 0.5
    terms_per_test_sentence: int = 1
    reorder: str = "swap_pairs"
    num_markers: int = 0
    marker_rate: float = 0.3
    suffix_length: int = 2
    seed: int = 1

    def __post_init__(self):
        if not 1 <= self.source_alphabet <= len(LETTERS) or not 1 <= self.target_alphabet <= len(LETTERS):
            raise ValueError(f"Alphabet sizes must be between 1 and {len(LETTERS)}")
        if self.reorder not in REORDER_RULES:
            raise ValueError(f"Unknown reorder rule '{self.reorder}', expected one of {REORDER_RULES}")
        if not 1 <= self.min_word_len <= self.max_word_len:
            raise ValueError("Need 1 <= min_word_len <= max_word_len")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ValueError("Need 1 <= min_sentence_len <= max_sentence_len")
        if self.held_out_min_len < MIN_HELD_OUT_LENGTH:
            raise ValueError(f"held_out_min_len must be >= {MIN_HELD_OUT_LENGTH}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if min(self.num_train_terms, self.held_out_terms, self.num_markers, self.suffix_length) < 0:
            raise ValueError("Term, marker and suffix counts must be non-negative")
        if self.held_out_terms and self.terms_per_test_sentence > self.min_sentence_len:
            raise ValueError("terms_per_test_sentence exceeds min_sentence_len")
        if self.num_markers and self.suffix_length < 1:
            raise ValueError("Inflection markers need a suffix of at least one character")
        for name in ("term_rate", "marker_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @property
    def source_letters(self) -> str:
        return LETTERS[: self.source_alphabet]

    @property
    def target_letters(self) -> str:
        return LETTERS[::-1][: self.target_alphabet]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthTaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown SynthTaskSpec field(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SynthCorpus:
    sources: List[List[str]] = field(default_factory=list)
    targets: List[List[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sources)


@dataclass
class SynthTask:
    spec: SynthTaskSpec
    train: SynthCorpus
    dev: SynthCorpus
    test: SynthCorpus
    train_termbase: TermBase
    test_termbase: TermBase
    dictionary: Dict[str, str]
    markers: Tuple[str, ...] = ()
    suffix: str = ""


def _capacity(alphabet: int, min_len: int, max_len: int) -> int:
    return sum(alphabet ** n for n in range(min_len, max_len + 1))


def _draw_words(rng: random.Random, letters: str, count: int, min_len: int, max_len: int,
                taken: Set[str], forbidden: Set[str] = frozenset()) -> List[str]:
    words: List[str] = []
    attempts = 0
    limit = 1000 * max(count, 1)
    while len(words) < count:
        attempts += 1
        if attempts > limit:
            raise ValueError(f"Could not draw {count} distinct words of length {min_len}-{max_len} over '{letters}'")
        word = "".join(rng.choice(letters) for _ in range(rng.randint(min_len, max_len)))
        if word in taken or word in forbidden:
            continue
        taken.add(word)
        words.append(word)
    return words


def reorder_words(words: Sequence[str], rule: str = "swap_pairs") -> List[str]:
    """Apply a reorder rule; swap_pairs swaps the pairs starting at even indices."""
    words = list(words)
    if rule == "swap_pairs":
        for i in range(0, len(words) - 1, 2):
            words[i], words[i + 1] = words[i + 1], words[i]
    return words


def _translate(sentence: Sequence[str], dictionary: Mapping[str, str], markers: Set[str],
               suffix: str, rule: str) -> List[str]:
    output: List[str] = []
    inflect = False
    for word in sentence:
        target = dictionary[word]
        if word in markers:
            output.append(target)
            inflect = True
            continue
        output.append(target + suffix if inflect else target)
        inflect = False
    return reorder_words(output, rule)


def generate_task(spec: SynthTaskSpec) -> SynthTask:
    """
    Generate a synthetic task.

    Args:
        spec: Task parameters

    Returns:
        SynthTask: train/dev/test corpora and the train and test term bases

    Raises:
        ValueError: If the alphabets cannot supply enough distinct words
    """
    regular_count = spec.vocab_size + spec.num_train_terms + spec.num_markers
    held_out_max = max(spec.max_word_len, spec.held_out_min_len)
    source_needed = regular_count + spec.held_out_terms
    if _capacity(spec.source_alphabet, spec.min_word_len, held_out_max) < 2 * source_needed:
        raise ValueError(f"Source alphabet of {spec.source_alphabet} letters is too small for {source_needed} words")
    if _capacity(spec.target_alphabet, spec.min_word_len, spec.max_word_len) < 2 * regular_count:
        raise ValueError(f"Target alphabet of {spec.target_alphabet} letters is too small for {regular_count} words")
    if spec.held_out_terms and _capacity(
        spec.target_alphabet, spec.held_out_min_len, held_out_max
    ) < 2 * (spec.held_out_terms + 2 * regular_count):
        raise ValueError("Target alphabet is too small for the held-out terms")

    rng = random.Random(f"{spec.seed}:dictionary")
    src_taken: Set[str] = set()
    tgt_taken: Set[str] = set()
    src_letters, tgt_letters = spec.source_letters, spec.target_letters

    suffix = "".join(rng.choice(tgt_letters) for _ in range(spec.suffix_length)) if spec.num_markers else ""

    common = _draw_words(rng, src_letters, spec.vocab_size, spec.min_word_len, spec.max_word_len, src_taken)
    terms = _draw_words(rng, src_letters, spec.num_train_terms, spec.min_word_len, spec.max_word_len, src_taken)
    markers = _draw_words(rng, src_letters, spec.num_markers, spec.min_word_len, spec.max_word_len, src_taken)
    held_out = _draw_words(rng, src_letters, spec.held_out_terms, spec.held_out_min_len, held_out_max, src_taken)

    regular_targets = _draw_words(rng, tgt_letters, regular_count, spec.min_word_len, spec.max_word_len, tgt_taken)
    training_forms = set(regular_targets) | {t + suffix for t in regular_targets}
    held_out_targets = _draw_words(
        rng, tgt_letters, spec.held_out_terms, spec.held_out_min_len, held_out_max, tgt_taken, training_forms,
    )

    dictionary = dict(zip(common + terms + markers, regular_targets))
    dictionary.update(zip(held_out, held_out_targets))
    marker_set = set(markers)

    def sentence(split: str, index: int) -> List[str]:
        r = random.Random(f"{spec.seed}:{split}:{index}")
        length = r.randint(spec.min_sentence_len, spec.max_sentence_len)
        content = [r.choice(common) for _ in range(length)]
        if terms and r.random() < spec.term_rate:
            content[r.randrange(length)] = r.choice(terms)
        if split == "test" and held_out:
            for position in r.sample(range(length), spec.terms_per_test_sentence):
                content[position] = r.choice(held_out)
        words: List[str] = []
        for word in content:
            if markers and r.random() < spec.marker_rate:
                words.append(r.choice(markers))
            words.append(word)
        return words

    def corpus(split: str, size: int) -> SynthCorpus:
        sources = [sentence(split, i) for i in range(size)]
        targets = [_translate(s, dictionary, marker_set, suffix, spec.reorder) for s in sources]
        return SynthCorpus(sources, targets)

    task = SynthTask(
        spec=spec,
        train=corpus("train", spec.train_size),
        dev=corpus("dev", spec.dev_size),
        test=corpus("test", spec.test_size),
        train_termbase=TermBase("synth.train", tuple(TermEntry((w,), (dictionary[w],)) for w in terms)),
        test_termbase=TermBase("synth.test", tuple(TermEntry((w,), (dictionary[w],)) for w in held_out)),
        dictionary=dictionary,
        markers=tuple(markers),
        suffix=suffix,
    )
    logger.info(
        "Generated synthetic task: %d/%d/%d sentences, %d train terms, %d held-out terms",
        len(task.train), len(task.dev), len(task.test), len(terms), len(held_out),
    )
    return task


def verify_zero_shot(
    train_references: Sequence[Sequence[str]],
    train_termbase: TermBase,
    test_termbase: TermBase,
) -> bool:
    """
    Check that no test term could have been learned in training.

    Returns:
        True iff no test target phrase occurs in a training reference and no
        test source phrase is listed in the training term base
    """
    for entry in test_termbase:
        if entry.source_key in train_termbase.source_keys:
            logger.warning("Test term '%s' is in the training term base", entry.source_text)
            return False
        for reference in train_references:
            if phrase_occurs(reference, entry.target):
                logger.warning("Test term target '%s' occurs in training data", entry.target_text)
                return False
    return True


def write_task(task: SynthTask, directory: PathLike) -> Dict[str, Path]:
    """Write corpora and term bases in the formats read by the rest of the toolkit."""
    directory = Path(directory)
    written: Dict[str, Path] = {}
    for split, corpus_ in (("train", task.train), ("dev", task.dev), ("test", task.test)):
        written[f"{split}.src"] = write_token_lines(directory / f"{split}.src", corpus_.sources)
        written[f"{split}.tgt"] = write_token_lines(directory / f"{split}.tgt", corpus_.targets)
    written["train_terms"] = write_termbase(task.train_termbase, directory / "train_terms.tsv")
    written["test_terms"] = write_termbase(task.test_termbase, directory / "test_terms.tsv")
    return written

