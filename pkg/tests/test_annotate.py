from __future__ import annotations

from pathlib import Path

import pytest

from conftest import ELECTION_REFERENCE, ELECTION_SENTENCE
from termfactor.annotate import (
    AnnotationMode,
    FactoredSentence,
    MatchKind,
    ParallelCorpus,
    TermIndex,
    TermMatch,
    annotate_sentence,
    approx_token_match,
    build_training_corpus,
    check_data_pool,
    extract_test_set,
    find_matches,
    phrase_occurs,
    read_corpus,
    write_corpus,
)
from termfactor.termbase import TermBase, TermEntry


@pytest.mark.parametrize(
    "term,token,expected",
    [
        ("elect", "elected", True),
        ("arrest", "arrest", True),
        ("a", "apple", False),
        ("Arrest", "arrested", True),
        ("humanitär", "humanitären", True),
        ("elect", "select", False),
        ("a", "A", True),
    ],
)
def test_approx_token_match(term: str, token: str, expected: bool) -> None:
    assert approx_token_match(term, token) is expected


def test_find_matches_election_sentence(election_termbase: TermBase) -> None:
    (match,) = find_matches(ELECTION_SENTENCE, election_termbase)

    assert (match.start, match.end, match.kind) == (1, 2, MatchKind.EXACT)


def test_find_matches_prefers_longest() -> None:
    termbase = TermBase("tb", (
        TermEntry(("translation",), ("Y",)),
        TermEntry(("machine", "translation"), ("X",)),
    ))

    (match,) = find_matches("machine translation works".split(), termbase)

    assert match.entry.target == ("X",)
    assert (match.start, match.end) == (0, 2)


def test_find_matches_tie_goes_to_smallest_target() -> None:
    termbase = TermBase("tb", (TermEntry(("bank",), ("Ufer",)), TermEntry(("bank",), ("Bank",))))

    (match,) = find_matches(["the", "bank"], termbase)

    assert match.entry.target == ("Bank",)


def test_find_matches_tie_goes_to_leftmost() -> None:
    termbase = TermBase("tb", (TermEntry(("b", "c"), ("BC",)), TermEntry(("a", "b"), ("AB",))))

    matches = find_matches(["a", "b", "c"], termbase)

    assert [(m.start, m.end) for m in matches] == [(0, 2)]


def test_find_matches_spans_are_disjoint_and_sorted() -> None:
    termbase = TermBase("tb", (
        TermEntry(("term",), ("Amtszeit",)),
        TermEntry(("alternates",), ("Stellvertreter",)),
        TermEntry(("one", "term"), ("eine", "Amtszeit")),
    ))

    matches = find_matches(ELECTION_SENTENCE, termbase)

    assert [(m.start, m.end) for m in matches] == [(1, 2), (6, 8)]


def test_term_index_exact_hits_respect_token_boundaries() -> None:
    index = TermIndex(TermBase("tb", (
        TermEntry(("arrest",), ("Festnahme",)),
        TermEntry(("the", "arrest"), ("die", "Festnahme")),
    )))

    hits = index.exact("the arrested man resisted arrest and the arrest".split())

    assert sorted((m.start, m.end, m.entry.target_text) for m in hits) == [
        (4, 5, "Festnahme"),
        (6, 8, "die Festnahme"),
        (7, 8, "Festnahme"),
    ]
    assert all(m.kind == MatchKind.EXACT for m in hits)


def test_term_index_keeps_every_entry_of_a_shared_source() -> None:
    index = TermIndex(TermBase("tb", (TermEntry(("Bank",), ("Ufer",)), TermEntry(("bank",), ("Bank",)))))

    hits = index.candidates(["the", "BANK", "bank"], approximate=False)

    assert sorted((m.start, m.entry.target_text) for m in hits) == [(1, "Bank"), (1, "Ufer"), (2, "Bank"), (2, "Ufer")]


def test_find_matches_empty_termbase() -> None:
    assert find_matches(ELECTION_SENTENCE, TermBase("empty")) == []


def test_find_matches_approximate_only_on_request() -> None:
    termbase = TermBase("tb", (TermEntry(("elect",), ("wählen",)),))
    sentence = ELECTION_SENTENCE

    assert find_matches(sentence, termbase) == []
    (match,) = find_matches(sentence, termbase, approximate=True)
    assert (match.start, match.kind) == (4, MatchKind.APPROXIMATE)


def test_find_matches_multiword_approximate_last_token() -> None:
    termbase = TermBase("tb", (TermEntry(("human", "right"), ("Menschenrecht",)),))

    assert find_matches("human rights matter".split(), termbase) == []
    assert len(find_matches("human rights matter".split(), termbase, approximate=True)) == 1
    assert find_matches("humane rights".split(), termbase, approximate=True) == []


def test_annotate_append_election_sentence(election_termbase: TermBase) -> None:
    matches = find_matches(ELECTION_SENTENCE, election_termbase)

    annotated = annotate_sentence(ELECTION_SENTENCE, matches, AnnotationMode.APPEND)

    assert " ".join(annotated.tokens) == "All alternates Stellvertreter shall be elected for one term"
    assert annotated.factors == (0, 1, 2, 0, 0, 0, 0, 0, 0)


def test_annotate_replace_election_sentence(election_termbase: TermBase) -> None:
    matches = find_matches(ELECTION_SENTENCE, election_termbase)

    annotated = annotate_sentence(ELECTION_SENTENCE, matches, AnnotationMode.REPLACE)

    assert " ".join(annotated.tokens) == "All Stellvertreter shall be elected for one term"
    assert annotated.factors == (0, 2, 0, 0, 0, 0, 0, 0)


@pytest.mark.parametrize("mode", list(AnnotationMode))
def test_annotate_without_matches_is_identity(mode: AnnotationMode) -> None:
    annotated = annotate_sentence(ELECTION_SENTENCE, [], mode)

    assert annotated == FactoredSentence.plain(ELECTION_SENTENCE)


def test_annotate_preserves_source_words() -> None:
    termbase = TermBase("tb", (
        TermEntry(("alternates",), ("Stellvertreter",)),
        TermEntry(("one", "term"), ("eine", "Amtszeit")),
    ))
    matches = find_matches(ELECTION_SENTENCE, termbase)

    append = annotate_sentence(ELECTION_SENTENCE, matches, AnnotationMode.APPEND)
    replace = annotate_sentence(ELECTION_SENTENCE, matches, AnnotationMode.REPLACE)

    assert [t for t, f in zip(append.tokens, append.factors) if f != 2] == ELECTION_SENTENCE
    assert [t for t, f in zip(replace.tokens, replace.factors) if f == 0] == ["All", "shall", "be", "elected", "for"]
    assert 1 not in replace.factors


def test_annotate_rejects_overlapping_matches() -> None:
    entry = TermEntry(("a", "b"), ("X",))
    matches = [TermMatch(entry, 0, 2), TermMatch(entry, 1, 3)]

    with pytest.raises(ValueError):
        annotate_sentence(["a", "b", "b"], matches, AnnotationMode.APPEND)


def test_factored_sentence_validates() -> None:
    with pytest.raises(ValueError):
        FactoredSentence(("a", "b"), (0,))
    with pytest.raises(ValueError):
        FactoredSentence(("a",), (3,))


def test_phrase_occurs() -> None:
    reference = "Alle humanitären Organisationen".split()

    assert not phrase_occurs(reference, ["humanitär"])
    assert phrase_occurs(reference, ["humanitär"], approximate=True)
    assert phrase_occurs(reference, ["alle", "humanitären"])
    assert not phrase_occurs(reference, [])


def _hundred_pairs():
    src = [f"the alternates of group {i}".split() for i in range(100)]
    tgt = [f"die Stellvertreter der Gruppe {i}".split() for i in range(100)]
    return src, tgt


def test_build_training_corpus_adds_ten_percent(election_termbase: TermBase) -> None:
    src, tgt = _hundred_pairs()

    corpus = build_training_corpus(src, tgt, election_termbase, AnnotationMode.APPEND, 0.10, seed=1)

    assert len(corpus) == 110
    assert corpus.num_annotated == 10
    assert all(not any(s.factors) for s in corpus.sources[:100])
    assert all(set(s.factors) == {0, 1, 2} for s in corpus.sources[100:])
    check_data_pool(corpus, src, tgt)


def test_build_training_corpus_is_deterministic(election_termbase: TermBase) -> None:
    src, tgt = _hundred_pairs()

    a = build_training_corpus(src, tgt, election_termbase, AnnotationMode.REPLACE, 0.10, seed=5)
    b = build_training_corpus(src, tgt, election_termbase, AnnotationMode.REPLACE, 0.10, seed=5)
    c = build_training_corpus(src, tgt, election_termbase, AnnotationMode.REPLACE, 0.10, seed=6)

    assert a == b
    assert a.origins != c.origins


def test_build_training_corpus_without_augmentation(election_termbase: TermBase) -> None:
    src, tgt = _hundred_pairs()

    corpus = build_training_corpus(src, tgt, election_termbase, AnnotationMode.APPEND, 0.0, seed=1)

    assert corpus.sources == [FactoredSentence.plain(s) for s in src]
    assert corpus.num_annotated == 0


def test_build_training_corpus_requires_target_in_reference(election_termbase: TermBase) -> None:
    src = [ELECTION_SENTENCE] * 10
    tgt = ["Alle Vertreter werden gewählt".split()] * 10

    corpus = build_training_corpus(src, tgt, election_termbase, AnnotationMode.APPEND, 1.0, seed=1)

    assert corpus.num_annotated == 0


def test_build_training_corpus_takes_all_eligible_when_fewer(election_termbase: TermBase) -> None:
    src = [ELECTION_SENTENCE, "nothing here".split(), "nor here".split()]
    tgt = [ELECTION_REFERENCE, "nichts".split(), "auch nicht".split()]

    corpus = build_training_corpus(src, tgt, election_termbase, AnnotationMode.APPEND, 1.0, seed=1)

    assert len(corpus) == 4
    assert corpus.origins[-1] == 0


def test_build_training_corpus_rejects_misaligned(election_termbase: TermBase) -> None:
    with pytest.raises(ValueError):
        build_training_corpus([["a"]], [], election_termbase, AnnotationMode.APPEND)


def test_check_data_pool_catches_foreign_pairs(election_termbase: TermBase) -> None:
    src, tgt = _hundred_pairs()
    corpus = build_training_corpus(src, tgt, election_termbase, AnnotationMode.APPEND, 0.10, seed=1)
    corpus.targets[-1] = ("fremd",)

    with pytest.raises(ValueError):
        check_data_pool(corpus, src, tgt)


def test_extract_test_set_exact_vs_approximate() -> None:
    termbase = TermBase("tb", (TermEntry(("humanitarian",), ("humanitär",)),))
    src = ["humanitarian aid".split()]
    refs = ["humanitären Hilfe".split()]

    assert len(extract_test_set(src, refs, termbase, MatchKind.EXACT)) == 0
    test_set = extract_test_set(src, refs, termbase, MatchKind.APPROXIMATE)
    assert len(test_set) == 1
    assert test_set.gold_terms == [[("humanitär",)]]


def test_extract_test_set_keeps_sentences_using_terms(election_termbase: TermBase) -> None:
    src = [ELECTION_SENTENCE, "no term here".split()]
    refs = [ELECTION_REFERENCE, "kein Begriff".split()]

    test_set = extract_test_set(src, refs, election_termbase)

    assert test_set.sources == [tuple(ELECTION_SENTENCE)]
    assert test_set.num_terms == 1
    assert test_set.annotated(None)[0] == FactoredSentence.plain(ELECTION_SENTENCE)
    assert test_set.annotated(AnnotationMode.APPEND)[0].factors == (0, 1, 2, 0, 0, 0, 0, 0, 0)


def test_extract_test_set_source_side_is_exact() -> None:
    termbase = TermBase("tb", (TermEntry(("elect",), ("gewählt",)),))

    assert len(extract_test_set([ELECTION_SENTENCE], [ELECTION_REFERENCE], termbase, MatchKind.APPROXIMATE)) == 0


def test_extract_test_set_empty() -> None:
    assert len(extract_test_set([["a"]], [["b"]], TermBase("empty"))) == 0


def test_eval_set_write(tmp_path: Path, election_termbase: TermBase) -> None:
    test_set = extract_test_set([ELECTION_SENTENCE], [ELECTION_REFERENCE], election_termbase)

    files = test_set.write(tmp_path)

    assert files["terms"].read_text(encoding="utf-8") == "Stellvertreter\n"
    assert files["constraints"].read_text(encoding="utf-8") == " ".join(ELECTION_SENTENCE) + "\tStellvertreter\n"


def test_corpus_files_round_trip(tmp_path: Path, election_termbase: TermBase) -> None:
    corpus = build_training_corpus([ELECTION_SENTENCE], [ELECTION_REFERENCE], election_termbase,
                                   AnnotationMode.APPEND, 1.0, seed=1)

    write_corpus(corpus, tmp_path, "append")
    loaded = read_corpus(tmp_path, "append")

    assert loaded.sources == corpus.sources
    assert loaded.targets == corpus.targets
    assert (tmp_path / "append.factors").read_text(encoding="utf-8").splitlines()[1] == "0 1 2 0 0 0 0 0 0"


def test_plain_corpus_has_zero_factors() -> None:
    corpus = ParallelCorpus.plain([["a", "b"]], [["x"]])

    assert corpus.sources[0].factors == (0, 0)
