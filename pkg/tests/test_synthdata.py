from __future__ import annotations

from pathlib import Path

import pytest

from termfactor.annotate import phrase_occurs
from termfactor.synthdata import (
    SynthTaskSpec,
    generate_task,
    reorder_words,
    verify_zero_shot,
    write_task,
)
from termfactor.termbase import TermBase, ingest_termbase


def small_spec(**overrides) -> SynthTaskSpec:
    settings = dict(vocab_size=30, num_train_terms=20, held_out_terms=10, train_size=300, dev_size=30,
                    test_size=40, seed=4)
    settings.update(overrides)
    return SynthTaskSpec(**settings)


def test_held_out_targets_never_occur_in_training() -> None:
    task = generate_task(small_spec())

    for entry in task.test_termbase:
        for reference in task.train.targets + task.dev.targets:
            assert not phrase_occurs(reference, entry.target)


def test_held_out_terms_appear_in_every_test_sentence() -> None:
    task = generate_task(small_spec())
    held_out = {entry.source[0] for entry in task.test_termbase}

    for source, target in zip(task.test.sources, task.test.targets):
        used = [word for word in source if word in held_out]
        assert used
        assert all(task.dictionary[word] in target for word in used)


def test_training_terms_are_listed_and_used() -> None:
    task = generate_task(small_spec())
    train_terms = {entry.source[0] for entry in task.train_termbase}

    assert len(task.train_termbase) == 20
    assert any(word in train_terms for sentence in task.train.sources for word in sentence)
    assert not train_terms & {entry.source[0] for entry in task.test_termbase}


def test_zero_held_out_terms_gives_empty_test_termbase() -> None:
    task = generate_task(small_spec(held_out_terms=0))

    assert len(task.test_termbase) == 0
    assert verify_zero_shot(task.train.targets, task.train_termbase, task.test_termbase)


def test_generation_is_deterministic(tmp_path: Path) -> None:
    first = write_task(generate_task(small_spec()), tmp_path / "a")
    second = write_task(generate_task(small_spec()), tmp_path / "b")

    for name in first:
        assert first[name].read_bytes() == second[name].read_bytes(), name


def test_seed_changes_the_task() -> None:
    assert generate_task(small_spec(seed=1)).dictionary != generate_task(small_spec(seed=2)).dictionary


def test_translation_follows_dictionary_and_reordering() -> None:
    task = generate_task(small_spec(reorder="none"))

    for source, target in zip(task.train.sources, task.train.targets):
        assert target == [task.dictionary[word] for word in source]


def test_reorder_swap_pairs() -> None:
    assert reorder_words(["a", "b", "c", "d", "e"], "swap_pairs") == ["b", "a", "d", "c", "e"]
    assert reorder_words(["a", "b"], "none") == ["a", "b"]


def test_markers_inflect_the_next_word() -> None:
    task = generate_task(small_spec(num_markers=2, marker_rate=0.5, reorder="none"))
    markers = set(task.markers)

    assert len(task.suffix) == 2
    inflected = 0
    for source, target in zip(task.train.sources, task.train.targets):
        for i, word in enumerate(source):
            if word in markers:
                continue
            expected = task.dictionary[word]
            if i > 0 and source[i - 1] in markers:
                expected += task.suffix
                inflected += 1
            assert target[i] == expected
    assert inflected > 0


def test_held_out_targets_avoid_inflected_training_forms() -> None:
    task = generate_task(small_spec(num_markers=2, marker_rate=0.5))

    for entry in task.test_termbase:
        for reference in task.train.targets:
            assert not phrase_occurs(reference, entry.target)


def test_verify_zero_shot_detects_leak() -> None:
    task = generate_task(small_spec())
    assert verify_zero_shot(task.train.targets, task.train_termbase, task.test_termbase)

    leaked = [list(t) for t in task.train.targets]
    leaked[0].append(task.test_termbase.entries[0].target[0])

    assert not verify_zero_shot(leaked, task.train_termbase, task.test_termbase)


def test_verify_zero_shot_detects_shared_source() -> None:
    task = generate_task(small_spec())
    shared = TermBase("train", task.train_termbase.entries + task.test_termbase.entries[:1])

    assert not verify_zero_shot(task.train.targets, shared, task.test_termbase)


def test_verify_zero_shot_vacuous() -> None:
    assert verify_zero_shot([["a"]], TermBase("train"), TermBase("test"))


def test_infeasible_spec_is_rejected() -> None:
    with pytest.raises(ValueError):
        generate_task(SynthTaskSpec(source_alphabet=2, min_word_len=1, max_word_len=2, vocab_size=50))


@pytest.mark.parametrize(
    "overrides",
    [
        {"reorder": "shuffle"},
        {"held_out_min_len": 4},
        {"term_rate": 1.5},
        {"min_word_len": 5, "max_word_len": 3},
        {"source_alphabet": 27},
    ],
)
def test_spec_validation(overrides) -> None:
    with pytest.raises(ValueError):
        small_spec(**overrides)


def test_spec_dict_round_trip() -> None:
    spec = small_spec()

    assert SynthTaskSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SynthTaskSpec.from_dict({"colour": "blue"})


def test_written_files_are_readable(tmp_path: Path) -> None:
    task = generate_task(small_spec())

    written = write_task(task, tmp_path)

    assert set(written) == {"train.src", "train.tgt", "dev.src", "dev.tgt", "test.src", "test.tgt",
                            "train_terms", "test_terms"}
    assert len(ingest_termbase(written["test_terms"], "test")) == len(task.test_termbase)
    assert len(written["train.src"].read_text(encoding="utf-8").splitlines()) == 300
