from __future__ import annotations

import json
from pathlib import Path

import pytest

from termfactor.annotate import MatchKind
from termfactor.config import ExperimentConfig, SystemMode
from termfactor.model import ModelConfig, TrainingConfig
from termfactor.pipeline import (
    LOCK_FILE,
    PipelineError,
    run_experiment,
    run_experiments,
    work_dir_lock,
)
from termfactor.synthdata import SynthTaskSpec
from termfactor.utils import read_lines


def tiny_config(work_dir: Path, mode: SystemMode = SystemMode.BASELINE, **overrides) -> ExperimentConfig:
    spec = SynthTaskSpec(vocab_size=20, num_train_terms=10, held_out_terms=5, train_size=120, dev_size=12,
                         test_size=12, max_sentence_len=5, seed=2)
    settings = dict(
        work_dir=str(work_dir),
        model=ModelConfig(model_size=16, num_layers_enc=1, num_layers_dec=1, attention_heads=2,
                          feed_forward_hidden=32, factor_embed_size=4, max_seq_len=48),
        training=TrainingConfig(batch_size=16, min_epochs=1, max_epochs=2, warmup_steps=5),
        extra_beam_sizes=[],
    )
    settings.update(overrides)
    return ExperimentConfig.synthetic(mode, spec, **settings)


def test_baseline_run_writes_artifacts(tmp_path: Path) -> None:
    result = run_experiment(tiny_config(tmp_path / "work"))

    work = result.work_dir
    (report,) = result.reports
    assert report.system == "baseline"
    assert report.terms_total > 0 and report.term_use_rate is not None
    assert report.latency_p99 is None
    for name in ("config.json", "report.json", "report.txt", "samples.txt", "manifest.json",
                 "bpe/bpe.codes", "models/plain.ckpt", "outputs/baseline.out", "test/test.tok"):
        assert (work / name).exists(), name
    assert not (work / LOCK_FILE).exists()


def test_baseline_corpus_has_no_annotations(tmp_path: Path) -> None:
    result = run_experiment(tiny_config(tmp_path / "work"))

    factors = read_lines(result.work_dir / "corpus" / "plain.factors")
    assert factors
    assert all(set(line.split()) == {"0"} for line in factors)


def test_append_run_reports_term_use(tmp_path: Path) -> None:
    result = run_experiment(tiny_config(tmp_path / "work", SystemMode.APPEND))

    (report,) = result.reports
    assert report.system == "append"
    assert report.term_use_rate is not None
    factors = read_lines(result.work_dir / "corpus" / "append.factors")
    assert any("2" in line.split() for line in factors)


def test_identical_runs_give_identical_reports(tmp_path: Path) -> None:
    first = run_experiment(tiny_config(tmp_path / "a"))
    second = run_experiment(tiny_config(tmp_path / "b"))

    assert (first.work_dir / "report.json").read_bytes() == (second.work_dir / "report.json").read_bytes()
    assert (first.work_dir / "outputs" / "baseline.out").read_bytes() == \
        (second.work_dir / "outputs" / "baseline.out").read_bytes()


def test_all_modes_share_one_table(tmp_path: Path) -> None:
    config = tiny_config(tmp_path / "work", extra_beam_sizes=[8])

    result = run_experiments(config, list(SystemMode))

    names = [r.system for r in result.reports]
    assert names == ["baseline", "append", "replace", "constrained", "constrained@8"]
    assert all(r.baseline == "baseline" for r in result.reports[1:])
    assert result.reports[0].bleu_delta is None
    assert all(r.p_value_vs_baseline is not None for r in result.reports[1:])
    # Plain model is trained once and reused by the constrained rows
    assert sorted(p.name for p in (result.work_dir / "models").glob("*.ckpt")) == \
        ["append.ckpt", "plain.ckpt", "replace.ckpt"]
    assert len(result.table.splitlines()) == 7


def _assert_terms_emitted(work_dir: Path, system: str) -> None:
    outputs = read_lines(work_dir / "outputs" / f"{system}.out")
    terms = read_lines(work_dir / "test" / "test.terms.tsv")
    assert len(outputs) == len(terms)
    for output, line in zip(outputs, terms):
        # Subwords of a term are emitted contiguously, possibly glued to a neighbouring piece
        for term in line.split("\t"):
            assert term.replace(" ", "") in output.replace(" ", "")


def test_constrained_outputs_contain_test_terms(tmp_path: Path) -> None:
    result = run_experiment(tiny_config(tmp_path / "work", SystemMode.CONSTRAINED))

    (report,) = result.reports
    assert report.term_use_rate is not None
    _assert_terms_emitted(result.work_dir, "constrained")


def test_manifest_records_config_seeds_and_checksums(tmp_path: Path) -> None:
    config = tiny_config(tmp_path / "work")
    result = run_experiment(config)

    manifest = json.loads((result.work_dir / "manifest.json").read_text(encoding="utf-8"))

    assert manifest["config_hash"] == config.config_hash()
    assert manifest["seeds"] == config.seeds
    assert "report.json" in manifest["files"]
    assert "data/train.src" in manifest["files"]
    assert LOCK_FILE not in manifest["files"]


def test_busy_work_dir_is_refused(tmp_path: Path) -> None:
    work = tmp_path / "work"
    work.mkdir()
    (work / LOCK_FILE).write_text("123\n", encoding="utf-8")

    with pytest.raises(PipelineError) as excinfo:
        run_experiment(tiny_config(work))
    assert excinfo.value.stage == "lock"


def test_lock_is_released_after_failure(tmp_path: Path) -> None:
    with pytest.raises(RuntimeError):
        with work_dir_lock(tmp_path) as directory:
            assert (directory / LOCK_FILE).exists()
            raise RuntimeError("boom")

    assert not (tmp_path / LOCK_FILE).exists()


def test_invalid_config_names_the_stage(tmp_path: Path) -> None:
    with pytest.raises(PipelineError) as excinfo:
        run_experiment(ExperimentConfig(work_dir=str(tmp_path / "work")))

    assert excinfo.value.stage == "config"
    assert "config failed" in str(excinfo.value)


def test_failing_stage_is_reported(tmp_path: Path) -> None:
    config = tiny_config(tmp_path / "work", top_n=-1)

    with pytest.raises(PipelineError) as excinfo:
        run_experiment(config)

    assert excinfo.value.stage == "filter"
    assert isinstance(excinfo.value.cause, ValueError)


def test_duplicate_modes_are_rejected(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        run_experiments(tiny_config(tmp_path / "work"), [SystemMode.APPEND, SystemMode.APPEND])


def _real_data_config(tmp_path: Path, terms: list, test_ref: list) -> ExperimentConfig:
    data = tmp_path / "data"
    data.mkdir()
    train_src = ["the alternates shall be elected", "the arrest was made", "the term ends",
                 "all alternates vote", "an arrest followed", "one term only"] * 4
    train_tgt = ["die Stellvertreter werden gewählt", "die Festnahme erfolgte", "die Amtszeit endet",
                 "alle Stellvertreter stimmen", "eine Festnahme folgte", "nur eine Amtszeit"] * 4
    files = {
        "train.en": train_src, "train.de": train_tgt,
        "dev.en": train_src[:3], "dev.de": train_tgt[:3],
        "test.en": ["the arrest of alternates", "an arrest"],
        "test.de": test_ref,
        "terms.tsv": terms,
    }
    for name, lines in files.items():
        (data / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ExperimentConfig.from_dict({
        "work_dir": str(tmp_path / "work"),
        "mode": "constrained",
        "data": {
            "train_src": str(data / "train.en"), "train_tgt": str(data / "train.de"),
            "dev_src": str(data / "dev.en"), "dev_tgt": str(data / "dev.de"),
            "test_src": str(data / "test.en"), "test_ref": str(data / "test.de"),
            "termbase": str(data / "terms.tsv"),
        },
        "model": {"model_size": 16, "num_layers_enc": 1, "num_layers_dec": 1, "attention_heads": 2,
                  "feed_forward_hidden": 32, "factor_embed_size": 4, "max_seq_len": 32},
        "training": {"batch_size": 8, "min_epochs": 1, "max_epochs": 1},
        "top_n": 1,
        "num_merges": 50,
        "extra_beam_sizes": [],
    })


def test_real_data_run(tmp_path: Path) -> None:
    config = _real_data_config(
        tmp_path,
        ["alternates\tStellvertreter", "arrest\tFestnahme"],
        ["die Festnahme der Stellvertreter", "eine Festnahme"],
    )

    result = run_experiment(config)

    (report,) = result.reports
    assert report.terms_total >= 1
    _assert_terms_emitted(result.work_dir, "constrained")
    train_terms = read_lines(result.work_dir / "termbase" / "train.tsv")
    test_terms = read_lines(result.work_dir / "termbase" / "test.tsv")
    assert len(train_terms) == len(test_terms) == 1


def test_out_of_vocabulary_constraint_fails_decode(tmp_path: Path) -> None:
    config = _real_data_config(
        tmp_path,
        ["alternates\tΩvertreter", "arrest\tΩhaft"],
        ["die Ωhaft der Ωvertreter", "eine Ωhaft"],
    )

    with pytest.raises(PipelineError) as excinfo:
        run_experiment(config)

    assert excinfo.value.stage == "decode"
    assert "Out-of-vocabulary" in str(excinfo.value)


@pytest.mark.slow
def test_annotated_training_copies_unseen_terms(tmp_path: Path) -> None:
    config = ExperimentConfig.synthetic(SystemMode.BASELINE, SynthTaskSpec(seed=1), work_dir=str(tmp_path / "work"),
                                        extra_beam_sizes=[])

    result = run_experiments(config, list(SystemMode))

    rates = {r.system: r.term_use_rate for r in result.reports}
    assert rates["replace"] >= rates["append"] > rates["baseline"]
    assert rates["append"] >= 85.0
    assert rates["baseline"] <= rates["append"] - 20.0
    assert rates["constrained"] == 100.0


@pytest.mark.slow
def test_inflected_references_penalize_forced_base_forms(tmp_path: Path) -> None:
    spec = SynthTaskSpec(num_markers=3, marker_rate=0.5, seed=1)
    config = ExperimentConfig.synthetic(SystemMode.BASELINE, spec, work_dir=str(tmp_path / "work"),
                                        eval_regime=MatchKind.APPROXIMATE, extra_beam_sizes=[])

    result = run_experiments(config, [SystemMode.BASELINE, SystemMode.APPEND, SystemMode.CONSTRAINED])

    scores = {r.system: r.bleu for r in result.reports}
    assert scores["append"] >= scores["baseline"]
    assert scores["constrained"] < scores["baseline"]
