"""
End-to-end experiments: data preparation, training, decoding and scoring.

A run owns its work directory for its duration (a `.lock` file) and leaves
every intermediate artifact in place, together with a manifest of the
configuration, seeds and checksums that reproduces it.
"""

import dataclasses
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .annotate import (
    AnnotationMode,
    EvalSet,
    FactoredSentence,
    MatchKind,
    ParallelCorpus,
    build_training_corpus,
    check_data_pool,
    extract_test_set,
    write_corpus,
)
from .config import ExperimentConfig, SystemMode, save_config
from .decode import (
    LatencyStats,
    beam_search,
    constrained_beam_search_dba,
    measure_latency,
    min_inputs_for,
)
from .evaluate import EvalReport, assemble_report, render_table, save_reports
from .model import EncodedPair, ModelScorer, TermTransformer, load_checkpoint, train
from .subword import BpeModel, Segmenter, Vocabulary, bpe_apply, bpe_decode, bpe_train, save_bpe
from .synthdata import generate_task, verify_zero_shot, write_task
from .termbase import (
    TermBase,
    build_frequency_list,
    filter_termbase,
    ingest_termbase,
    split_termbase,
    write_frequency_list,
    write_termbase,
)
from .utils import (
    PathLike,
    detokenize,
    file_checksum,
    read_lines,
    read_token_lines,
    tokenize,
    write_lines,
    write_token_lines,
)

logger = logging.getLogger(__name__)

LOCK_FILE = ".lock"
MANIFEST_FILE = "manifest.json"
PLAIN_MODEL = "plain"


class PipelineError(RuntimeError):
    """A pipeline stage failed; `stage` names it and `cause` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} failed: {cause}")


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info("Stage: %s", name)
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, e) from e


@contextmanager
def work_dir_lock(work_dir: PathLike) -> Iterator[Path]:
    """
    Hold the lock file of a work directory for the duration of a run.

    Raises:
        PipelineError: If another run holds the lock
    """
    directory = Path(work_dir).expanduser()
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError("lock", RuntimeError(f"{directory} is in use (remove {lock} if no run is active)"))
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
    finally:
        os.close(fd)
    try:
        yield directory
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class PreparedData:
    train_src: List[List[str]]
    train_tgt: List[List[str]]
    dev_src: List[List[str]]
    dev_tgt: List[List[str]]
    test_src: List[List[str]]
    test_ref: List[List[str]]
    train_termbase: TermBase
    test_termbase: TermBase
    test_set: Optional[EvalSet] = None


@dataclass
class SystemOutput:
    """Decoded test outputs of one system."""

    name: str
    outputs: List[List[str]]
    latency: Optional[LatencyStats] = None


@dataclass
class ExperimentResult:
    reports: List[EvalReport]
    work_dir: Path
    files: Dict[str, Path] = field(default_factory=dict)

    @property
    def table(self) -> str:
        return render_table(self.reports)


def _read_corpus_file(path: PathLike, tokenized: bool) -> List[List[str]]:
    if tokenized:
        return read_token_lines(path)
    return [tokenize(line) for line in read_lines(path)]


class Experiment:
    """
    Stage runner shared by the systems of one experiment.

    Data preparation, BPE and the plain model are computed once and reused by
    every system that needs them.
    """

    def __init__(self, config: ExperimentConfig, work_dir: Path):
        self.config = config
        self.work_dir = work_dir
        self.data: Optional[PreparedData] = None
        self.bpe: Optional[BpeModel] = None
        self.vocab: Optional[Vocabulary] = None
        self.segmenter: Optional[Segmenter] = None
        self.models: Dict[str, TermTransformer] = {}
        self.inputs: Dict[str, PathLike] = {}

    # Data

    def prepare(self) -> PreparedData:
        config = self.config
        with _stage("prepare"):
            if config.synth is not None:
                task = generate_task(config.synth)
                if not verify_zero_shot(task.train.targets, task.train_termbase, task.test_termbase):
                    raise ValueError("generated task violates the zero-shot split")
                written = write_task(task, self.work_dir / "data")
                self.inputs.update({f"data/{name}": path for name, path in written.items()})
                self.data = PreparedData(
                    task.train.sources, task.train.targets, task.dev.sources, task.dev.targets,
                    task.test.sources, task.test.targets, task.train_termbase, task.test_termbase,
                )
                frequency_corpus = written["train.src"]
                tokenized = True
            else:
                paths = config.data
                read = lambda p: _read_corpus_file(p, paths.tokenized)  # noqa: E731
                termbase = ingest_termbase(paths.termbase, paths.termbase_name)
                self.data = PreparedData(
                    read(paths.train_src), read(paths.train_tgt), read(paths.dev_src), read(paths.dev_tgt),
                    read(paths.test_src), read(paths.test_ref), termbase, termbase,
                )
                frequency_corpus = Path(paths.frequency_corpus or paths.train_src)
                tokenized = paths.tokenized
                self.inputs.update(paths.all_paths())

        with _stage("filter"):
            frequent = build_frequency_list(frequency_corpus, config.top_n, tokenized)
            write_frequency_list(frequent, self.work_dir / "termbase" / "frequency.tsv")
            self.data.train_termbase = filter_termbase(self.data.train_termbase, frequent, config.min_chars)
            if config.synth is None:
                self.data.test_termbase = self.data.train_termbase
            else:
                self.data.test_termbase = filter_termbase(self.data.test_termbase, frequent, config.min_chars)

        with _stage("split"):
            if config.synth is None:
                self.data.train_termbase, self.data.test_termbase = split_termbase(
                    self.data.train_termbase, config.test_fraction, config.seed,
                )
            else:
                logger.info("Synthetic task ships its own train/test term bases; not splitting")
            write_termbase(self.data.train_termbase, self.work_dir / "termbase" / "train.tsv")
            write_termbase(self.data.test_termbase, self.work_dir / "termbase" / "test.tsv")

        with _stage("annotate"):
            self.data.test_set = extract_test_set(
                self.data.test_src, self.data.test_ref, self.data.test_termbase,
                config.eval_regime, config.min_stem_len,
            )
            if not len(self.data.test_set):
                raise ValueError("no test sentence uses a test term in its reference")
            self.data.test_set.write(self.work_dir / "test")
        return self.data

    def training_corpus(self, mode: Optional[AnnotationMode]) -> ParallelCorpus:
        data = self.data
        with _stage("annotate"):
            if mode is None:
                corpus = ParallelCorpus.plain(data.train_src, data.train_tgt)
            else:
                corpus = build_training_corpus(
                    data.train_src, data.train_tgt, data.train_termbase, mode,
                    self.config.augment_fraction, self.config.seed,
                    min_stem_len=self.config.min_stem_len,
                )
            check_data_pool(corpus, data.train_src, data.train_tgt)
            write_corpus(corpus, self.work_dir / "corpus", mode.value if mode else PLAIN_MODEL)
        return corpus

    # Subwords

    def learn_subwords(self) -> None:
        data = self.data
        with _stage("bpe"):
            self.bpe = bpe_train(data.train_src, data.train_tgt, self.config.num_merges)
            save_bpe(self.bpe, self.work_dir / "bpe" / "bpe.codes")
            self.segmenter = Segmenter(self.bpe)
            segmented = [self.segment(s) for s in data.train_src + data.train_tgt + data.dev_src + data.dev_tgt]
            self.vocab = Vocabulary.build(segmented, self.bpe)
            write_lines(self.work_dir / "bpe" / "vocab.json", [self.vocab.to_json()])
            logger.info("Vocabulary: %d subwords", len(self.vocab))

    def segment(self, tokens: Sequence[str]) -> List[str]:
        return list(bpe_apply(FactoredSentence.plain(tokens), self.bpe, self.segmenter).subwords)

    def encode_source(self, sentence: FactoredSentence) -> Tuple[List[int], List[int]]:
        subwords = bpe_apply(sentence, self.bpe, self.segmenter)
        return self.vocab.encode(subwords.subwords), list(subwords.factors)

    def encode_pairs(self, sources: Sequence[FactoredSentence], targets: Sequence[Sequence[str]]) -> List[EncodedPair]:
        pairs = []
        for source, target in zip(sources, targets):
            ids, factors = self.encode_source(source)
            pairs.append(EncodedPair(tuple(ids), tuple(factors), tuple(self.vocab.encode(self.segment(target)))))
        return pairs

    # Model

    def model_for(self, mode: Optional[AnnotationMode]) -> TermTransformer:
        name = mode.value if mode else PLAIN_MODEL
        if name in self.models:
            return self.models[name]
        corpus = self.training_corpus(mode)
        with _stage("train"):
            model_config = dataclasses.replace(self.config.model, vocab_size=len(self.vocab))
            train_pairs = self.encode_pairs(corpus.sources, corpus.targets)
            dev_pairs = self.encode_pairs([FactoredSentence.plain(s) for s in self.data.dev_src], self.data.dev_tgt)
            checkpoint = self.work_dir / "models" / f"{name}.ckpt"
            state = train(model_config, train_pairs, dev_pairs, self.config.training, self.vocab, checkpoint)
            write_lines(
                self.work_dir / "models" / f"{name}.history.jsonl",
                (json.dumps(entry, sort_keys=True) for entry in state.history),
            )
            model, _ = load_checkpoint(checkpoint)
            self.models[name] = model
        return model

    # Decoding

    def decode_system(self, system: SystemMode, beam_size: int, name: str) -> SystemOutput:
        config = self.config
        test_set = self.data.test_set
        model = self.model_for(system.annotation)
        scorer = ModelScorer(model, self.vocab)
        max_src = model.config.max_seq_len

        with _stage("decode"):
            sources = []
            for sentence in test_set.annotated(system.annotation):
                ids, factors = self.encode_source(sentence)
                if len(ids) > max_src:
                    logger.warning("Truncating test input of %d subwords to %d", len(ids), max_src)
                    ids, factors = ids[:max_src], factors[:max_src]
                sources.append((ids, factors))

            constraints: List[List[List[int]]] = []
            for item in test_set.items:
                unique = sorted(set(item.gold_terms))
                constraints.append([self.vocab.encode(self.segment(term), strict=True) for term in unique])

            def translate(index: int) -> List[int]:
                source = sources[index]
                max_len = min(scorer.max_len, 2 * len(source[0]) + 10)
                if system == SystemMode.CONSTRAINED:
                    result = constrained_beam_search_dba(scorer, source, constraints[index], beam_size, max_len)
                else:
                    result = beam_search(scorer, source, beam_size, max_len)
                return result.best.output(scorer.eos_id)

            outputs = [bpe_decode(self.vocab.decode(translate(i))) for i in range(len(sources))]

            latency = None
            if config.measure_latency:
                if len(sources) >= min_inputs_for(config.latency_percentile):
                    latency = measure_latency(translate, list(range(len(sources))), config.latency_percentile)
                else:
                    logger.warning("Too few test sentences (%d) to measure P%g latency", len(sources),
                                   config.latency_percentile)

            write_token_lines(self.work_dir / "outputs" / f"{name}.out", outputs)
        return SystemOutput(name=name, outputs=outputs, latency=latency)

    def systems(self, mode: SystemMode) -> List[Tuple[str, int]]:
        """Report rows for a mode: (system name, beam size)."""
        rows = [(mode.value, self.config.beam_size)]
        if mode == SystemMode.CONSTRAINED:
            rows.extend((f"{mode.value}@{b}", b) for b in self.config.extra_beam_sizes if b != self.config.beam_size)
        return rows

    # Reporting

    def write_samples(self, outputs: Sequence[SystemOutput]) -> Path:
        test_set = self.data.test_set
        lines: List[str] = []
        for index, item in enumerate(test_set.items[: self.config.num_samples]):
            lines.append(f"[{index}]")
            lines.append(f"  source:    {detokenize(item.source)}")
            lines.append(f"  terms:     {'; '.join(' '.join(t) for t in item.gold_terms)}")
            lines.append(f"  reference: {detokenize(item.reference)}")
            for system in outputs:
                lines.append(f"  {system.name + ':':<10} {detokenize(system.outputs[index])}")
            lines.append("")
        return write_lines(self.work_dir / "samples.txt", lines)

    def write_manifest(self) -> Path:
        files = {name: file_checksum(path) for name, path in sorted(self.inputs.items())}
        for path in sorted(self.work_dir.rglob("*")):
            relative = path.relative_to(self.work_dir).as_posix()
            if path.is_file() and relative not in (LOCK_FILE, MANIFEST_FILE) and relative not in files:
                files[relative] = file_checksum(path)
        manifest = {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "seeds": self.config.seeds,
            "files": files,
        }
        output_file = self.work_dir / MANIFEST_FILE
        output_file.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return output_file


def run_experiments(config: ExperimentConfig, modes: Optional[Sequence[SystemMode]] = None) -> ExperimentResult:
    """
    Run several systems on one prepared data set and report them in one table.

    Args:
        config: Experiment configuration; config.mode is used when modes is None
        modes: Systems to run, in report order; the baseline (when included) is
            the reference for BLEU deltas and significance

    Returns:
        ExperimentResult: One report row per system (constrained runs add a row
        per extra beam size)

    Raises:
        PipelineError: Naming the stage that failed
    """
    modes = [SystemMode(m) for m in (modes or [config.mode])]
    if len(set(modes)) != len(modes):
        raise ValueError("Each system mode may only be run once per experiment")
    with _stage("config"):
        config.validate()

    with work_dir_lock(config.work_dir) as work_dir:
        save_config(config, work_dir / "config.json")
        experiment = Experiment(config, work_dir)
        experiment.prepare()
        experiment.learn_subwords()

        outputs: List[SystemOutput] = []
        for mode in modes:
            for name, beam_size in experiment.systems(mode):
                outputs.append(experiment.decode_system(mode, beam_size, name))

        test_set = experiment.data.test_set
        with _stage("evaluate"):
            baseline = SystemMode.BASELINE.value if SystemMode.BASELINE in modes else None
            reports = assemble_report(
                {o.name: o.outputs for o in outputs},
                test_set.references,
                test_set.gold_terms,
                latencies={o.name: o.latency for o in outputs if o.latency is not None},
                baseline=baseline,
                approximate=config.eval_regime == MatchKind.APPROXIMATE,
                resamples=config.bootstrap_resamples,
                seed=config.seed,
            )
            files = save_reports(reports, work_dir)
            files["samples"] = experiment.write_samples(outputs)
        files["manifest"] = experiment.write_manifest()

    logger.info("Experiment finished:\n%s", render_table(reports))
    return ExperimentResult(reports=reports, work_dir=work_dir, files=files)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Run the full chain for the configured system mode.

    filter, split, annotate, BPE, train, decode and evaluate; constrained mode
    trains a plain model and decodes with the test-term constraints.
    """
    return run_experiments(config, [config.mode])
