import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .annotate import AnnotationMode, FactoredSentence, annotate_sentence, find_matches, pair_factors
from .config import ExperimentConfig, SystemMode, load_config
from .decode import beam_search, constrained_beam_search_dba
from .evaluate import bleu, paired_bootstrap, term_use_rate
from .model import EncodedPair, ModelScorer, load_checkpoint, train
from .pipeline import run_experiments
from .subword import Segmenter, Vocabulary, bpe_apply, bpe_apply_tokens, bpe_decode, bpe_train, load_bpe, save_bpe
from .synthdata import SynthTaskSpec, generate_task, verify_zero_shot, write_task
from .termbase import (
    build_frequency_list,
    filter_termbase,
    ingest_termbase,
    split_termbase,
    write_frequency_list,
    write_termbase,
)
from .utils import read_lines, read_token_lines, write_lines


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="termfactor",
        description="Terminology-aware neural machine translation: term bases, annotation, training and decoding",
    )

    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"termfactor {__version__}",
        help="Show the termfactor version and exit",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Show debug logging",
    )
    parser.add_argument(
        "-q",
        "--quiet",
        action="store_true",
        help="Only show warnings and errors",
    )

    # Options every subcommand accepts
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="JSON configuration file (merged over ~/.config/termfactor/config.json)",
    )
    common.add_argument(
        "--seed",
        type=int,
        help="Random seed (default: from configuration, else 1)",
    )

    subparsers = parser.add_subparsers(dest="command", metavar="<command>")
    subparsers.required = False

    # Ingest subcommand - read a TSV term base
    ingest_parser = subparsers.add_parser(
        "ingest",
        parents=[common],
        help="Read and normalize a term base",
        description="Read a source<TAB>target term base, collapse duplicates and write it back",
    )
    ingest_parser.add_argument("termbase", help="Term base TSV file")
    ingest_parser.add_argument("--name", default="termbase", help="Term base name (default: termbase)")
    ingest_parser.add_argument("-o", "--output", help="Output TSV file (default: stdout)")
    ingest_parser.set_defaults(func=cmd_ingest)

    # Filter subcommand - drop frequent and short entries
    filter_parser = subparsers.add_parser(
        "filter",
        parents=[common],
        help="Remove frequent-word and short entries from a term base",
        description="Drop single-word entries among the corpus' most frequent words and entries "
                    "with too few source characters",
    )
    filter_parser.add_argument("termbase", help="Term base TSV file")
    filter_parser.add_argument("--corpus", required=True, help="Source-side corpus for the frequency list")
    filter_parser.add_argument("--top-n", type=int, help="Size of the frequency list (default: 500)")
    filter_parser.add_argument("--min-chars", type=int, help="Minimum source characters (default: 2)")
    filter_parser.add_argument("--frequency-output", help="Also write the frequency list to this file")
    filter_parser.add_argument("-o", "--output", help="Output TSV file (default: stdout)")
    filter_parser.set_defaults(func=cmd_filter)

    # Split subcommand - train/test term bases with disjoint sources
    split_parser = subparsers.add_parser(
        "split",
        parents=[common],
        help="Split a term base into train and test halves",
        description="Split a term base so that no source phrase appears in both halves",
    )
    split_parser.add_argument("termbase", help="Term base TSV file")
    split_parser.add_argument("--test-fraction", type=float, help="Fraction of source groups for test (default: 0.5)")
    split_parser.add_argument("--train-output", required=True, help="Train half TSV file")
    split_parser.add_argument("--test-output", required=True, help="Test half TSV file")
    split_parser.set_defaults(func=cmd_split)

    # Annotate subcommand - inline target terms with factors
    annotate_parser = subparsers.add_parser(
        "annotate",
        parents=[common],
        help="Annotate tokenized sentences with term translations",
        description="Write one `tokens<TAB>factors` line per input sentence",
    )
    annotate_parser.add_argument("input", help="Tokenized source sentences, one per line")
    annotate_parser.add_argument("--termbase", required=True, help="Term base TSV file")
    annotate_parser.add_argument(
        "--mode",
        choices=[m.value for m in AnnotationMode],
        default=AnnotationMode.APPEND.value,
        help="Append target terms after source terms, or replace them (default: append)",
    )
    annotate_parser.add_argument("--approximate", action="store_true", help="Allow stem matches on the last term token")
    annotate_parser.add_argument("-o", "--output", help="Output file (default: stdout)")
    annotate_parser.set_defaults(func=cmd_annotate)

    # BPE subcommands
    bpe_train_parser = subparsers.add_parser(
        "bpe-train",
        parents=[common],
        help="Learn joint BPE merges",
        description="Learn byte-pair merges jointly on source and target corpora",
    )
    bpe_train_parser.add_argument("source", help="Tokenized source corpus")
    bpe_train_parser.add_argument("target", help="Tokenized target corpus")
    bpe_train_parser.add_argument("--num-merges", type=int, help="Number of merges (default: 4000)")
    bpe_train_parser.add_argument("-o", "--output", required=True, help="BPE codes file")
    bpe_train_parser.set_defaults(func=cmd_bpe_train)

    bpe_apply_parser = subparsers.add_parser(
        "bpe-apply",
        parents=[common],
        help="Segment sentences into subwords",
        description="Segment tokenized (or `tokens<TAB>factors`) lines, broadcasting factors to subwords",
    )
    bpe_apply_parser.add_argument("input", help="Input file")
    bpe_apply_parser.add_argument("--codes", required=True, help="BPE codes file")
    bpe_apply_parser.add_argument("-o", "--output", help="Output file (default: stdout)")
    bpe_apply_parser.set_defaults(func=cmd_bpe_apply)

    # Synth subcommand - generate a synthetic task
    synth_parser = subparsers.add_parser(
        "synth",
        parents=[common],
        help="Generate a synthetic translation task with held-out terms",
        description="Generate train/dev/test corpora and train/test term bases (settings from the config's `synth`)",
    )
    synth_parser.add_argument("-o", "--output-dir", required=True, help="Output directory")
    synth_parser.set_defaults(func=cmd_synth)

    # Train subcommand
    train_parser = subparsers.add_parser(
        "train",
        parents=[common],
        help="Train a factored transformer",
        description="Train a model on a (possibly annotated) corpus with dev-loss early stopping",
    )
    train_parser.add_argument("--codes", required=True, help="BPE codes file")
    train_parser.add_argument("--source", required=True, help="Training sources (tokens or tokens<TAB>factors)")
    train_parser.add_argument("--target", required=True, help="Training references")
    train_parser.add_argument("--dev-source", required=True, help="Development sources")
    train_parser.add_argument("--dev-target", required=True, help="Development references")
    train_parser.add_argument("-o", "--output", required=True, help="Checkpoint file")
    train_parser.set_defaults(func=cmd_train)

    # Translate subcommands
    for name, func, text in (
        ("translate", cmd_translate, "Translate with beam search"),
        ("constrained-translate", cmd_constrained_translate, "Translate with constrained beam search"),
    ):
        translate_parser = subparsers.add_parser(name, parents=[common], help=text, description=text)
        translate_parser.add_argument("input", help="Sources (tokens or tokens<TAB>factors)")
        translate_parser.add_argument("--model", required=True, help="Checkpoint file")
        translate_parser.add_argument("--codes", required=True, help="BPE codes file")
        translate_parser.add_argument("--beam-size", type=int, help="Beam size (default: 5)")
        translate_parser.add_argument("--nbest", type=int, default=1, help="Hypotheses per sentence (default: 1)")
        translate_parser.add_argument("-o", "--output", help="Output file (default: stdout)")
        if name == "constrained-translate":
            translate_parser.add_argument(
                "--constraints",
                required=True,
                help="`sentence<TAB>term<TAB>term...` per input line (empty or missing lines mean no constraints)",
            )
        translate_parser.set_defaults(func=func)

    # Evaluate subcommand
    evaluate_parser = subparsers.add_parser(
        "evaluate",
        parents=[common],
        help="Score outputs: BLEU, term use rate and significance",
        description="Score tokenized outputs against references",
    )
    evaluate_parser.add_argument("hypotheses", help="System outputs")
    evaluate_parser.add_argument("--references", required=True, help="References")
    evaluate_parser.add_argument("--terms", help="Gold target terms per sentence, tab-separated")
    evaluate_parser.add_argument("--baseline", help="Baseline outputs for a paired bootstrap test")
    evaluate_parser.add_argument("--approximate", action="store_true", help="Approximate term matching")
    evaluate_parser.set_defaults(func=cmd_evaluate)

    # Experiment subcommand
    experiment_parser = subparsers.add_parser(
        "experiment",
        parents=[common],
        help="Run an end-to-end experiment",
        description="Filter, split, annotate, learn BPE, train, decode and evaluate",
    )
    experiment_parser.add_argument(
        "--mode",
        action="append",
        choices=[m.value for m in SystemMode],
        help="System to run; repeat for several (default: the configured mode)",
    )
    experiment_parser.add_argument("--all-modes", action="store_true", help="Run all four systems")
    experiment_parser.add_argument("--work-dir", help="Work directory (default: from configuration)")
    experiment_parser.add_argument("--synthetic", action="store_true", help="Use a synthetic task")
    experiment_parser.set_defaults(func=cmd_experiment)

    return parser


def _settings(
    args: argparse.Namespace,
    overrides: Optional[Dict[str, Any]] = None,
    defaults: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    overrides = dict(overrides or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None}, defaults)


def _write_or_print(lines: Sequence[str], output: Optional[str]) -> None:
    if output:
        path = write_lines(output, lines)
        print(f"✓ Wrote {len(lines)} line(s) to {path}", file=sys.stderr)
    else:
        for line in lines:
            print(line)


def _read_factored(path: str) -> List[FactoredSentence]:
    """Read plain token lines or `tokens<TAB>factors` lines."""
    sentences = []
    for line in read_lines(path):
        if "\t" in line:
            tokens, factors = line.split("\t", 1)
            sentences.extend(pair_factors([tokens.split()], [[int(f) for f in factors.split()]]))
        else:
            sentences.append(FactoredSentence.plain(line.split()))
    return sentences


def _read_phrase_lists(path: str) -> List[List[Tuple[str, ...]]]:
    return [[tuple(field.split()) for field in line.split("\t") if field.strip()] for line in read_lines(path)]


def _read_constraints(path: str, sentences: Sequence[FactoredSentence]) -> List[List[Tuple[str, ...]]]:
    """
    Read `sentence<TAB>term<TAB>term...` lines, one per input sentence.

    The first field must repeat the input sentence. Empty or missing lines
    mean no constraints.
    """
    constraints: List[List[Tuple[str, ...]]] = []
    for number, line in enumerate(read_lines(path), start=1):
        if number > len(sentences):
            raise ValueError(f"{path}:{number}: more constraint lines than input sentences")
        if not line.strip():
            constraints.append([])
            continue
        sentence, *terms = line.split("\t")
        if tuple(sentence.split()) != tuple(sentences[number - 1].tokens):
            raise ValueError(f"{path}:{number}: sentence field does not match input line {number}")
        constraints.append([tuple(term.split()) for term in terms if term.strip()])
    return constraints


def cmd_ingest(args: argparse.Namespace) -> int:
    """Handle the 'ingest' subcommand."""
    try:
        termbase = ingest_termbase(args.termbase, args.name)
        if args.output:
            path = write_termbase(termbase, args.output)
            print(f"✓ Wrote {len(termbase)} entries to {path}", file=sys.stderr)
        else:
            for entry in termbase:
                print(f"{entry.source_text}\t{entry.target_text}")
        return 0
    except Exception as e:
        print(f"Error: ingest: {e}", file=sys.stderr)
        return 1


def cmd_filter(args: argparse.Namespace) -> int:
    """Handle the 'filter' subcommand."""
    try:
        config = _settings(args, {"top_n": args.top_n, "min_chars": args.min_chars})
        termbase = ingest_termbase(args.termbase, Path(args.termbase).stem)
        frequent = build_frequency_list(args.corpus, config.top_n)
        if args.frequency_output:
            write_frequency_list(frequent, args.frequency_output)
        filtered = filter_termbase(termbase, frequent, config.min_chars)
        _write_or_print([f"{e.source_text}\t{e.target_text}" for e in filtered], args.output)
        print(f"Kept {len(filtered)} of {len(termbase)} entries", file=sys.stderr)
        return 0
    except Exception as e:
        print(f"Error: filter: {e}", file=sys.stderr)
        return 1


def cmd_split(args: argparse.Namespace) -> int:
    """Handle the 'split' subcommand."""
    try:
        config = _settings(args, {"test_fraction": args.test_fraction})
        termbase = ingest_termbase(args.termbase, Path(args.termbase).stem)
        train_tb, test_tb = split_termbase(termbase, config.test_fraction, config.seed)
        write_termbase(train_tb, args.train_output)
        write_termbase(test_tb, args.test_output)
        print(f"✓ Split {len(termbase)} entries: {len(train_tb)} train, {len(test_tb)} test", file=sys.stderr)
        return 0
    except Exception as e:
        print(f"Error: split: {e}", file=sys.stderr)
        return 1


def cmd_annotate(args: argparse.Namespace) -> int:
    """Handle the 'annotate' subcommand."""
    try:
        config = _settings(args)
        termbase = ingest_termbase(args.termbase, Path(args.termbase).stem)
        lines = []
        annotated = 0
        for sentence in read_token_lines(args.input):
            matches = find_matches(sentence, termbase, args.approximate, config.min_stem_len)
            annotated += bool(matches)
            factored = annotate_sentence(sentence, matches, AnnotationMode(args.mode))
            lines.append(" ".join(factored.tokens) + "\t" + " ".join(str(f) for f in factored.factors))
        _write_or_print(lines, args.output)
        print(f"Annotated {annotated} of {len(lines)} sentence(s)", file=sys.stderr)
        return 0
    except Exception as e:
        print(f"Error: annotate: {e}", file=sys.stderr)
        return 1


def cmd_bpe_train(args: argparse.Namespace) -> int:
    """Handle the 'bpe-train' subcommand."""
    try:
        config = _settings(args, {"num_merges": args.num_merges})
        model = bpe_train(read_token_lines(args.source), read_token_lines(args.target), config.num_merges)
        path = save_bpe(model, args.output)
        print(f"✓ Wrote {len(model.merges)} merges to {path}", file=sys.stderr)
        return 0
    except Exception as e:
        print(f"Error: bpe-train: {e}", file=sys.stderr)
        return 1


def cmd_bpe_apply(args: argparse.Namespace) -> int:
    """Handle the 'bpe-apply' subcommand."""
    try:
        model = load_bpe(args.codes)
        segmenter = Segmenter(model)
        lines = []
        for sentence in _read_factored(args.input):
            segmented = bpe_apply(sentence, model, segmenter)
            line = " ".join(segmented.subwords)
            if any(segmented.factors):
                line += "\t" + " ".join(str(f) for f in segmented.factors)
            lines.append(line)
        _write_or_print(lines, args.output)
        return 0
    except Exception as e:
        print(f"Error: bpe-apply: {e}", file=sys.stderr)
        return 1


def cmd_synth(args: argparse.Namespace) -> int:
    """Handle the 'synth' subcommand."""
    try:
        config = _settings(args)
        spec = config.synth or SynthTaskSpec()
        if args.seed is not None:
            spec = SynthTaskSpec.from_dict({**spec.to_dict(), "seed": args.seed})
        task = generate_task(spec)
        written = write_task(task, args.output_dir)
        if not verify_zero_shot(task.train.targets, task.train_termbase, task.test_termbase):
            raise RuntimeError("generated task violates the zero-shot split")
        print(
            f"✓ Wrote {len(written)} files to {args.output_dir} "
            f"({len(task.train)} train, {len(task.dev)} dev, {len(task.test)} test sentences, "
            f"{len(task.test_termbase)} held-out terms)",
            file=sys.stderr,
        )
        return 0
    except Exception as e:
        print(f"Error: synth: {e}", file=sys.stderr)
        return 1


def cmd_train(args: argparse.Namespace) -> int:
    """Handle the 'train' subcommand."""
    try:
        config = _settings(args)
        if args.seed is not None:
            config.model.seed = args.seed
        bpe = load_bpe(args.codes)
        segmenter = Segmenter(bpe)

        def encode(sources: List[FactoredSentence], targets: List[List[str]]) -> List[Tuple[Any, List[str]]]:
            return [
                (bpe_apply(s, bpe, segmenter), bpe_apply_tokens(t, bpe, segmenter))
                for s, t in zip(sources, targets)
            ]

        train_pairs = encode(_read_factored(args.source), read_token_lines(args.target))
        dev_pairs = encode(_read_factored(args.dev_source), read_token_lines(args.dev_target))
        vocab = Vocabulary.build(
            [s.subwords for s, _ in train_pairs + dev_pairs] + [t for _, t in train_pairs + dev_pairs], bpe,
        )

        def to_ids(pairs: List[Tuple[Any, List[str]]]) -> List[EncodedPair]:
            return [
                EncodedPair(tuple(vocab.encode(s.subwords)), tuple(s.factors), tuple(vocab.encode(t)))
                for s, t in pairs
            ]

        model_config = config.model
        model_config.vocab_size = len(vocab)
        state = train(model_config, to_ids(train_pairs), to_ids(dev_pairs), config.training, vocab, args.output)
        print(
            f"✓ Trained {state.epoch} epoch(s), best dev loss {state.best_dev_loss:.4f} "
            f"at epoch {state.best_epoch}; checkpoint {args.output}",
            file=sys.stderr,
        )
        return 0
    except Exception as e:
        print(f"Error: train: {e}", file=sys.stderr)
        return 1


def _translate(args: argparse.Namespace, constrained: bool) -> int:
    config = _settings(args, {"beam_size": args.beam_size})
    model, vocab = load_checkpoint(args.model)
    bpe = load_bpe(args.codes)
    segmenter = Segmenter(bpe)
    scorer = ModelScorer(model, vocab)
    sentences = _read_factored(args.input)
    constraints = _read_constraints(args.constraints, sentences) if constrained else None

    lines = []
    for index, sentence in enumerate(sentences):
        segmented = bpe_apply(sentence, bpe, segmenter)
        source = (vocab.encode(segmented.subwords), list(segmented.factors))
        max_len = min(scorer.max_len, 2 * len(segmented) + 10)
        if constraints is None:
            result = beam_search(scorer, source, config.beam_size, max_len, nbest=args.nbest)
        else:
            phrases = constraints[index] if index < len(constraints) else []
            ids = [vocab.encode(bpe_apply_tokens(p, bpe, segmenter), strict=True) for p in phrases]
            result = constrained_beam_search_dba(scorer, source, ids, config.beam_size, max_len, nbest=args.nbest)
        for hyp in result.nbest:
            text = " ".join(bpe_decode(vocab.decode(hyp.output(scorer.eos_id))))
            lines.append(f"{index}\t{hyp.score():.4f}\t{text}" if args.nbest > 1 else text)
    _write_or_print(lines, args.output)
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    """Handle the 'translate' subcommand."""
    try:
        return _translate(args, False)
    except Exception as e:
        print(f"Error: translate: {e}", file=sys.stderr)
        return 1


def cmd_constrained_translate(args: argparse.Namespace) -> int:
    """Handle the 'constrained-translate' subcommand."""
    try:
        return _translate(args, True)
    except Exception as e:
        print(f"Error: constrained-translate: {e}", file=sys.stderr)
        return 1


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Handle the 'evaluate' subcommand."""
    try:
        config = _settings(args)
        outputs = read_token_lines(args.hypotheses)
        references = read_token_lines(args.references)
        scored = bleu(outputs, references)
        print(f"BLEU: {scored.score:.2f} "
              f"({'/'.join(f'{p:.1f}' for p in scored.precisions)}, BP={scored.brevity_penalty:.3f})")
        if args.terms:
            gold = _read_phrase_lists(args.terms)
            print(f"Term use rate: {term_use_rate(outputs, gold, args.approximate, config.min_stem_len):.1f}%")
        if args.baseline:
            p_value = paired_bootstrap(outputs, read_token_lines(args.baseline), references,
                                       config.bootstrap_resamples, config.seed)
            print(f"p-value vs baseline: {p_value:.4f}")
        return 0
    except Exception as e:
        print(f"Error: evaluate: {e}", file=sys.stderr)
        return 1


def cmd_experiment(args: argparse.Namespace) -> int:
    """Handle the 'experiment' subcommand."""
    try:
        overrides: Dict[str, Any] = {"work_dir": args.work_dir}
        config = _settings(args, overrides)
        if args.synthetic and config.data is None:
            # Synthetic presets sit underneath every configured setting
            spec = config.synth or SynthTaskSpec(seed=config.seed)
            config = _settings(args, overrides, ExperimentConfig.synthetic(config.mode, spec).to_dict())
        modes = [SystemMode(m) for m in args.mode] if args.mode else None
        if args.all_modes:
            modes = list(SystemMode)
        result = run_experiments(config, modes)
        print(result.table)
        print(f"\n✓ Reports written to {result.work_dir}", file=sys.stderr)
        return 0
    except Exception as e:
        print(f"Error: experiment: {e}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if hasattr(args, "func"):
        return int(args.func(args))

    # No subcommand: show help
    parser.print_help()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
