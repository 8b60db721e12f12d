"""
Scoring: term use rate, corpus BLEU, paired bootstrap significance and reports.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sacrebleu.metrics import BLEU

from .annotate import DEFAULT_MIN_STEM_LEN, phrase_occurs
from .decode import LatencyStats
from .utils import PathLike, format_seconds, write_lines

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05
BETTER_MARK = "↑"
WORSE_MARK = "↓"


def _bleu_metric() -> BLEU:
    # Inputs are already tokenized; scores are case-sensitive on our tokens
    return BLEU(tokenize="none", smooth_method="none", force=True)


def _joined(sentences: Sequence[Sequence[str]]) -> List[str]:
    return [" ".join(tokens) for tokens in sentences]


def _check_aligned(name: str, a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ValueError(f"{name}: {len(a)} outputs vs {len(b)} references")


def term_use_rate(
    outputs: Sequence[Sequence[str]],
    gold_terms: Sequence[Sequence[Sequence[str]]],
    approximate: bool = False,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> float:
    """
    Percentage of term annotations whose target phrase appears in the output.

    Each annotation counts once and is satisfied by any occurrence of its
    phrase. With approximate=True the last phrase token may match a longer
    output token sharing its stem.

    Raises:
        ValueError: If the inputs are misaligned or hold no annotations
    """
    used, total = count_terms_used(outputs, gold_terms, approximate, min_stem_len)
    if total == 0:
        raise ValueError("Term use rate is undefined without term annotations")
    return 100.0 * used / total


def count_terms_used(
    outputs: Sequence[Sequence[str]],
    gold_terms: Sequence[Sequence[Sequence[str]]],
    approximate: bool = False,
    min_stem_len: int = DEFAULT_MIN_STEM_LEN,
) -> Tuple[int, int]:
    """Return (terms used, terms total)."""
    _check_aligned("term_use_rate", outputs, gold_terms)
    used = total = 0
    for output, terms in zip(outputs, gold_terms):
        for term in terms:
            total += 1
            if phrase_occurs(output, term, approximate, min_stem_len):
                used += 1
    return used, total


@dataclass
class BleuResult:
    score: float
    precisions: List[float]
    brevity_penalty: float
    sys_len: int
    ref_len: int


def bleu(outputs: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> BleuResult:
    """
    Corpus-level BLEU-4 on tokenized sentences, without smoothing.

    Raises:
        ValueError: If outputs and references are misaligned or empty
    """
    _check_aligned("bleu", outputs, refs)
    if not outputs:
        raise ValueError("bleu: empty corpus")
    result = _bleu_metric().corpus_score(_joined(outputs), [_joined(refs)])
    # exp(log(100)) is not exactly 100 in floating point
    return BleuResult(
        score=round(float(result.score), 10),
        precisions=[float(p) for p in result.precisions],
        brevity_penalty=float(result.bp),
        sys_len=int(result.sys_len),
        ref_len=int(result.ref_len),
    )


def paired_bootstrap(
    outputs_a: Sequence[Sequence[str]],
    outputs_b: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    resamples: int = 1000,
    seed: int = 1,
) -> float:
    """
    Paired bootstrap resampling over sentence indices.

    Corpus BLEU of both systems is recomputed on each resample from cached
    per-sentence statistics. The p-value is the fraction of resamples in
    which the system that wins on the full corpus does not win; it is 1.0 when
    the two systems tie on the full corpus.

    Args:
        outputs_a: First system's tokenized outputs
        outputs_b: Second system's tokenized outputs
        refs: Tokenized references
        resamples: Number of bootstrap samples (at least 1000)
        seed: Base seed; resample i draws from default_rng([seed, i])

    Returns:
        float: One-sided p-value
    """
    _check_aligned("paired_bootstrap", outputs_a, refs)
    _check_aligned("paired_bootstrap", outputs_b, refs)
    if resamples < 1000:
        raise ValueError(f"resamples must be >= 1000, got {resamples}")
    if not refs:
        raise ValueError("paired_bootstrap: empty corpus")

    # Private sacrebleu 2.x helpers; pyproject.toml pins the major version
    metric = _bleu_metric()
    references = [_joined(refs)]
    stats_a = np.asarray(metric._extract_corpus_statistics(_joined(outputs_a), references), dtype=np.int64)
    stats_b = np.asarray(metric._extract_corpus_statistics(_joined(outputs_b), references), dtype=np.int64)

    def score(stats: np.ndarray) -> float:
        return float(metric._compute_score_from_stats(stats.sum(axis=0).tolist()).score)

    observed_a, observed_b = score(stats_a), score(stats_b)
    if observed_a == observed_b:
        return 1.0
    a_wins = observed_a > observed_b

    n = len(refs)
    losses = 0
    for i in range(resamples):
        indices = np.random.default_rng([seed, i]).integers(0, n, size=n)
        sample_a, sample_b = score(stats_a[indices]), score(stats_b[indices])
        if (sample_a <= sample_b) if a_wins else (sample_b <= sample_a):
            losses += 1
    return losses / resamples


@dataclass
class EvalReport:
    system: str
    term_use_rate: Optional[float]
    terms_used: int
    terms_total: int
    bleu: float
    precisions: List[float] = field(default_factory=list)
    brevity_penalty: float = 1.0
    p_value_vs_baseline: Optional[float] = None
    latency_p50: Optional[float] = None
    latency_p99: Optional[float] = None
    baseline: Optional[str] = None
    bleu_delta: Optional[float] = None

    def __post_init__(self):
        if self.term_use_rate is not None and not 0.0 <= self.term_use_rate <= 100.0:
            raise ValueError(f"term_use_rate out of range: {self.term_use_rate}")
        if self.terms_used > self.terms_total:
            raise ValueError("terms_used exceeds terms_total")
        if not 0.0 <= self.bleu <= 100.0:
            raise ValueError(f"bleu out of range: {self.bleu}")

    @property
    def mark(self) -> str:
        """Significance mark against the baseline, or an empty string."""
        if self.p_value_vs_baseline is None or self.p_value_vs_baseline >= SIGNIFICANCE_LEVEL:
            return ""
        if self.bleu_delta is None or self.bleu_delta == 0:
            return ""
        return BETTER_MARK if self.bleu_delta > 0 else WORSE_MARK

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown EvalReport field(s): {', '.join(unknown)}")
        return cls(**data)


def assemble_report(
    runs: Mapping[str, Sequence[Sequence[str]]],
    references: Sequence[Sequence[str]],
    gold_terms: Sequence[Sequence[Sequence[str]]],
    latencies: Optional[Mapping[str, LatencyStats]] = None,
    baseline: Optional[str] = None,
    approximate: bool = False,
    resamples: int = 1000,
    seed: int = 1,
) -> List[EvalReport]:
    """
    Score every system on a shared test set.

    Args:
        runs: System name -> tokenized outputs, in report order
        references: Tokenized references
        gold_terms: Gold target phrases per sentence
        latencies: Optional system name -> latency stats; missing systems
            get no latency fields
        baseline: Name of the system the others are compared to
        approximate: Score term use with approximate matching
        resamples: Bootstrap samples for the significance test
        seed: Bootstrap seed

    Returns:
        One EvalReport per system, in the order of runs

    Raises:
        ValueError: If systems disagree on the test set size or the baseline is unknown
    """
    latencies = latencies or {}
    if baseline is not None and baseline not in runs:
        raise ValueError(f"Baseline system '{baseline}' is not among the runs: {', '.join(runs)}")
    for name, outputs in runs.items():
        if len(outputs) != len(references):
            raise ValueError(
                f"System '{name}' has {len(outputs)} outputs for a test set of {len(references)} sentences"
            )
    _check_aligned("assemble_report", gold_terms, references)

    reports: List[EvalReport] = []
    baseline_bleu = bleu(runs[baseline], references).score if baseline is not None else None
    for name, outputs in runs.items():
        scored = bleu(outputs, references)
        used, total = count_terms_used(outputs, gold_terms, approximate)
        report = EvalReport(
            system=name,
            term_use_rate=100.0 * used / total if total else None,
            terms_used=used,
            terms_total=total,
            bleu=scored.score,
            precisions=scored.precisions,
            brevity_penalty=scored.brevity_penalty,
        )
        stats = latencies.get(name)
        if stats is not None:
            report.latency_p50 = stats.median
            report.latency_p99 = stats.value
        if baseline is not None and name != baseline:
            report.baseline = baseline
            report.bleu_delta = scored.score - baseline_bleu
            report.p_value_vs_baseline = paired_bootstrap(outputs, runs[baseline], references, resamples, seed)
        reports.append(report)
        logger.info("Scored %s: BLEU %.2f, term use %s", name, report.bleu, report.term_use_rate)
    return reports


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table: system, term use, BLEU (Δ), latency."""
    header = ["System", "Term%", "BLEU (Δ)", "P50", "P99"]
    rows = [header]
    for r in reports:
        term = f"{r.term_use_rate:.1f}" if r.term_use_rate is not None else "N/A"
        score = f"{r.bleu:.1f}"
        if r.bleu_delta is not None:
            score += f" ({r.bleu_delta:+.1f}){r.mark}"
        rows.append([r.system, term, score, format_seconds(r.latency_p50), format_seconds(r.latency_p99)])

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for index, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if index == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def reports_from_json(payload: str) -> List[EvalReport]:
    return [EvalReport.from_dict(item) for item in json.loads(payload)]


def save_reports(reports: Sequence[EvalReport], directory: PathLike, name: str = "report") -> Dict[str, Path]:
    """Write `<name>.json` and `<name>.txt` into directory."""
    directory = Path(directory)
    json_file = directory / f"{name}.json"
    json_file.parent.mkdir(parents=True, exist_ok=True)
    json_file.write_text(reports_to_json(reports), encoding="utf-8")
    return {"json": json_file, "text": write_lines(directory / f"{name}.txt", render_table(reports).splitlines())}


def load_reports(path: PathLike) -> List[EvalReport]:
    return reports_from_json(Path(path).read_text(encoding="utf-8"))
