"""Agreement metrics between models and against manual annotations."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

from ..errors import ContractError


def jaccard(a, b) -> float:
    """Set overlap |A∩B| / |A∪B|; two empty sets agree perfectly."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def pairwise_jaccard_mean(sets) -> float:
    """Mean Jaccard overlap over all unordered pairs of model sets."""
    sets = [set(s) for s in sets]
    if len(sets) < 2:
        raise ContractError("pairwise agreement needs at least two sets")
    pairs = list(combinations(sets, 2))
    return sum(jaccard(a, b) for a, b in pairs) / len(pairs)


def exact_agreement(sets) -> bool:
    """True when every model produced the identical set."""
    sets = [set(s) for s in sets]
    if len(sets) < 2:
        raise ContractError("exact agreement needs at least two sets")
    return all(s == sets[0] for s in sets[1:])


@dataclass(frozen=True)
class CorpusAgreement:
    """Inter-model agreement aggregated over a corpus of reports."""

    pairwise_jaccard_mean: float
    exact_agreement_rate: float
    n_reports: int


def corpus_agreement(per_report_sets) -> CorpusAgreement:
    """Aggregate per-report inter-model agreement over the corpus.

    ``per_report_sets`` is an iterable of per-report collections of
    model sets (plain sets or AbnormalitySet targets).
    """
    rows = [[set(getattr(s, "targets", s)) for s in sets]
            for sets in per_report_sets]
    if not rows:
        raise ContractError("corpus agreement needs at least one report")
    jac = sum(pairwise_jaccard_mean(r) for r in rows) / len(rows)
    exact = sum(exact_agreement(r) for r in rows) / len(rows)
    return CorpusAgreement(pairwise_jaccard_mean=jac,
                           exact_agreement_rate=exact, n_reports=len(rows))


@dataclass(frozen=True)
class SetMetrics:
    """One method's overlap with a manual annotation for one report."""

    jaccard: float
    precision: float
    recall: float


def set_metrics(predicted, manual) -> SetMetrics:
    """Jaccard, precision, and recall of a predicted set against truth.

    An empty predicted set has no false positives and an empty manual
    set leaves nothing to miss, so each degenerate ratio is 1.
    """
    predicted, manual = set(predicted), set(manual)
    hits = len(predicted & manual)
    precision = hits / len(predicted) if predicted else 1.0
    recall = hits / len(manual) if manual else 1.0
    return SetMetrics(jaccard=jaccard(predicted, manual),
                      precision=precision, recall=recall)


@dataclass(frozen=True)
class MethodAgreement:
    """A method's mean per-report overlap with manual annotations."""

    jaccard: float
    precision: float
    recall: float
    n_reports: int


def method_vs_manual(predicted_by_report: dict,
                     manual_by_report: dict) -> MethodAgreement:
    """Average per-report metrics over the manually annotated subset.

    Only reports present in ``manual_by_report`` contribute; a manual
    label without a prediction is a contract violation.
    """
    if not manual_by_report:
        raise ContractError("no manual annotations supplied")
    missing = set(manual_by_report) - set(predicted_by_report)
    if missing:
        raise ContractError(
            f"no predictions for annotated reports {sorted(missing)}")
    rows = [set_metrics(predicted_by_report[rid], manual_by_report[rid])
            for rid in sorted(manual_by_report)]
    n = len(rows)
    return MethodAgreement(
        jaccard=sum(r.jaccard for r in rows) / n,
        precision=sum(r.precision for r in rows) / n,
        recall=sum(r.recall for r in rows) / n, n_reports=n)
