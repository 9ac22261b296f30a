"""Corpus-level orchestration of the two-stage report filter.

Reports are independent, so stage-one extraction calls (one per report
and model) and stage-two verification calls fan out across a thread
pool; results join on report id, which keeps the outcome identical for
every completion order. A failed extraction call degrades to an empty
model set with an audit entry, and a failed verification call leaves
that target undecided, so a flaky backend can cost recall policy-wise
but can never crash a run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..errors import BackendError, ContractError
from . import prompts
from .consensus import (ConsensusPartition, build_verification_tasks,
                        consensus_partition, finalize_report, majority_vote,
                        parse_verdict)
from .metrics import CorpusAgreement, corpus_agreement
from .records import (AbnormalitySet, RejectedRecord, abnormality_set,
                      parse_stage1)
from .registry import TargetRegistry


@dataclass(frozen=True)
class Report:
    """One free-text radiology report."""

    report_id: str
    language: str
    text: str


@dataclass(frozen=True)
class ReportOutcome:
    """Everything the filter decided about one report."""

    report_id: str
    model_sets: tuple
    partition: ConsensusPartition
    final: AbnormalitySet
    affirmed: frozenset
    rejected: frozenset
    undecided: frozenset
    majority: AbnormalitySet
    audits: tuple


@dataclass
class FilterRunResult:
    """Per-report outcomes plus corpus-level summaries."""

    outcomes: dict
    n_models: int
    undecided_policy: str
    stage1_agreement: CorpusAgreement | None
    final_by_report: dict = field(init=False)

    def __post_init__(self):
        self.final_by_report = {rid: set(o.final.targets)
                                for rid, o in self.outcomes.items()}

    @property
    def n_disputed(self) -> int:
        return sum(len(o.partition.disputed) for o in self.outcomes.values())

    @property
    def n_retained(self) -> int:
        return sum(len(o.final.targets & o.partition.disputed)
                   for o in self.outcomes.values())

    @property
    def retention(self) -> float | None:
        """Fraction of disputed targets the final sets kept."""
        if self.n_disputed == 0:
            return None
        return self.n_retained / self.n_disputed


def _stage1_call(backend, request, report, registry):
    try:
        raw = backend.complete(request)
    except BackendError as err:
        return (), (RejectedRecord(None, "backend_error", str(err)),)
    return parse_stage1(raw, report.text, registry)


def run_filter(reports, extraction_backends, verifier_backend,
               registry: TargetRegistry, *, threads: int = 4,
               undecided_policy: str = "abnormal") -> FilterRunResult:
    """Run both filter stages over a corpus of reports.

    ``extraction_backends`` is the ordered model ensemble; its length
    sets the unanimity bar. Returns per-report outcomes keyed by report
    id in corpus order.
    """
    reports = tuple(reports)
    backends = tuple(extraction_backends)
    if not reports:
        raise ContractError("empty report corpus")
    if not backends:
        raise ContractError("need at least one extraction backend")
    ids = [r.report_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate report ids in corpus")

    requests = {r.report_id: prompts.stage1_request(r.text, registry)
                for r in reports}
    stage1 = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = {
            (report.report_id, m): pool.submit(
                _stage1_call, backend, requests[report.report_id], report,
                registry)
            for report in reports
            for m, backend in enumerate(backends)}
        for key, fut in futures.items():
            stage1[key] = fut.result()

    partitions, tasks_by_report, per_report_records = {}, {}, {}
    audits_by_report = {}
    for report in reports:
        rid = report.report_id
        records_by_model = [stage1[(rid, m)][0] for m in range(len(backends))]
        audits_by_report[rid] = tuple(
            (m, audit) for m in range(len(backends))
            for audit in stage1[(rid, m)][1])
        sets = [abnormality_set(rid, records) for records in records_by_model]
        per_report_records[rid] = (records_by_model, sets)
        partitions[rid] = consensus_partition(sets, registry)
        tasks_by_report[rid] = build_verification_tasks(
            partitions[rid], records_by_model, registry)

    all_tasks = [t for rid in ids for t in tasks_by_report[rid]]
    verdicts = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = {
            (t.report_id, t.target_id): pool.submit(
                verifier_backend.complete, prompts.stage2_request(t))
            for t in all_tasks}
        for key, fut in futures.items():
            try:
                verdicts[key] = parse_verdict(fut.result())
            except BackendError:
                verdicts[key] = "undecided"

    outcomes = {}
    for report in reports:
        rid = report.report_id
        records_by_model, sets = per_report_records[rid]
        outcome = finalize_report(
            partitions[rid],
            {t.target_id: verdicts[(rid, t.target_id)]
             for t in tasks_by_report[rid]},
            undecided_policy)
        outcomes[rid] = ReportOutcome(
            report_id=rid, model_sets=tuple(sets),
            partition=partitions[rid], final=outcome.final,
            affirmed=outcome.affirmed, rejected=outcome.rejected,
            undecided=outcome.undecided, majority=majority_vote(sets),
            audits=audits_by_report[rid])

    agreement = None
    if len(backends) >= 2:
        agreement = corpus_agreement(
            [o.model_sets for o in outcomes.values()])
    return FilterRunResult(outcomes=outcomes, n_models=len(backends),
                           undecided_policy=undecided_policy,
                           stage1_agreement=agreement)
