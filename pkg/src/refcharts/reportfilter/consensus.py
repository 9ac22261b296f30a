"""Consensus partition, pooled-evidence verification, and majority vote.

Targets every model flags are kept without further review; targets no
model flags are never revisited. Only the disagreements go to a second
stage, which sees the pooled, deduplicated evidence sentences stripped
of model identities and nothing else, so its verdict rests on what was
actually cited rather than on who cited it or on re-reading the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from ..errors import BackendError, ContractError
from .records import AbnormalitySet, normalize_space
from .registry import TargetRegistry

VERDICTS = ("abnormal", "not_abnormal", "undecided")
UNDECIDED_POLICIES = ("abnormal", "not_abnormal")


@dataclass(frozen=True)
class ConsensusPartition:
    """Per-report split of registry targets by how many models flagged them."""

    report_id: str
    n_models: int
    unanimous: frozenset
    disputed: frozenset
    unflagged: frozenset

    @property
    def union(self) -> frozenset:
        return self.unanimous | self.disputed


@dataclass(frozen=True)
class VerificationTask:
    """One disputed target with its pooled anonymous evidence.

    ``report_id`` exists purely to join the verdict back onto the
    report; :meth:`payload` is all the verifier ever sees.
    """

    report_id: str
    target_id: int
    canonical_name: str
    pooled_evidence: tuple

    def payload(self) -> dict:
        return {"structure_id": self.target_id,
                "canonical_name": self.canonical_name,
                "evidence": list(self.pooled_evidence)}


def _common_report(sets) -> str:
    ids = {s.report_id for s in sets}
    if len(ids) != 1:
        raise ContractError(
            f"sets must refer to one report, got {sorted(ids)}")
    return next(iter(ids))


def consensus_partition(sets, registry: TargetRegistry,
                        n_models: int | None = None) -> ConsensusPartition:
    """Split targets into unanimous, disputed, and unflagged.

    A model whose output was rejected wholesale still participates with
    an empty set; ``n_models`` may assert the expected ensemble size.
    """
    sets = tuple(sets)
    if not sets:
        raise ContractError("need at least one abnormality set")
    report_id = _common_report(sets)
    if n_models is not None and len(sets) != n_models:
        raise ContractError(
            f"expected {n_models} model sets, got {len(sets)}")
    n = len(sets)
    counts = {}
    for s in sets:
        for t in s.targets:
            counts[t] = counts.get(t, 0) + 1
    unanimous = frozenset(t for t, c in counts.items() if c == n)
    disputed = frozenset(t for t, c in counts.items() if 0 < c < n)
    unflagged = frozenset(registry.ids) - unanimous - disputed
    return ConsensusPartition(report_id=report_id, n_models=n,
                              unanimous=unanimous, disputed=disputed,
                              unflagged=unflagged)


def build_verification_tasks(partition: ConsensusPartition,
                             records_by_model, registry: TargetRegistry):
    """One task per disputed target, pooling evidence across all models.

    Evidence sentences are whitespace-normalized, deduplicated, and
    sorted, so rebuilding the tasks from the same records is a no-op and
    the order models answered in leaves no trace.
    """
    tasks = []
    for target_id in sorted(partition.disputed):
        pooled = sorted({normalize_space(r.evidence)
                         for records in records_by_model for r in records
                         if r.target_id == target_id})
        if not pooled:
            raise ContractError(
                f"disputed target {target_id} has no evidence on record")
        tasks.append(VerificationTask(
            report_id=partition.report_id, target_id=target_id,
            canonical_name=registry.get(target_id).canonical_name,
            pooled_evidence=tuple(pooled)))
    return tuple(tasks)


def parse_verdict(raw_output: str) -> str:
    """Read a verifier response; anything unusable counts as undecided."""
    try:
        parsed = json.loads(raw_output)
    except (json.JSONDecodeError, TypeError):
        return "undecided"
    if not isinstance(parsed, dict):
        return "undecided"
    verdict = parsed.get("verdict")
    return verdict if verdict in ("abnormal", "not_abnormal") else "undecided"


@dataclass(frozen=True)
class VerificationOutcome:
    """Final per-report decision with the stage-two bookkeeping."""

    report_id: str
    final: AbnormalitySet
    affirmed: frozenset
    rejected: frozenset
    undecided: frozenset

    @property
    def n_disputed(self) -> int:
        return len(self.affirmed | self.rejected | self.undecided)


def finalize_report(partition: ConsensusPartition, verdicts: dict,
                    undecided_policy: str = "abnormal") -> VerificationOutcome:
    """Combine unanimous targets with the verifier's verdicts.

    ``verdicts`` maps each disputed target id to one of ``abnormal``,
    ``not_abnormal``, or ``undecided``; undecided targets follow the
    configured policy, which defaults to keeping them because the
    application is recall-first pathology exclusion.
    """
    if undecided_policy not in UNDECIDED_POLICIES:
        raise ContractError(
            f"undecided_policy must be one of {UNDECIDED_POLICIES}")
    missing = partition.disputed - set(verdicts)
    if missing:
        raise ContractError(
            f"missing verdicts for disputed targets {sorted(missing)}")
    affirmed, rejected, undecided = set(), set(), set()
    for target_id in partition.disputed:
        verdict = verdicts[target_id]
        if verdict not in VERDICTS:
            raise ContractError(f"unknown verdict {verdict!r}")
        {"abnormal": affirmed, "not_abnormal": rejected,
         "undecided": undecided}[verdict].add(target_id)
    final = set(partition.unanimous) | affirmed
    if undecided_policy == "abnormal":
        final |= undecided
    return VerificationOutcome(
        report_id=partition.report_id,
        final=AbnormalitySet(partition.report_id, frozenset(final)),
        affirmed=frozenset(affirmed), rejected=frozenset(rejected),
        undecided=frozenset(undecided))


def verify_disputed(partition: ConsensusPartition, tasks, backend, *,
                    prompt_builder, undecided_policy: str = "abnormal"):
    """Run stage-two verification for one report's disputed targets.

    ``prompt_builder`` turns a task into the backend request; a backend
    failure marks that target undecided instead of aborting the report.
    """
    verdicts = {}
    for task in tasks:
        try:
            verdicts[task.target_id] = parse_verdict(
                backend.complete(prompt_builder(task)))
        except BackendError:
            verdicts[task.target_id] = "undecided"
    return finalize_report(partition, verdicts, undecided_policy)


def majority_vote(sets) -> AbnormalitySet:
    """Targets flagged by strictly more than half of the models."""
    sets = tuple(sets)
    if not sets:
        raise ContractError("need at least one abnormality set")
    report_id = _common_report(sets)
    n = len(sets)
    counts = {}
    for s in sets:
        for t in s.targets:
            counts[t] = counts.get(t, 0) + 1
    kept = frozenset(t for t, c in counts.items() if 2 * c > n)
    return AbnormalitySet(report_id, kept)
