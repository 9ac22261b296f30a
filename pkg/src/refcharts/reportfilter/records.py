"""Stage-one extraction records and their validation against the report.

Every flagged target must cite a supporting sentence copied verbatim
from the report; records that fail that grounding check, reference an
unknown target, or describe a normal finding are dropped with an audit
reason rather than crashing the run. Matching is whitespace-normalized
but case-preserving, since models copy sentences faithfully yet tend to
reflow the surrounding whitespace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .registry import TargetRegistry

EXTRACTION_STATUSES = ("abnormal", "normal")


def normalize_space(text: str) -> str:
    """Collapse all runs of whitespace to single spaces and strip ends."""
    return " ".join(text.split())


@dataclass(frozen=True)
class ExtractionRecord:
    """One abnormal-target claim with its verbatim evidence sentence."""

    target_id: int
    canonical_name: str
    report_name: str
    evidence: str
    status: str | None = None


@dataclass(frozen=True)
class RejectedRecord:
    """A dropped stage-one entry, with its position and the reason."""

    position: int | None
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class AbnormalitySet:
    """The set of abnormal target ids one method assigns to one report."""

    report_id: str
    targets: frozenset

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))


def is_grounded(evidence: str, report_text: str) -> bool:
    """True when the evidence appears verbatim in the report text."""
    needle = normalize_space(evidence)
    return bool(needle) and needle in normalize_space(report_text)


def _coerce_record(entry, position):
    if not isinstance(entry, dict):
        return None, RejectedRecord(position, "malformed", "not an object")
    try:
        target_id = entry["structure_id"]
        canonical_name = entry["canonical_name"]
        report_name = entry["report_name"]
        evidence = entry["evidence"]
    except KeyError as missing:
        return None, RejectedRecord(position, "malformed",
                                    f"missing field {missing.args[0]}")
    if not isinstance(target_id, int) or isinstance(target_id, bool):
        return None, RejectedRecord(position, "malformed",
                                    "structure_id must be an integer")
    if not all(isinstance(v, str)
               for v in (canonical_name, report_name, evidence)):
        return None, RejectedRecord(position, "malformed",
                                    "text fields must be strings")
    status = entry.get("status")
    if status is not None and status not in EXTRACTION_STATUSES:
        return None, RejectedRecord(position, "malformed",
                                    f"unknown status {status!r}")
    record = ExtractionRecord(target_id=target_id,
                              canonical_name=canonical_name,
                              report_name=report_name, evidence=evidence,
                              status=status)
    return record, None


def parse_stage1(raw_output: str, report_text: str,
                 registry: TargetRegistry):
    """Parse one model's stage-one output into validated records.

    Returns ``(records, audit)``. An output that is not a JSON list
    yields no records and a single audit entry; individual entries are
    dropped with reasons ``malformed``, ``unknown_target``,
    ``ungrounded``, or ``status_normal``. Robustness is the point here:
    nothing a model emits may crash the run.
    """
    try:
        parsed = json.loads(raw_output)
    except (json.JSONDecodeError, TypeError) as err:
        return (), (RejectedRecord(None, "unparseable_output", str(err)),)
    if not isinstance(parsed, list):
        return (), (RejectedRecord(None, "unparseable_output",
                                   "expected a JSON list"),)
    records, audit = [], []
    for position, entry in enumerate(parsed):
        record, rejection = _coerce_record(entry, position)
        if rejection is not None:
            audit.append(rejection)
            continue
        if record.target_id not in registry:
            audit.append(RejectedRecord(
                position, "unknown_target",
                f"no target with id {record.target_id}"))
            continue
        if record.status == "normal":
            audit.append(RejectedRecord(
                position, "status_normal",
                f"target {record.target_id} reported normal"))
            continue
        if not is_grounded(record.evidence, report_text):
            audit.append(RejectedRecord(
                position, "ungrounded",
                f"evidence for target {record.target_id} is not a verbatim "
                "report sentence"))
            continue
        records.append(record)
    return tuple(records), tuple(audit)


def abnormality_set(report_id: str, records) -> AbnormalitySet:
    """Collapse validated records into the per-report abnormal id set."""
    return AbnormalitySet(report_id, frozenset(r.target_id for r in records))
