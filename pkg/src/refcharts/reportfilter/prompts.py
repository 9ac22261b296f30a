"""Prompt and output-schema builders for both filtering stages.

The wording is versioned so recorded fixture responses stay valid:
request hashes cover the full prompt text, and any edit here must bump
``PROMPT_VERSION`` and re-record fixtures.
"""

from __future__ import annotations

from .backends import CompletionRequest
from .consensus import VerificationTask

PROMPT_VERSION = "1"

_STAGE1_SYSTEM = """\
You review one radiology report (prompt version {version}).

Identify every anatomical target from the numbered list below that the
report describes as abnormal. For each abnormal target, emit one JSON
object with these fields:
  structure_id: the integer id from the list below
  canonical_name: the listed name for that id
  report_name: the structure's name as the report words it
  evidence: one supporting sentence copied verbatim from the report
  status: "abnormal"

Rules:
- Use only ids from the list; never invent structures.
- The evidence sentence must be copied exactly; do not paraphrase.
- Do not flag targets the report describes as normal or does not mention.
- Output a JSON list of the objects, and nothing else. An unremarkable
  report yields an empty list.

Targets:
{targets}"""

_STAGE2_SYSTEM = """\
You adjudicate one disputed imaging finding (prompt version {version}).

You are given an anatomical target and sentences cited from a radiology
report. You do not see the report itself. Answer "abnormal" only if both
conditions hold:
  1. At least one cited sentence unambiguously refers to the same
     anatomy as the named target.
  2. That sentence states a pathological or non-physiologic finding.
Otherwise answer "not_abnormal".

Output a JSON object {{"verdict": "abnormal"}} or
{{"verdict": "not_abnormal"}}, and nothing else."""


def stage1_schema() -> dict:
    """Guided-decoding schema for stage-one extraction output."""
    return {
        "type": "array",
        "items": {
            "type": "object",
            "properties": {
                "structure_id": {"type": "integer"},
                "canonical_name": {"type": "string"},
                "report_name": {"type": "string"},
                "evidence": {"type": "string"},
                "status": {"type": "string",
                           "enum": ["abnormal", "normal"]},
            },
            "required": ["structure_id", "canonical_name", "report_name",
                         "evidence"],
            "additionalProperties": False,
        },
    }


def stage2_schema() -> dict:
    """Guided-decoding schema for stage-two verdicts."""
    return {
        "type": "object",
        "properties": {
            "verdict": {"type": "string",
                        "enum": ["abnormal", "not_abnormal"]},
        },
        "required": ["verdict"],
        "additionalProperties": False,
    }


def _target_lines(registry) -> str:
    return "\n".join(f"  {t.target_id}: {t.canonical_name}"
                     for t in registry.targets)


def stage1_request(report_text: str, registry) -> CompletionRequest:
    """Build the extraction request for one report."""
    system = _STAGE1_SYSTEM.format(version=PROMPT_VERSION,
                                   targets=_target_lines(registry))
    return CompletionRequest(system=system, user=report_text,
                             schema=stage1_schema())


def stage2_request(task: VerificationTask) -> CompletionRequest:
    """Build the verification request for one disputed target.

    The user content is exactly the task payload: target id, canonical
    name, and the pooled evidence sentences. No report text and no
    model identities are included.
    """
    payload = task.payload()
    lines = [f"Target {payload['structure_id']}: {payload['canonical_name']}",
             "Cited sentences:"]
    lines += [f"- {sentence}" for sentence in payload["evidence"]]
    return CompletionRequest(
        system=_STAGE2_SYSTEM.format(version=PROMPT_VERSION),
        user="\n".join(lines), schema=stage2_schema())
