"""Cross-verified two-stage abnormality filtering of radiology reports.

An ensemble of text models first extracts evidence-grounded abnormal
target claims per report; unanimous findings pass, untouchable, while
disputes go to a pooled-evidence verifier that never sees the report or
the models' identities. The result is a per-report set of abnormal
canonical targets used to exclude measurements from reference cohorts.
"""

from .backends import (CompletionRequest, FixtureBackend, HttpBackend,
                       RecordingBackend, ScriptedBackend)
from .consensus import (ConsensusPartition, VerificationTask,
                        build_verification_tasks, consensus_partition,
                        finalize_report, majority_vote, parse_verdict,
                        verify_disputed)
from .metrics import (CorpusAgreement, MethodAgreement, SetMetrics,
                      corpus_agreement, exact_agreement, jaccard,
                      method_vs_manual, pairwise_jaccard_mean, set_metrics)
from .records import (AbnormalitySet, ExtractionRecord, RejectedRecord,
                      abnormality_set, is_grounded, normalize_space,
                      parse_stage1)
from .registry import (CanonicalTarget, TargetRegistry, load_registry,
                       registry_from_obj)
from .runner import FilterRunResult, Report, ReportOutcome, run_filter

__all__ = [
    "AbnormalitySet", "CanonicalTarget", "CompletionRequest",
    "ConsensusPartition", "CorpusAgreement", "ExtractionRecord",
    "FilterRunResult", "FixtureBackend", "HttpBackend", "MethodAgreement",
    "RecordingBackend", "RejectedRecord", "Report", "ReportOutcome",
    "ScriptedBackend", "SetMetrics", "TargetRegistry", "VerificationTask",
    "abnormality_set", "build_verification_tasks", "consensus_partition",
    "corpus_agreement", "exact_agreement", "finalize_report", "is_grounded",
    "jaccard", "load_registry", "majority_vote", "method_vs_manual",
    "normalize_space", "pairwise_jaccard_mean", "parse_stage1",
    "parse_verdict", "registry_from_obj", "run_filter", "set_metrics",
    "verify_disputed",
]
