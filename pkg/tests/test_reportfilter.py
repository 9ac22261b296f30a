"""Tests for the two-stage report filter."""

import numpy as np
import pytest

from refcharts.errors import BackendError, ContractError
from refcharts.reportfilter import (AbnormalitySet, ScriptedBackend,
                                    abnormality_set,
                                    build_verification_tasks,
                                    consensus_partition, corpus_agreement,
                                    exact_agreement, finalize_report,
                                    is_grounded, jaccard, load_registry,
                                    majority_vote, method_vs_manual,
                                    normalize_space, pairwise_jaccard_mean,
                                    parse_stage1, parse_verdict,
                                    registry_from_obj, run_filter,
                                    set_metrics, verify_disputed)
from refcharts.reportfilter import demo, prompts


@pytest.fixture(scope="module")
def registry():
    return load_registry()


class TestRegistry:

    def test_bundled_counts(self, registry):
        assert len(registry) == 39
        members = [m for t in registry.targets for m in t.member_structures]
        assert len(members) == 106
        assert len(set(members)) == 106

    def test_lung_merges_all_lobes(self, registry):
        lung = next(t for t in registry.targets if t.canonical_name == "lung")
        assert len(lung.member_structures) == 5
        assert registry.target_of("lung_middle_lobe_right") == lung.target_id

    def test_vertebrae_and_ribs_consolidated(self, registry):
        vert = next(t for t in registry.targets
                    if t.canonical_name == "vertebrae")
        ribs = next(t for t in registry.targets if t.canonical_name == "ribs")
        assert len(vert.member_structures) == 24
        assert len(ribs.member_structures) == 24

    def test_lookups_and_errors(self, registry):
        liver = registry.get(registry.target_of("liver"))
        assert liver.canonical_name == "liver"
        assert 4 in registry
        assert 999 not in registry
        with pytest.raises(ContractError, match="unknown target"):
            registry.get(999)
        with pytest.raises(ContractError, match="not a member"):
            registry.target_of("flux_capacitor")

    def test_validation_rejects_duplicates(self, registry):
        obj = {"format_version": 1, "targets": [
            {"target_id": 1, "canonical_name": "a",
             "member_structures": ["x"]},
            {"target_id": 1, "canonical_name": "b",
             "member_structures": ["y"]}]}
        with pytest.raises(ContractError, match="ids must be unique"):
            registry_from_obj(obj).validate()
        obj["targets"][1]["target_id"] = 2
        obj["targets"][1]["member_structures"] = ["x"]
        with pytest.raises(ContractError, match="exactly one target"):
            registry_from_obj(obj).validate()

    def test_version_check(self):
        with pytest.raises(ContractError, match="format_version"):
            registry_from_obj({"format_version": 9, "targets": []})

    def test_expected_count_mismatch(self, registry):
        sub = registry_from_obj({
            "format_version": 1,
            "targets": [{"target_id": 1, "canonical_name": "a",
                         "member_structures": ["x"]}]})
        with pytest.raises(ContractError, match="expected 39"):
            sub.validate(expect_targets=39)


class TestGrounding:

    def test_normalize_space(self):
        assert normalize_space("  a \n\t b  c ") == "a b c"

    def test_verbatim_sentence_is_grounded(self):
        report = "CT chest. The liver is enlarged. No effusion."
        assert is_grounded("The liver is enlarged.", report)

    def test_whitespace_reflow_still_grounded(self):
        report = "The liver\n   is enlarged."
        assert is_grounded("The liver is\nenlarged.", report)

    def test_paraphrase_not_grounded(self):
        assert not is_grounded("Liver enlargement.", "The liver is enlarged.")

    def test_case_is_preserved(self):
        assert not is_grounded("the liver is enlarged.",
                               "The liver is enlarged.")

    def test_empty_evidence_not_grounded(self):
        assert not is_grounded("   ", "anything at all")


class TestParseStage1:
    REPORT = "CT abdomen. The liver contains a lesion. The spleen is normal."

    def _raw(self, entries):
        import json
        return json.dumps(entries)

    def test_valid_record_kept(self, registry):
        raw = self._raw([{"structure_id": 4, "canonical_name": "liver",
                          "report_name": "liver",
                          "evidence": "The liver contains a lesion.",
                          "status": "abnormal"}])
        records, audit = parse_stage1(raw, self.REPORT, registry)
        assert len(records) == 1 and not audit
        assert records[0].target_id == 4

    def test_garbage_output_audited(self, registry):
        records, audit = parse_stage1("not json {{{", self.REPORT, registry)
        assert records == ()
        assert audit[0].reason == "unparseable_output"

    def test_non_list_output_audited(self, registry):
        records, audit = parse_stage1('{"a": 1}', self.REPORT, registry)
        assert records == ()
        assert audit[0].reason == "unparseable_output"

    def test_drop_reasons(self, registry):
        raw = self._raw([
            {"structure_id": 4, "canonical_name": "liver",
             "report_name": "liver", "evidence": "The liver has a mass."},
            {"structure_id": 999, "canonical_name": "x", "report_name": "x",
             "evidence": "The liver contains a lesion."},
            {"structure_id": 1, "canonical_name": "spleen",
             "report_name": "spleen", "evidence": "The spleen is normal.",
             "status": "normal"},
            {"structure_id": "4", "canonical_name": "liver",
             "report_name": "liver",
             "evidence": "The liver contains a lesion."},
            {"canonical_name": "liver", "report_name": "liver",
             "evidence": "The liver contains a lesion."},
            "not an object"])
        records, audit = parse_stage1(raw, self.REPORT, registry)
        assert records == ()
        assert [a.reason for a in audit] == [
            "ungrounded", "unknown_target", "status_normal", "malformed",
            "malformed", "malformed"]
        assert [a.position for a in audit] == [0, 1, 2, 3, 4, 5]

    def test_bool_structure_id_rejected(self, registry):
        raw = self._raw([{"structure_id": True, "canonical_name": "liver",
                          "report_name": "liver",
                          "evidence": "The liver contains a lesion."}])
        records, audit = parse_stage1(raw, self.REPORT, registry)
        assert records == () and audit[0].reason == "malformed"

    def test_abnormality_set_dedupes(self, registry):
        raw = self._raw([{"structure_id": 4, "canonical_name": "liver",
                          "report_name": "liver",
                          "evidence": "The liver contains a lesion."}] * 3)
        records, _ = parse_stage1(raw, self.REPORT, registry)
        assert abnormality_set("r", records).targets == frozenset({4})


class TestConsensus:

    def _sets(self, *targets_per_model, rid="r"):
        return [AbnormalitySet(rid, frozenset(t)) for t in targets_per_model]

    def test_partition_counts(self, registry):
        part = consensus_partition(
            self._sets({4, 8}, {4, 8}, {4}, {4}, {4}), registry)
        assert part.unanimous == frozenset({4})
        assert part.disputed == frozenset({8})
        assert part.unflagged == frozenset(registry.ids) - {4, 8}
        assert part.union == frozenset({4, 8})

    def test_partition_is_a_partition(self, registry):
        part = consensus_partition(self._sets({1, 2}, {2, 3}, {2}), registry)
        pieces = (part.unanimous, part.disputed, part.unflagged)
        assert frozenset().union(*pieces) == frozenset(registry.ids)
        assert sum(len(p) for p in pieces) == len(registry.ids)

    def test_differing_reports_rejected(self, registry):
        sets = [AbnormalitySet("a", frozenset()),
                AbnormalitySet("b", frozenset())]
        with pytest.raises(ContractError, match="one report"):
            consensus_partition(sets, registry)

    def test_n_models_enforced(self, registry):
        with pytest.raises(ContractError, match="expected 5"):
            consensus_partition(self._sets({1}, {1}), registry, n_models=5)

    def test_majority_vote_examples(self):
        vote = majority_vote(self._sets({1}, {1}, {1}, set(), set()))
        assert vote.targets == frozenset({1})
        vote = majority_vote(self._sets({1}, {1}, set(), set(), set()))
        assert vote.targets == frozenset()

    def test_majority_vote_matches_counting_oracle(self, registry):
        rng = np.random.default_rng(42)
        ids = registry.ids
        for _ in range(100):
            n = int(rng.integers(1, 8))
            sets = [frozenset(int(t) for t in
                              rng.choice(ids, size=rng.integers(0, 6),
                                         replace=False))
                    for _ in range(n)]
            vote = majority_vote(self._sets(*sets))
            expect = {t for t in ids
                      if sum(t in s for s in sets) > n / 2}
            assert vote.targets == frozenset(expect)

    def test_verdict_parsing(self):
        assert parse_verdict('{"verdict": "abnormal"}') == "abnormal"
        assert parse_verdict('{"verdict": "not_abnormal"}') == "not_abnormal"
        assert parse_verdict('{"verdict": "maybe"}') == "undecided"
        assert parse_verdict("garbage") == "undecided"
        assert parse_verdict("[1,2]") == "undecided"

    def test_finalize_policies(self, registry):
        part = consensus_partition(
            self._sets({1, 2, 3}, {1, 2}, {1, 3}), registry)
        verdicts = {2: "abnormal", 3: "undecided"}
        keep = finalize_report(part, verdicts, "abnormal")
        drop = finalize_report(part, verdicts, "not_abnormal")
        assert keep.final.targets == frozenset({1, 2, 3})
        assert drop.final.targets == frozenset({1, 2})
        assert keep.undecided == frozenset({3})
        with pytest.raises(ContractError, match="missing verdicts"):
            finalize_report(part, {2: "abnormal"})
        with pytest.raises(ContractError, match="undecided_policy"):
            finalize_report(part, verdicts, "shrug")

    def test_task_pooling_dedupes_and_sorts(self, registry):
        from refcharts.reportfilter import ExtractionRecord
        part = consensus_partition(self._sets({4}, set()), registry)
        records = [
            [ExtractionRecord(4, "liver", "liver", "B sentence here."),
             ExtractionRecord(4, "liver", "liver", "A   sentence\nhere.")],
            [ExtractionRecord(4, "liver", "liver", "A sentence here.")],
        ]
        tasks = build_verification_tasks(part, records, registry)
        assert len(tasks) == 1
        assert tasks[0].pooled_evidence == ("A sentence here.",
                                            "B sentence here.")
        again = build_verification_tasks(part, records, registry)
        assert again == tasks

    def test_verify_disputed_backend_failure_is_undecided(self, registry):
        part = consensus_partition(self._sets({4}, set()), registry)
        from refcharts.reportfilter import ExtractionRecord
        records = [[ExtractionRecord(4, "liver", "liver", "Bad liver.")], []]
        tasks = build_verification_tasks(part, records, registry)

        def explode(request):
            raise BackendError("down")

        outcome = verify_disputed(part, tasks, ScriptedBackend(explode),
                                  prompt_builder=prompts.stage2_request)
        assert outcome.undecided == frozenset({4})
        assert outcome.final.targets == frozenset({4})


class TestMetrics:

    def test_jaccard_arithmetic(self):
        assert jaccard({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)
        assert jaccard(set(), set()) == 1.0
        assert jaccard({"a"}, set()) == 0.0

    def test_pairwise_mean_and_exact(self):
        sets = [{1, 2}, {1, 2}, {2, 3}]
        expect = (1.0 + 1 / 3 + 1 / 3) / 3
        assert pairwise_jaccard_mean(sets) == pytest.approx(expect)
        assert not exact_agreement(sets)
        assert exact_agreement([{1}, {1}, {1}])
        with pytest.raises(ContractError, match="two sets"):
            pairwise_jaccard_mean([{1}])

    def test_set_metrics_arithmetic(self):
        m = set_metrics({"a", "b"}, {"b", "c"})
        assert m.precision == 0.5 and m.recall == 0.5
        assert m.jaccard == pytest.approx(1 / 3)
        empty = set_metrics(set(), set())
        assert empty.precision == empty.recall == empty.jaccard == 1.0
        assert set_metrics(set(), {"a"}).precision == 1.0
        assert set_metrics({"a"}, set()).recall == 1.0

    def test_method_vs_manual_requires_predictions(self):
        with pytest.raises(ContractError, match="no predictions"):
            method_vs_manual({}, {"r1": {1}})
        with pytest.raises(ContractError, match="manual"):
            method_vs_manual({"r1": {1}}, {})


@pytest.fixture(scope="module")
def result(registry):
    return run_filter(demo.demo_corpus(), demo.demo_extraction_backends(),
                      demo.demo_verifier_backend(), registry, threads=4)


class TestDemoCorpus:

    def test_outcomes_match_hand_oracle(self, result):
        expected = demo.expected_outcomes()
        assert set(result.outcomes) == set(expected)
        for rid, want in expected.items():
            got = result.outcomes[rid]
            assert got.partition.unanimous == want["unanimous"], rid
            assert got.partition.disputed == want["disputed"], rid
            assert got.final.targets == want["final"], rid
            assert got.majority.targets == want["majority"], rid

    def test_retention_fraction(self, result):
        assert result.n_disputed == 10
        assert result.n_retained == 7
        assert result.retention == pytest.approx(0.7)

    def test_audit_reasons_logged(self, result):
        logged = {(rid, m, audit.reason)
                  for rid, outcome in result.outcomes.items()
                  for m, audit in outcome.audits}
        assert demo.expected_audit_reasons() <= logged

    def test_stage1_agreement_hand_value(self, result):
        per_report = [1.0, 0.4, 0.6, 19 / 30, 1.0, 0.6, 0.6, 0.8, 0.4, 0.7]
        expect = sum(per_report) / 10
        got = result.stage1_agreement
        assert got.pairwise_jaccard_mean == pytest.approx(expect)
        assert got.exact_agreement_rate == pytest.approx(0.2)
        assert got.n_reports == 10

    def test_manual_metrics_hand_value(self, result):
        agreement = method_vs_manual(result.final_by_report,
                                     demo.manual_labels())
        assert agreement.jaccard == pytest.approx((1 + 1 + 1 + 0.75) / 4)
        assert agreement.precision == pytest.approx(1.0)
        assert agreement.recall == pytest.approx((1 + 1 + 1 + 0.75) / 4)

    def test_monotonicity_on_demo(self, result):
        for outcome in result.outcomes.values():
            union = frozenset().union(*(s.targets for s in outcome.model_sets))
            assert outcome.partition.unanimous <= outcome.final.targets
            assert outcome.final.targets <= union

    def test_bit_reproducible_across_thread_counts(self, registry, result):
        rerun = run_filter(demo.demo_corpus(),
                           demo.demo_extraction_backends(),
                           demo.demo_verifier_backend(), registry, threads=1)
        for rid, outcome in result.outcomes.items():
            other = rerun.outcomes[rid]
            assert outcome.final == other.final
            assert outcome.model_sets == other.model_sets
            assert outcome.partition == other.partition
        assert rerun.retention == result.retention

    def test_verifier_blindness(self, registry, result):
        # rebuild the tasks the runner built and inspect their payloads
        backends = demo.demo_extraction_backends()
        for report in demo.demo_corpus():
            req = prompts.stage1_request(report.text, registry)
            records_by_model = []
            for backend in backends:
                raw = backend.complete(req)
                records, _ = parse_stage1(raw, report.text, registry)
                records_by_model.append(records)
            sets = [abnormality_set(report.report_id, r)
                    for r in records_by_model]
            part = consensus_partition(sets, registry)
            for task in build_verification_tasks(part, records_by_model,
                                                 registry):
                payload = task.payload()
                assert set(payload) == {"structure_id", "canonical_name",
                                        "evidence"}
                request = prompts.stage2_request(task)
                assert report.report_id not in request.user
                assert "model" not in request.user.lower()
                all_evidence = {normalize_space(r.evidence)
                                for records in records_by_model
                                for r in records}
                assert set(payload["evidence"]) <= all_evidence


class TestMonotonicityProperty:

    def test_thousand_randomized_fixtures(self, registry):
        rng = np.random.default_rng(77)
        ids = np.array(registry.ids)
        verdict_names = np.array(["abnormal", "not_abnormal", "undecided"])
        for trial in range(1000):
            n = int(rng.integers(2, 7))
            sets = [AbnormalitySet("r", frozenset(
                int(t) for t in rng.choice(ids, size=rng.integers(0, 7),
                                           replace=False)))
                    for _ in range(n)]
            part = consensus_partition(sets, registry)
            verdicts = {int(t): str(rng.choice(verdict_names))
                        for t in part.disputed}
            policy = str(rng.choice(["abnormal", "not_abnormal"]))
            outcome = finalize_report(part, verdicts, policy)
            union = frozenset().union(*(s.targets for s in sets))
            assert part.unanimous <= outcome.final.targets <= union
