"""A scripted ten-report corpus with hand-computed expected outcomes.

The corpus exercises every path through the two-stage filter: unanimous
findings, disputes the verifier affirms or rejects, ungrounded and
malformed model outputs, normal-status drops, hallucinated target ids,
a wholesale extraction failure, and a verification backend failure.
All reports are invented and contain no personal data.
"""

from __future__ import annotations

import json

from ..errors import BackendError
from .backends import ScriptedBackend
from .runner import Report

S_LIVER_LESION = "The liver contains a hypodense lesion in segment six."
S_GGO = "Scattered ground glass opacities in both lower lobes."
S_AORTA_NORMAL = "The thoracic aorta is normal in caliber."
S_VERTEBRA = "Compression deformity of the twelfth thoracic vertebra."
S_RIBS = "Healed fractures of the right ribs."
S_PANCREAS_OK = "The pancreas is unremarkable."
S_SPLEEN = "The spleen is enlarged measuring eighteen centimeters."
S_PERICARD = "Moderate pericardial effusion is present."
S_FEMUR = "Chronic non-displaced fracture of the left femur is again seen."
S_ILIAC = "Calcified plaque along both iliac arteries."
S_HUMERUS = "Comminuted fracture of the right humerus with mild displacement."
S_METS = "Multiple hepatic metastases are present."
S_NODULE = ("There is a right lower lobe pulmonary nodule measuring "
            "nine millimeters.")
S_ANEURYSM = ("The infrarenal aorta shows an aneurysm of four point two "
              "centimeters.")
S_LUMBAR = "Mild degenerative changes of the lumbar spine."

_REPORTS = (
    ("r01", "CT abdomen. " + S_LIVER_LESION + " No free fluid. "
     "Remaining organs unremarkable."),
    ("r02", "CT chest. " + S_GGO + " Heart size normal. "
     "No pleural effusion."),
    ("r03", "CT thorax. " + S_AORTA_NORMAL + " Lungs are clear. "
     "No lymphadenopathy."),
    ("r04", "Trauma CT. " + S_VERTEBRA + " " + S_RIBS + " " + S_PANCREAS_OK),
    ("r05", "Screening CT. Unremarkable examination of chest, abdomen, "
     "and pelvis."),
    ("r06", "CT abdomen. " + S_SPLEEN + " No focal hepatic lesion."),
    ("r07", "CT chest. " + S_PERICARD + " No pulmonary embolism."),
    ("r08", "CT pelvis. " + S_FEMUR + " " + S_ILIAC),
    ("r09", "CT shoulder. " + S_HUMERUS + " Alignment otherwise preserved."),
    ("r10", "Staging CT. " + S_METS + " " + S_NODULE + " " + S_ANEURYSM
     + " " + S_LUMBAR),
)


def _rec(target_id, name, report_name, evidence, status="abnormal"):
    return {"structure_id": target_id, "canonical_name": name,
            "report_name": report_name, "evidence": evidence,
            "status": status}


def _build_script():
    """Per (report, model) stage-one outputs; strings pass through raw."""
    liver = _rec(4, "liver", "liver", S_LIVER_LESION)
    lung_ggo = _rec(8, "lung", "lower lobes", S_GGO)
    aorta_overcall = _rec(31, "aorta", "thoracic aorta", S_AORTA_NORMAL)
    vertebra = _rec(18, "vertebrae", "twelfth thoracic vertebra", S_VERTEBRA)
    ribs = _rec(19, "ribs", "right ribs", S_RIBS)
    pancreas_misread = _rec(6, "pancreas", "pancreas", S_PANCREAS_OK)
    spleen = _rec(1, "spleen", "spleen", S_SPLEEN)
    spleen_para = _rec(1, "spleen", "spleen", "Spleen measures 18 cm.")
    pericard = _rec(30, "heart", "pericardium", S_PERICARD)
    femur = _rec(25, "femur", "left femur", S_FEMUR)
    femur_normal = _rec(25, "femur", "left femur", S_FEMUR, status="normal")
    iliac = _rec(39, "iliac_vessels", "iliac arteries", S_ILIAC)
    humerus = _rec(24, "humerus", "right humerus", S_HUMERUS)
    mets = _rec(4, "liver", "hepatic", S_METS)
    nodule = _rec(8, "lung", "right lower lobe", S_NODULE)
    aneurysm = _rec(31, "aorta", "infrarenal aorta", S_ANEURYSM)
    lumbar = _rec(18, "vertebrae", "lumbar spine", S_LUMBAR)
    hallucinated = _rec(99, "meniscus", "meniscus", S_LUMBAR)

    return {
        "r01": [[liver]] * 5,
        "r02": [[lung_ggo], [lung_ggo], [lung_ggo], [], []],
        "r03": [[], [], [], [aorta_overcall], []],
        "r04": [[vertebra, ribs, pancreas_misread],
                [vertebra, ribs, pancreas_misread],
                [vertebra, pancreas_misread],
                [vertebra, pancreas_misread],
                [vertebra]],
        "r05": [[]] * 5,
        "r06": [[spleen], [spleen], [spleen], [spleen], [spleen_para]],
        "r07": [[pericard], [pericard], "model output corrupted {{{",
                [pericard], [pericard]],
        "r08": [[femur_normal, iliac], [femur, iliac], [femur, iliac],
                [femur, iliac], [femur, iliac]],
        "r09": [[humerus], [humerus], [humerus], [], []],
        "r10": [[mets, nodule, aneurysm],
                [mets, nodule, aneurysm, hallucinated],
                [mets, nodule, aneurysm],
                [mets, nodule, lumbar],
                [mets, nodule, lumbar]],
    }


def demo_corpus():
    return tuple(Report(report_id=rid, language="en", text=text)
                 for rid, text in _REPORTS)


def demo_extraction_backends():
    """Five scripted models routed by the report text in the request."""
    script = _build_script()
    text_to_id = {text: rid for rid, text in _REPORTS}

    def make(m):
        def respond(request):
            rid = text_to_id.get(request.user)
            if rid is None:
                raise BackendError("request does not match a demo report")
            output = script[rid][m]
            return output if isinstance(output, str) else json.dumps(output)
        return ScriptedBackend(respond)

    return tuple(make(m) for m in range(5))


_REJECT_SENTENCES = (S_AORTA_NORMAL, S_PANCREAS_OK, S_LUMBAR)


def demo_verifier_backend():
    """Scripted stage-two verdicts keyed on the pooled evidence text."""

    def respond(request):
        if S_HUMERUS in request.user:
            raise BackendError("verifier unavailable")
        if any(s in request.user for s in _REJECT_SENTENCES):
            return json.dumps({"verdict": "not_abnormal"})
        return json.dumps({"verdict": "abnormal"})

    return ScriptedBackend(respond)


def expected_outcomes():
    """Hand-computed oracle for every report in the demo corpus."""
    f = frozenset
    return {
        "r01": {"unanimous": f({4}), "disputed": f(), "final": f({4}),
                "majority": f({4})},
        "r02": {"unanimous": f(), "disputed": f({8}), "final": f({8}),
                "majority": f({8})},
        "r03": {"unanimous": f(), "disputed": f({31}), "final": f(),
                "majority": f()},
        "r04": {"unanimous": f({18}), "disputed": f({19, 6}),
                "final": f({18, 19}), "majority": f({18, 6})},
        "r05": {"unanimous": f(), "disputed": f(), "final": f(),
                "majority": f()},
        "r06": {"unanimous": f(), "disputed": f({1}), "final": f({1}),
                "majority": f({1})},
        "r07": {"unanimous": f(), "disputed": f({30}), "final": f({30}),
                "majority": f({30})},
        "r08": {"unanimous": f({39}), "disputed": f({25}),
                "final": f({25, 39}), "majority": f({25, 39})},
        "r09": {"unanimous": f(), "disputed": f({24}), "final": f({24}),
                "majority": f({24})},
        "r10": {"unanimous": f({4, 8}), "disputed": f({31, 18}),
                "final": f({4, 8, 31}), "majority": f({4, 8, 31})},
    }


def expected_audit_reasons():
    """(report, model index, reason) triples the demo run must log."""
    return {("r06", 4, "ungrounded"), ("r07", 2, "unparseable_output"),
            ("r08", 0, "status_normal"), ("r10", 1, "unknown_target")}


def manual_labels():
    """Manual annotations for the metrics subset of the demo corpus."""
    return {"r01": {4}, "r03": set(), "r04": {18, 19}, "r10": {4, 8, 31, 39}}
