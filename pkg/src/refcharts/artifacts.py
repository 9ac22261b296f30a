"""Versioned persistence for fitted chart models.

Artifacts are human-auditable JSON with an explicit format version.
Floats survive the round trip bit-exactly (shortest-repr serialization),
so a loaded model scores any input identically to the model that was
saved. Loading refuses artifacts from a newer format or an unknown
family rather than guessing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__, families
from .data import Dataset
from .errors import ContractError
from .fp import PowerSet
from .gamlss import (ChartModel, ConvergenceReport, CovariateEncoding,
                     ModelSpec)

FORMAT_VERSION = 1
ARTIFACT_KIND = "chart_model"


@dataclass(frozen=True)
class ModelArtifact:
    """A chart model as persisted: payload plus provenance."""

    format_version: int
    family: str
    model: ChartModel
    provenance: dict


def dataset_hash(data: Dataset) -> str:
    """Order-independent content hash of a measurement dataset."""
    rows = sorted(
        (r.scan_id, r.structure_id, r.subject_id, r.study, repr(r.age),
         r.sex, r.manufacturer, repr(r.kvp), str(int(r.contrast)),
         repr(r.volume_ml), repr(r.mean_hu), r.acquired or "")
        for r in data)
    digest = hashlib.sha256()
    for row in rows:
        digest.update("\x1f".join(row).encode())
        digest.update(b"\x1e")
    return digest.hexdigest()


def make_provenance(*, data_hash: str | None = None, seed: int | None = None,
                    fp_search=None, extra: dict | None = None) -> dict:
    out = {"software_version": __version__}
    if data_hash is not None:
        out["data_hash"] = data_hash
    if seed is not None:
        out["seed"] = seed
    if fp_search is not None:
        out["fp_search"] = fp_search
    if extra:
        out.update(extra)
    return out


def _spec_obj(spec: ModelSpec) -> dict:
    links = None
    if spec.links is not None:
        links = {"mu": spec.links.mu, "sigma": spec.links.sigma,
                 "nu": spec.links.nu, "tau": spec.links.tau}
    return {
        "family": spec.family, "response": spec.response,
        "mu_sex": spec.mu_sex, "mu_manufacturer": spec.mu_manufacturer,
        "mu_kvp": spec.mu_kvp, "mu_contrast": spec.mu_contrast,
        "sigma_sex": spec.sigma_sex,
        "study_effect_mode": spec.study_effect_mode, "links": links,
        "kvp_center": spec.kvp_center, "age_divisor": spec.age_divisor,
        "contrast_state": spec.contrast_state,
    }


def _spec_from_obj(obj: dict) -> ModelSpec:
    links = obj.get("links")
    link_set = families.LinkSet(**links) if links is not None else None
    return ModelSpec(
        family=obj["family"], response=obj["response"],
        mu_sex=obj["mu_sex"], mu_manufacturer=obj["mu_manufacturer"],
        mu_kvp=obj["mu_kvp"], mu_contrast=obj["mu_contrast"],
        sigma_sex=obj["sigma_sex"],
        study_effect_mode=obj["study_effect_mode"], links=link_set,
        kvp_center=obj["kvp_center"], age_divisor=obj["age_divisor"],
        contrast_state=obj["contrast_state"])


def _encoding_obj(enc: CovariateEncoding) -> dict:
    return {
        "sex_levels": list(enc.sex_levels),
        "manufacturer_levels": list(enc.manufacturer_levels),
        "study_levels": list(enc.study_levels),
        "study_reference": enc.study_reference,
        "kvp_center": enc.kvp_center, "age_divisor": enc.age_divisor,
        "age_min": enc.age_min, "age_max": enc.age_max,
    }


def _encoding_from_obj(obj: dict) -> CovariateEncoding:
    return CovariateEncoding(
        sex_levels=tuple(obj["sex_levels"]),
        manufacturer_levels=tuple(obj["manufacturer_levels"]),
        study_levels=tuple(obj["study_levels"]),
        study_reference=obj["study_reference"],
        kvp_center=obj["kvp_center"], age_divisor=obj["age_divisor"],
        age_min=obj["age_min"], age_max=obj["age_max"])


def _vectors_obj(vectors: dict) -> dict:
    return {k: [float(v) for v in np.asarray(vec)]
            for k, vec in vectors.items()}


def _vectors_from_obj(obj: dict) -> dict:
    return {k: np.asarray(v, dtype=float) for k, v in obj.items()}


def save_artifact(model: ChartModel, provenance: dict | None = None) -> str:
    """Serialize a fitted model to the versioned JSON text format."""
    conv = model.convergence
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": ARTIFACT_KIND,
        "family": model.spec.family,
        "structure_id": model.structure_id,
        "spec": _spec_obj(model.spec),
        "powers_mu": list(model.powers_mu.powers),
        "powers_sigma": list(model.powers_sigma.powers),
        "encoding": _encoding_obj(model.encoding),
        "coef": _vectors_obj(model.coef),
        "labels": {k: list(v) for k, v in model.labels.items()},
        "se": None if model.se is None else _vectors_obj(model.se),
        "study_coef": _vectors_obj(model.study_coef),
        "delta2": {k: float(v) for k, v in model.delta2.items()},
        "loglik": model.loglik, "bic": model.bic,
        "n_obs": model.n_obs, "k_params": model.k_params,
        "convergence": {"converged": conv.converged, "n_iter": conv.n_iter,
                        "grad_norm": conv.grad_norm,
                        "rel_change": conv.rel_change,
                        "objective": conv.objective,
                        "message": conv.message,
                        "n_outer": conv.n_outer},
        "provenance": provenance or make_provenance(),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_artifact(text) -> ModelArtifact:
    """Parse artifact text back into a model, validating version and family."""
    if isinstance(text, bytes):
        text = text.decode()
    try:
        doc = json.loads(text)
    except ValueError as err:
        raise ContractError(f"artifact is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ContractError("artifact must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ContractError(
            f"artifact format_version {version!r} is not supported "
            f"(this build reads version {FORMAT_VERSION})")
    if doc.get("kind") != ARTIFACT_KIND:
        raise ContractError(f"unknown artifact kind {doc.get('kind')!r}")
    family = doc.get("family")
    if family not in families.FAMILIES:
        raise ContractError(f"unknown family tag {family!r}")
    spec = _spec_from_obj(doc["spec"])
    if spec.family != family:
        raise ContractError(
            f"family tag {family!r} does not match the spec payload")
    conv = doc["convergence"]
    model = ChartModel(
        spec=spec,
        structure_id=doc["structure_id"],
        powers_mu=PowerSet(tuple(doc["powers_mu"])),
        powers_sigma=PowerSet(tuple(doc["powers_sigma"])),
        encoding=_encoding_from_obj(doc["encoding"]),
        coef=_vectors_from_obj(doc["coef"]),
        labels={k: tuple(v) for k, v in doc["labels"].items()},
        se=None if doc["se"] is None else _vectors_from_obj(doc["se"]),
        study_coef=_vectors_from_obj(doc["study_coef"]),
        delta2={k: float(v) for k, v in doc["delta2"].items()},
        loglik=doc["loglik"], bic=doc["bic"],
        n_obs=doc["n_obs"], k_params=doc["k_params"],
        convergence=ConvergenceReport(
            converged=conv["converged"], n_iter=conv["n_iter"],
            grad_norm=conv["grad_norm"], rel_change=conv["rel_change"],
            objective=conv["objective"], message=conv["message"],
            n_outer=conv.get("n_outer", 1)))
    return ModelArtifact(format_version=version, family=family, model=model,
                         provenance=doc.get("provenance", {}))


def write_artifact(model: ChartModel, path, provenance=None) -> None:
    from pathlib import Path

    Path(path).write_text(save_artifact(model, provenance))


def read_artifact(path) -> ModelArtifact:
    from pathlib import Path

    return load_artifact(Path(path).read_text())
