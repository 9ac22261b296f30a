"""Config-driven pipeline: curation, report filtering, fitting, charts.

Each stage reads its inputs from files and writes its outputs under the
run directory, so stages can run individually from the CLI, and a failed
run resumes from its checkpoint. A completed run directory is a pure
function of the config and seed: rerunning produces byte-identical
trees. Every measurement excluded from the reference cohort appears
exactly once in the exclusion audit, with the reason it was dropped.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .artifacts import (dataset_hash, make_provenance, read_artifact,
                        write_artifact)
from .bootstrap import bootstrap_bands
from .centiles import chart_grid, score
from .curation import CurationParams, curate_dataset
from .data import Dataset, ingest_csv
from .errors import ContractError
from .fp import PowerSet
from .gamlss import ModelSpec, fit, select_fp
from .reportfilter import (FixtureBackend, Report, load_registry,
                           method_vs_manual, run_filter)

STAGES = ("curate", "filter-reports", "fit", "bootstrap", "chart", "score")


def _check_keys(obj: dict, allowed, where: str):
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ContractError(f"unknown config keys in {where}: {unknown}")


def _settings_from(cls, obj: dict | None, where: str):
    obj = obj or {}
    if not isinstance(obj, dict):
        raise ContractError(f"config section {where} must be a mapping")
    names = [f.name for f in fields(cls)]
    _check_keys(obj, names, where)
    kwargs = {}
    for f in fields(cls):
        if f.name not in obj or obj[f.name] is None:
            continue
        value = obj[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class CurateSettings:
    mad_threshold: float = 4.0
    consistency_threshold: float = 4.0
    rank: int = 5
    min_structures: int = 8


@dataclass(frozen=True)
class FilterSettings:
    reports: str | None = None
    extraction_fixtures: tuple = ()
    verifier_fixture: str | None = None
    undecided_policy: str = "abnormal"
    manual_labels: str | None = None


@dataclass(frozen=True)
class FitSettings:
    volume_structures: tuple | None = None   # None fits every structure
    hu_structures: tuple | None = None
    select: bool = False
    max_degree: int = 2
    powers_mu: tuple = (1,)
    powers_sigma: tuple = ()


@dataclass(frozen=True)
class BootstrapSettings:
    structures: tuple | None = None          # None uses the volume list
    n_replicates: int = 50
    levels: tuple = (0.05, 0.5, 0.95)
    sex: str = "F"


@dataclass(frozen=True)
class ChartSettings:
    levels: tuple = (0.03, 0.1, 0.25, 0.5, 0.75, 0.9, 0.97)
    n_ages: int = 41


@dataclass(frozen=True)
class ScoreSettings:
    input: str | None = None                  # None scores the fit input


@dataclass(frozen=True)
class PipelineConfig:
    measurements: str
    out: str = "out"
    seed: int = 0
    threads: int = 2
    stages: tuple = STAGES
    base_dir: str = "."
    curate: CurateSettings = CurateSettings()
    filter: FilterSettings = FilterSettings()
    fit: FitSettings = FitSettings()
    bootstrap: BootstrapSettings = BootstrapSettings()
    chart: ChartSettings = ChartSettings()
    score: ScoreSettings = ScoreSettings()

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def canonical_obj(self) -> dict:
        # the hash covers the analysis settings, not where they run:
        # output dir, base dir, and thread count stay out of it
        obj = asdict(self)
        for key in ("out", "base_dir", "threads"):
            obj.pop(key, None)
        obj["stages"] = list(self.stages)
        return obj

    def config_hash(self) -> str:
        text = json.dumps(self.canonical_obj(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()


def config_from_obj(obj: dict, *, base_dir=".") -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ContractError("pipeline config must be a mapping")
    top = [f.name for f in fields(PipelineConfig) if f.name != "base_dir"]
    _check_keys(obj, top, "config")
    if "measurements" not in obj:
        raise ContractError("config must name a measurements file")
    stages = obj.get("stages")
    if stages is None:
        stages = STAGES
    else:
        unknown = sorted(set(stages) - set(STAGES))
        if unknown:
            raise ContractError(f"unknown stages {unknown}; valid: {list(STAGES)}")
        stages = tuple(s for s in STAGES if s in set(stages))
    return PipelineConfig(
        measurements=obj["measurements"],
        out=obj.get("out", "out"),
        seed=int(obj.get("seed", 0)),
        threads=int(obj.get("threads", 2)),
        stages=stages,
        base_dir=str(base_dir),
        curate=_settings_from(CurateSettings, obj.get("curate"), "curate"),
        filter=_settings_from(FilterSettings, obj.get("filter"), "filter"),
        fit=_settings_from(FitSettings, obj.get("fit"), "fit"),
        bootstrap=_settings_from(BootstrapSettings, obj.get("bootstrap"),
                                 "bootstrap"),
        chart=_settings_from(ChartSettings, obj.get("chart"), "chart"),
        score=_settings_from(ScoreSettings, obj.get("score"), "score"))


def load_config(path, *, seed=None, threads=None, out=None) -> PipelineConfig:
    path = Path(path)
    try:
        obj = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ContractError(f"config {path} is not valid YAML: {err}") from None
    cfg = config_from_obj(obj or {}, base_dir=path.parent)
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if threads is not None:
        updates["threads"] = int(threads)
    if out is not None:
        updates["out"] = str(out)
    if updates:
        cfg = PipelineConfig(**{**asdict_shallow(cfg), **updates})
    return cfg


def asdict_shallow(cfg: PipelineConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(PipelineConfig)}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _ingest(cfg: PipelineConfig):
    path = cfg.resolve(cfg.measurements)
    if not path.exists():
        raise ContractError(f"measurements file not found: {path}")
    return ingest_csv(path)


def read_reports_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"reports file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"report_id", "language", "text"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise ContractError(
                f"reports file missing columns {sorted(missing)}")
        return [Report(report_id=row["report_id"], language=row["language"],
                       text=row["text"]) for row in reader]


def read_manual_labels(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"manual labels file not found: {path}")
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"report_id", "target_ids"} - set(reader.fieldnames or ())
        if missing:
            raise ContractError(
                f"manual labels file missing columns {sorted(missing)}")
        for row in reader:
            raw = row["target_ids"].strip()
            labels[row["report_id"]] = (
                {int(t) for t in raw.split(";")} if raw else set())
    return labels


# ---------------------------------------------------------------------------
# stages

def stage_curate(cfg: PipelineConfig) -> dict:
    data, ingest = _ingest(cfg)
    params = CurationParams(
        mad_threshold=cfg.curate.mad_threshold,
        consistency_threshold=cfg.curate.consistency_threshold,
        rank=cfg.curate.rank, min_structures=cfg.curate.min_structures)
    report = curate_dataset(data, params)
    outd = cfg.out_dir / "curation"
    _write_csv(outd / "flags.csv", ["scan_id", "structure_id", "status"],
               report.to_rows())
    summary = {
        "n_rows_ingested": ingest.n_rows,
        "n_rows_rejected_ingest": ingest.n_excluded,
        "n_records": report.n_records,
        "n_measurement_outliers": report.n_mad,
        "n_consistency_outliers": report.n_consistency,
        "n_kept": report.n_kept,
        "flagged_scans": sorted(report.flagged_scans),
        "excluded_scan_reasons": report.excluded_scan_reasons(),
    }
    _write_json(outd / "summary.json", summary)
    return summary


def stage_filter(cfg: PipelineConfig) -> dict:
    f = cfg.filter
    if f.reports is None:
        raise ContractError("filter-reports stage requires filter.reports")
    if not f.extraction_fixtures or f.verifier_fixture is None:
        raise ContractError(
            "filter-reports stage requires extraction_fixtures and "
            "verifier_fixture directories")
    reports = read_reports_csv(cfg.resolve(f.reports))
    for root in list(f.extraction_fixtures) + [f.verifier_fixture]:
        if not cfg.resolve(root).is_dir():
            raise ContractError(f"backend fixture directory not found: "
                                f"{cfg.resolve(root)}")
    backends = [FixtureBackend(cfg.resolve(root))
                for root in f.extraction_fixtures]
    verifier = FixtureBackend(cfg.resolve(f.verifier_fixture))
    result = run_filter(reports, backends, verifier, load_registry(),
                        threads=cfg.threads,
                        undecided_policy=f.undecided_policy)

    outd = cfg.out_dir / "filter"
    registry = load_registry()
    final_rows, majority_rows, audit_rows = [], [], []
    for rid, outcome in result.outcomes.items():
        for tid in sorted(outcome.final.targets):
            final_rows.append([rid, tid, registry.get(tid).canonical_name])
        for tid in sorted(outcome.majority.targets):
            majority_rows.append([rid, tid, registry.get(tid).canonical_name])
        for model_index, rej in outcome.audits:
            audit_rows.append([rid, model_index,
                               "" if rej.position is None else rej.position,
                               rej.reason, rej.detail])
    _write_csv(outd / "final_targets.csv",
               ["report_id", "target_id", "canonical_name"], final_rows)
    _write_csv(outd / "majority_targets.csv",
               ["report_id", "target_id", "canonical_name"], majority_rows)
    _write_csv(outd / "audit.csv",
               ["report_id", "model_index", "position", "reason", "detail"],
               audit_rows)

    agreement = {
        "n_models": result.n_models,
        "undecided_policy": result.undecided_policy,
        "n_disputed": result.n_disputed,
        "n_retained": result.n_retained,
        "retention": result.retention,
    }
    if result.stage1_agreement is not None:
        agreement["stage1"] = {
            "pairwise_jaccard_mean": result.stage1_agreement.pairwise_jaccard_mean,
            "exact_agreement_rate": result.stage1_agreement.exact_agreement_rate,
            "n_reports": result.stage1_agreement.n_reports,
        }
    if f.manual_labels is not None:
        labels = read_manual_labels(cfg.resolve(f.manual_labels))
        for name, sets in (("final", result.final_by_report),
                           ("majority", {rid: set(o.majority.targets)
                                         for rid, o in result.outcomes.items()})):
            m = method_vs_manual(sets, labels)
            agreement[f"vs_manual_{name}"] = {
                "jaccard": m.jaccard,
                "precision": m.precision,
                "recall": m.recall,
                "n_reports": m.n_reports,
            }
    _write_json(outd / "agreement.json", agreement)

    summary = {
        "n_reports": len(result.outcomes),
        "n_flagged_reports": sum(bool(t) for t in
                                 result.final_by_report.values()),
        "n_final_targets": len(final_rows),
        "n_audit_rows": len(audit_rows),
        "n_disputed": result.n_disputed,
        "n_retained": result.n_retained,
        "retention": result.retention,
    }
    _write_json(outd / "summary.json", summary)
    return summary


def _load_exclusions(cfg: PipelineConfig, data: Dataset) -> dict:
    """(scan, structure) -> (reason, source); curation outranks reports."""
    exclusions = {}
    flags_path = cfg.out_dir / "curation" / "flags.csv"
    if flags_path.exists():
        with open(flags_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["status"] != "kept":
                    key = (row["scan_id"], row["structure_id"])
                    exclusions[key] = (row["status"], "curate")
    finals_path = cfg.out_dir / "filter" / "final_targets.csv"
    if finals_path.exists():
        registry = load_registry()
        present = {(r.scan_id, r.structure_id) for r in data}
        with open(finals_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                target = registry.get(int(row["target_id"]))
                for member in target.member_structures:
                    key = (row["report_id"], member)
                    if key in present and key not in exclusions:
                        exclusions[key] = (
                            f"reported_abnormality:{target.target_id}",
                            "filter-reports")
    return exclusions


def _reference_cohort(cfg: PipelineConfig):
    data, ingest = _ingest(cfg)
    exclusions = _load_exclusions(cfg, data)
    ref = data.filter(lambda r: (r.scan_id, r.structure_id) not in exclusions)
    return data, ingest, exclusions, ref


def _fit_one(cfg, ref, name, structure, spec):
    sub = ref.for_structure(structure)
    if len(sub) == 0:
        raise ContractError(f"no reference rows for model {name}")
    if spec.contrast_state is not None:
        sub = sub.filter(lambda r: bool(r.contrast) == spec.contrast_state)
    fp_search = None
    if cfg.fit.select:
        sel = select_fp(sub, spec, max_degree=cfg.fit.max_degree)
        pm, ps = sel.powers_mu, sel.powers_sigma
        fp_search = {"n_candidates": len(sel.table),
                     "powers_mu": list(pm.powers),
                     "powers_sigma": list(ps.powers)}
    else:
        pm = PowerSet(tuple(cfg.fit.powers_mu))
        ps = PowerSet(tuple(cfg.fit.powers_sigma))
    model = fit(sub, spec, pm, ps, structure_id=structure)
    provenance = make_provenance(
        data_hash=dataset_hash(sub), seed=cfg.seed, fp_search=fp_search,
        extra={"model": name, "stage": "fit"})
    return model, provenance


def stage_fit(cfg: PipelineConfig) -> dict:
    from concurrent.futures import ThreadPoolExecutor

    data, ingest, exclusions, ref = _reference_cohort(cfg)
    outd = cfg.out_dir / "fit"
    present = {(r.scan_id, r.structure_id) for r in data}
    rows = sorted([scan, structure, reason, source]
                  for (scan, structure), (reason, source) in exclusions.items()
                  if (scan, structure) in present)
    _write_csv(outd / "exclusions.csv",
               ["scan_id", "structure_id", "reason", "source"], rows)

    all_structures = ref.structures()
    volume_structures = cfg.fit.volume_structures or all_structures
    hu_structures = cfg.fit.hu_structures or all_structures
    tasks = {}
    for s in volume_structures:
        tasks[f"volume_{s}"] = (s, ModelSpec(family="GG",
                                             response="volume_ml"))
    for s in hu_structures:
        for state in (False, True):
            name = f"hu_{s}_{'contrast' if state else 'native'}"
            tasks[name] = (s, ModelSpec(family="ST1", response="mean_hu",
                                        contrast_state=state))

    models_dir = cfg.out_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        futures = {name: pool.submit(_fit_one, cfg, ref, name, s, spec)
                   for name, (s, spec) in tasks.items()}
        for name in sorted(futures):
            results[name] = futures[name].result()
    model_summaries = {}
    for name in sorted(results):
        model, provenance = results[name]
        write_artifact(model, models_dir / f"{name}.json", provenance)
        model_summaries[name] = {
            "n_obs": model.n_obs, "k_params": model.k_params,
            "bic": model.bic, "loglik": model.loglik,
            "converged": model.convergence.converged,
            "powers_mu": list(model.powers_mu.powers),
            "powers_sigma": list(model.powers_sigma.powers),
        }

    by_source = {}
    for _, _, _, source in rows:
        by_source[source] = by_source.get(source, 0) + 1
    per_structure = {s: sum(r.structure_id == s for r in ref)
                     for s in all_structures}
    summary = {
        "n_rows_ingested": ingest.n_rows,
        "n_scans": len({r.scan_id for r in data}),
        "n_excluded_rows": len(rows),
        "n_excluded_by_source": by_source,
        "n_reference_rows": len(ref),
        "per_structure": per_structure,
        "models": model_summaries,
    }
    _write_json(outd / "summary.json", summary)
    return summary


def _models_on_disk(cfg: PipelineConfig) -> dict:
    models_dir = cfg.out_dir / "models"
    paths = sorted(models_dir.glob("*.json")) if models_dir.is_dir() else []
    if not paths:
        raise ContractError(
            f"no model artifacts under {models_dir}; run the fit stage first")
    return {p.stem: read_artifact(p) for p in paths}


def stage_bootstrap(cfg: PipelineConfig) -> dict:
    _, _, _, ref = _reference_cohort(cfg)
    artifacts = _models_on_disk(cfg)
    structures = cfg.bootstrap.structures
    if structures is None:
        structures = tuple(s for s in ref.structures()
                           if f"volume_{s}" in artifacts)
    outd = cfg.out_dir / "bootstrap"
    summary = {}
    for idx, s in enumerate(sorted(structures)):
        name = f"volume_{s}"
        if name not in artifacts:
            raise ContractError(f"no fitted artifact {name} to bootstrap")
        art = artifacts[name]
        sub = ref.for_structure(s)
        seed_s = int(np.random.SeedSequence(
            [cfg.seed, idx]).generate_state(1)[0])
        bands = bootstrap_bands(
            sub, art.model.spec, art.model.powers_mu, art.model.powers_sigma,
            n_replicates=cfg.bootstrap.n_replicates, seed=seed_s,
            levels=cfg.bootstrap.levels, sex=cfg.bootstrap.sex,
            base_model=art.model)
        doc = {"format_version": 1, "kind": "centile_bands", "model": name,
               "seed": seed_s, **bands.to_obj()}
        _write_json(outd / f"bands_{name}.json", doc)
        summary[name] = {"n_replicates": bands.n_replicates,
                         "n_failed": bands.n_failed, "seed": seed_s}
    _write_json(outd / "summary.json", summary)
    return summary


def stage_chart(cfg: PipelineConfig) -> dict:
    artifacts = _models_on_disk(cfg)
    outd = cfg.out_dir / "charts"
    outd.mkdir(parents=True, exist_ok=True)
    n_charts = 0
    for name in sorted(artifacts):
        model = artifacts[name].model
        enc = model.encoding
        ages = np.linspace(enc.age_min, enc.age_max, cfg.chart.n_ages)
        for sex in enc.sex_levels:
            table = chart_grid(model, sex=sex, ages=ages,
                               levels=cfg.chart.levels)
            table.to_csv(outd / f"{name}_{sex}.csv")
            n_charts += 1
    summary = {"n_charts": n_charts, "levels": list(cfg.chart.levels),
               "n_ages": cfg.chart.n_ages}
    _write_json(outd / "summary.json", summary)
    return summary


def stage_score(cfg: PipelineConfig) -> dict:
    artifacts = _models_on_disk(cfg)
    charts = {}
    for art in artifacts.values():
        model = art.model
        key = (model.structure_id, model.spec.response,
               model.spec.contrast_state)
        charts[key] = model
    input_path = cfg.resolve(cfg.score.input or cfg.measurements)
    if not input_path.exists():
        raise ContractError(f"score input not found: {input_path}")
    data, _ = ingest_csv(input_path)
    rows = []
    n_skipped = 0
    for r in data:
        for response in ("volume_ml", "mean_hu"):
            state = None if response == "volume_ml" else bool(r.contrast)
            model = charts.get((r.structure_id, response, state))
            if model is None:
                n_skipped += 1
                continue
            value = r.volume_ml if response == "volume_ml" else r.mean_hu
            res = score(model, value=value, age=r.age, sex=r.sex,
                        manufacturer=r.manufacturer, kvp=r.kvp,
                        contrast=r.contrast, study=r.study)
            rows.append([r.scan_id, r.structure_id, response, repr(value),
                         repr(res.centile), repr(res.z_score),
                         "|".join(res.flags)])
    outd = cfg.out_dir / "scores"
    _write_csv(outd / "scores.csv",
               ["scan_id", "structure_id", "response", "value", "centile",
                "z_score", "flags"], rows)
    summary = {"n_scored": len(rows), "n_skipped": n_skipped}
    _write_json(outd / "summary.json", summary)
    return summary


RUNNERS = {
    "curate": stage_curate,
    "filter-reports": stage_filter,
    "fit": stage_fit,
    "bootstrap": stage_bootstrap,
    "chart": stage_chart,
    "score": stage_score,
}

_SUMMARY_FILES = {
    "curate": "curation/summary.json",
    "filter-reports": "filter/summary.json",
    "fit": "fit/summary.json",
    "bootstrap": "bootstrap/summary.json",
    "chart": "charts/summary.json",
    "score": "scores/summary.json",
}


def _write_checkpoint(cfg: PipelineConfig, completed) -> None:
    _write_json(cfg.out_dir / "checkpoint.json",
                {"format_version": 1, "kind": "checkpoint",
                 "config_hash": cfg.config_hash(),
                 "completed": list(completed)})


def assemble_summary(cfg: PipelineConfig) -> dict:
    summary = {"format_version": 1, "kind": "run_summary",
               "config_hash": cfg.config_hash(), "seed": cfg.seed,
               "stages": list(cfg.stages)}
    for stage in STAGES:
        path = cfg.out_dir / _SUMMARY_FILES[stage]
        summary[stage] = _read_json(path) if path.exists() else None
    return summary


def run_pipeline(cfg: PipelineConfig, *, resume=False) -> dict:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ck_path = out / "checkpoint.json"
    completed = []
    if resume and ck_path.exists():
        ck = _read_json(ck_path)
        if ck.get("config_hash") != cfg.config_hash():
            raise ContractError(
                "checkpoint belongs to a different configuration; "
                "refusing to resume")
        completed = [s for s in ck.get("completed", ()) if s in cfg.stages]
    for stage in cfg.stages:
        if stage in completed:
            continue
        RUNNERS[stage](cfg)
        completed.append(stage)
        _write_checkpoint(cfg, completed)
    summary = assemble_summary(cfg)
    _write_json(out / "run_summary.json", summary)
    return summary
