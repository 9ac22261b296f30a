"""Command line front end for the chart pipeline.

Exit codes: 0 on success, 1 for contract violations (bad config, bad
arguments, malformed inputs), 2 for numerical failures, 3 for backend
or filesystem errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .artifacts import read_artifact
from .data import ingest_csv
from .errors import BackendError, ContractError, NumericalError
from .fp import PowerSet
from .longitudinal import fit_long_hu, fit_long_volume
from .pipeline import load_config
from .reportfilter import method_vs_manual


class _Parser(argparse.ArgumentParser):
    # argparse exits with its own code 2 on usage errors; route them
    # through the contract-error path instead so 2 stays numerical
    def error(self, message):
        raise ContractError(f"invalid arguments: {message}")


def _add_common(sub):
    sub.add_argument("--config", required=True,
                     help="pipeline config YAML")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--threads", type=int, default=None,
                     help="override the config worker count")
    sub.add_argument("--out", default=None,
                     help="override the config output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refcharts",
                     description="distribution-aware CT reference charts")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
            ("curate", "flag outlier measurements and inconsistent scans"),
            ("filter-reports", "two-stage abnormality filter over reports"),
            ("fit", "fit reference chart models"),
            ("bootstrap", "bootstrap confidence bands for fitted charts"),
            ("chart", "tabulate centile curves from fitted models"),
            ("score", "score measurements against fitted charts")):
        sub = subs.add_parser(name, help=help_text)
        _add_common(sub)

    sub = subs.add_parser("pipeline", help="run all configured stages")
    _add_common(sub)
    sub.add_argument("--resume", action="store_true",
                     help="continue from the last completed stage")

    sub = subs.add_parser("longfit",
                          help="longitudinal change model for one structure")
    _add_common(sub)
    sub.add_argument("--structure", required=True)
    sub.add_argument("--response", choices=("volume_ml", "mean_hu"),
                     required=True)
    sub.add_argument("--nu", type=float, default=None,
                     help="GG shape for volume fits; defaults to the "
                          "fitted chart's value when an artifact exists")

    sub = subs.add_parser("metrics",
                          help="compare filter output with manual labels")
    _add_common(sub)
    return parser


def _cmd_stage(cfg, command):
    summary = pipeline.RUNNERS[command](cfg)
    json.dump(summary, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _cmd_pipeline(cfg, resume):
    summary = pipeline.run_pipeline(cfg, resume=resume)
    json.dump(summary, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _cmd_longfit(cfg, structure, response, nu):
    data, _ = ingest_csv(cfg.resolve(cfg.measurements))
    sub = data.for_structure(structure)
    if len(sub) == 0:
        raise ContractError(f"no measurements for structure {structure!r}")
    if response == "volume_ml":
        if nu is None:
            art_path = cfg.out_dir / "models" / f"volume_{structure}.json"
            if not art_path.exists():
                raise ContractError(
                    "volume longfit needs --nu or a fitted artifact at "
                    f"{art_path}")
            art = read_artifact(art_path)
            nu = float(art.model.coef["nu"][0])
        result = fit_long_volume(sub, nu=nu, powers=PowerSet((1,)))
    else:
        result = fit_long_hu(sub, powers=PowerSet((1,)))
    rows = [{
        "name": row.name, "estimate": row.estimate, "se": row.se,
        "z_value": row.z_value, "p_value": row.p_value,
        "transformed": row.transformed,
        "transformed_units": row.transformed_units,
        "significant_bonferroni": row.significant_bonferroni,
    } for row in result.coefficient_table()]
    doc = {
        "structure": structure, "response": response,
        "coefficients": rows, "omega2": result.omega2,
        "loglik": result.loglik, "n_obs": result.n_obs,
        "n_subjects": len(result.subjects),
        "converged": result.converged,
    }
    if response == "volume_ml":
        doc["nu"] = result.nu
        doc["sigma"] = result.sigma
    else:
        doc["sigma_e2"] = result.sigma_e2
    outd = cfg.out_dir / "longitudinal"
    outd.mkdir(parents=True, exist_ok=True)
    path = outd / f"{response}_{structure}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _cmd_metrics(cfg):
    if cfg.filter.manual_labels is None:
        raise ContractError("metrics needs filter.manual_labels in the config")
    labels = pipeline.read_manual_labels(cfg.resolve(cfg.filter.manual_labels))
    doc = {}
    for name in ("final", "majority"):
        path = cfg.out_dir / "filter" / f"{name}_targets.csv"
        if not path.exists():
            raise ContractError(
                f"{path} not found; run the filter-reports stage first")
        predicted = {}
        import csv

        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                predicted.setdefault(row["report_id"], set()).add(
                    int(row["target_id"]))
        for rid in labels:
            predicted.setdefault(rid, set())
        m = method_vs_manual(predicted, labels)
        doc[name] = {"jaccard": m.jaccard, "precision": m.precision,
                     "recall": m.recall, "n_reports": m.n_reports}
    outd = cfg.out_dir / "metrics"
    outd.mkdir(parents=True, exist_ok=True)
    (outd / "vs_manual.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, seed=args.seed, threads=args.threads,
                          out=args.out)
        if args.command == "pipeline":
            _cmd_pipeline(cfg, args.resume)
        elif args.command == "longfit":
            _cmd_longfit(cfg, args.structure, args.response, args.nu)
        elif args.command == "metrics":
            _cmd_metrics(cfg)
        else:
            _cmd_stage(cfg, args.command)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except (BackendError, OSError) as err:
        print(f"backend or I/O failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
