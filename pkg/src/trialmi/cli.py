"""Command-line front end: simulation runs, truth computation, and analysis
of ingested trial datasets.

Subcommands
-----------
simulate   run a replicated simulation plan, write metrics/scenarios/truth CSVs
analyze    apply the imputation methods to a dataset CSV, write pooled estimates
truth      compute the complete-data truth values only

Dataset CSV schema (one row per subject): ``id, arm, baseline, y<week>...,
disc_week, withdraw_week, withdraw_type`` where the ``y<week>`` columns declare
the visit grid (e.g. y12,y24,y36,y48), empty cells mean missing, and
withdraw_type is ``admin``/``other`` (required when withdraw_week is present).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import (ADMIN_WITHDRAWAL, OTHER_WITHDRAWAL, ScenarioLabel, SubjectRecord,
                   TrialDataset, VisitGrid, validate_dataset)
from .datagen import GenParams, generate_truth, setting_preset
from .errors import ConfigError, TrialMIError, ValidationError
from .estimation import estimate_matrix, pool_rubin
from .imputation import METHODS, ImputationConfig, impute_matrix
from .simharness import ESTIMANDS, SimPlan, run_plan

WORKERS_ENV = "TRIALMI_WORKERS"

_PLAN_KEYS = {"preset", "n_replicates", "methods", "seed", "workers",
              "truth_n_datasets", "ci_level"}
_IMPUTATION_KEYS = {"m", "survival_kind", "min_donor_pool", "mar_conditioning",
                    "gate_probability_override"}
_GEN_KEYS = {f.name for f in dataclasses.fields(GenParams)}


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # input errors exit with code 1
        self.print_usage(sys.stderr)
        raise SystemExit(self._input_error(message))

    @staticmethod
    def _input_error(message: str) -> int:
        print(f"error: {message}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trialmi", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--preset", choices=["setting1", "setting2"], help="parameter preset")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")

    sim = sub.add_parser("simulate", help="run a replicated simulation plan")
    common(sim)
    sim.add_argument("--reps", type=int, help="number of replicates")
    sim.add_argument("--methods", type=str, help="comma-separated subset of A,B,C,D")
    sim.add_argument("--m-imputations", type=int, help="imputations per replicate")
    sim.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    sim.add_argument("--truth-datasets", type=int, help="datasets for the truth oracle")
    sim.add_argument("--level", type=float, help="confidence level")

    ana = sub.add_parser("analyze", help="apply the methods to a dataset CSV")
    ana.add_argument("dataset", type=Path, help="subject-level CSV")
    ana.add_argument("--methods", type=str, default=",".join(METHODS))
    ana.add_argument("--m-imputations", type=int, default=100)
    ana.add_argument("--seed", type=int, default=0)
    ana.add_argument("--level", type=float, default=0.95)
    ana.add_argument("--config", type=Path, help="JSON config file (imputation section)")
    ana.add_argument("--out", type=Path, default=Path("."))

    tru = sub.add_parser("truth", help="compute complete-data truth values")
    common(tru)
    tru.add_argument("--n-datasets", type=int, help="number of complete datasets")
    return parser


# ---------------------------------------------------------------------------
# configuration


def _load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    allowed = {"gen": _GEN_KEYS, "imputation": _IMPUTATION_KEYS, "plan": _PLAN_KEYS}
    for section, body in doc.items():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        for key in body:
            if key not in allowed[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
    return doc


def _resolve_gen_params(config: dict, preset_flag: Optional[str]) -> tuple[GenParams, str]:
    preset = preset_flag or config.get("plan", {}).get("preset") or "setting1"
    params = setting_preset(preset)
    overrides = dict(config.get("gen", {}))
    if "grid" in overrides:
        overrides["grid"] = VisitGrid(times=tuple(float(t) for t in overrides["grid"]))
    for key, val in overrides.items():
        if isinstance(val, list):
            overrides[key] = tuple(val)
    if overrides:
        params = dataclasses.replace(params, **overrides)
    params.validate()
    return params, preset


def _workers(args, config: dict) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    if "workers" in config.get("plan", {}) and config["plan"]["workers"] is not None:
        return int(config["plan"]["workers"])
    env = os.environ.get(WORKERS_ENV)
    return int(env) if env else 1


def _pick(args_value, config: dict, section: str, key: str, default):
    if args_value is not None:
        return args_value
    if key in config.get(section, {}) and config[section][key] is not None:
        return config[section][key]
    return default


def _parse_methods(text: Optional[str], config: dict) -> tuple[str, ...]:
    if text is None:
        cfg = config.get("plan", {}).get("methods")
        if cfg is None:
            return METHODS
        methods = tuple(str(m).strip().upper() for m in cfg)
    else:
        methods = tuple(part.strip().upper() for part in text.split(",") if part.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"methods must be a nonempty subset of {','.join(METHODS)}; got {text!r}")
    return methods


# ---------------------------------------------------------------------------
# output files


def _params_dict(params: GenParams) -> dict:
    out = dataclasses.asdict(params)
    out["grid"] = list(params.grid.times)
    return out


def _manifest_id(identity: dict) -> str:
    blob = json.dumps(identity, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_manifest(out_dir: Path, identity: dict, execution: dict) -> str:
    mid = _manifest_id(identity)
    doc = {"manifest_id": mid, "package": "trialmi", "version": __version__,
           "identity": identity, "execution": execution}
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return mid


def _write_csv(path: Path, manifest_id: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# manifest={manifest_id}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_truth_csv(out_dir: Path, manifest_id: str, truth) -> None:
    rows = [["control", _fmt(truth.mean_control), truth.n_datasets],
            ["treatment", _fmt(truth.mean_treatment), truth.n_datasets],
            ["difference", _fmt(truth.difference), truth.n_datasets]]
    _write_csv(out_dir / "truth.csv", manifest_id, ["estimand", "value", "n_datasets"], rows)


# ---------------------------------------------------------------------------
# dataset CSV ingestion / export


def _parse_grid_columns(header: list[str]) -> tuple[list[int], VisitGrid]:
    positions, weeks = [], []
    for i, name in enumerate(header):
        if name.startswith("y") and name != "y":
            try:
                weeks.append(float(name[1:]))
            except ValueError:
                continue
            positions.append(i)
    if not positions:
        raise ValidationError("no visit columns (y<week>) found in header")
    if any(b <= a for a, b in zip(weeks, weeks[1:])):
        raise ValidationError("visit columns must be ordered by strictly increasing week")
    return positions, VisitGrid(times=tuple(weeks))


def read_dataset_csv(path: Path) -> TrialDataset:
    """Ingest a subject-level CSV; raises ValidationError with per-row diagnostics."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = [r for r in reader if r and not r[0].startswith("#")]
    except OSError as exc:
        raise ValidationError(f"cannot read dataset {path}: {exc}") from exc
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    required = ["id", "arm", "baseline"]
    for col in required + ["disc_week", "withdraw_week", "withdraw_type"]:
        if col not in header:
            raise ValidationError(f"{path}: missing column {col!r}")
    y_positions, grid = _parse_grid_columns(header)
    col = {name: header.index(name) for name in header}

    problems: list[str] = []
    subjects: list[SubjectRecord] = []
    type_map = {"admin": ADMIN_WITHDRAWAL, "other": OTHER_WITHDRAWAL, "": None}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            problems.append(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        cell = [c.strip() for c in row]

        def fnum(pos, name, *, optional=False):
            text = cell[pos]
            if text == "":
                if optional:
                    return None
                problems.append(f"row {lineno}: {name} is required")
                return None
            try:
                return float(text)
            except ValueError:
                problems.append(f"row {lineno}: {name} {text!r} is not a number")
                return None

        arm_text = cell[col["arm"]]
        if arm_text not in ("0", "1"):
            problems.append(f"row {lineno}: arm must be 0 or 1, got {arm_text!r}")
            continue
        baseline = fnum(col["baseline"], "baseline")
        outcomes = tuple(fnum(pos, header[pos], optional=True) for pos in y_positions)
        disc = fnum(col["disc_week"], "disc_week", optional=True)
        withdraw = fnum(col["withdraw_week"], "withdraw_week", optional=True)
        type_text = cell[col["withdraw_type"]].lower()
        if type_text not in type_map:
            problems.append(f"row {lineno}: withdraw_type must be admin/other/empty, got {type_text!r}")
            continue
        if baseline is None:
            continue
        subjects.append(SubjectRecord(
            id=cell[col["id"]], arm=int(arm_text), baseline=baseline, outcomes=outcomes,
            missing=tuple(v is None for v in outcomes), disc_time=disc,
            withdraw_time=withdraw, withdraw_type=type_map[type_text]))
    if problems:
        raise ValidationError("\n".join(problems))
    return TrialDataset(grid=grid, subjects=tuple(subjects), provenance=f"ingested {path}")


def write_dataset_csv(dataset: TrialDataset, path: Path) -> None:
    """Lossless subject-level export (floats via repr round-trip)."""
    header = (["id", "arm", "baseline"] + [f"y{t:g}" for t in dataset.grid.times]
              + ["disc_week", "withdraw_week", "withdraw_type"])
    type_text = {ADMIN_WITHDRAWAL: "admin", OTHER_WITHDRAWAL: "other", None: ""}

    def cell(v) -> str:
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in dataset.subjects:
            writer.writerow([s.id, s.arm, repr(float(s.baseline))]
                            + [cell(y) for y in s.outcomes]
                            + [cell(s.disc_time), cell(s.withdraw_time),
                               type_text[s.withdraw_type]])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    params, preset = _resolve_gen_params(config, args.preset)
    methods = _parse_methods(args.methods, config)
    plan = SimPlan(
        params=params,
        n_replicates=int(_pick(args.reps, config, "plan", "n_replicates", 100)),
        methods=methods,
        m_imputations=int(_pick(args.m_imputations, config, "imputation", "m", 100)),
        seed=int(_pick(args.seed, config, "plan", "seed", 0)),
        workers=_workers(args, config),
        truth_n_datasets=int(_pick(args.truth_datasets, config, "plan", "truth_n_datasets", 20000)),
        ci_level=float(_pick(args.level, config, "plan", "ci_level", 0.95)),
        survival_kind=_pick(None, config, "imputation", "survival_kind", "proportional_hazards"),
        min_donor_pool=int(_pick(None, config, "imputation", "min_donor_pool", 12)),
        mar_conditioning=_pick(None, config, "imputation", "mar_conditioning", "monotone-sequential"),
        gate_probability_override=_pick(None, config, "imputation", "gate_probability_override", None),
    )
    table = run_plan(plan)

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    identity = {"command": "simulate", "preset": preset, "params": _params_dict(params),
                "plan": {"n_replicates": plan.n_replicates, "methods": list(plan.methods),
                         "m_imputations": plan.m_imputations, "seed": plan.seed,
                         "truth_n_datasets": plan.truth_n_datasets, "ci_level": plan.ci_level,
                         "survival_kind": plan.survival_kind,
                         "min_donor_pool": plan.min_donor_pool,
                         "mar_conditioning": plan.mar_conditioning}}
    mid = _write_manifest(out_dir, identity, {"workers": plan.workers,
                                              "n_excluded": table.n_excluded})
    _write_csv(out_dir / "metrics.csv", mid, ["method", "estimand", "BIAS", "ESE", "ASE", "CP"],
               [[r.method, r.estimand, _fmt(r.bias), _fmt(r.ese), _fmt(r.ase), _fmt(r.cp)]
                for r in table.rows])
    arm_name = {0: "control", 1: "treatment"}
    _write_csv(out_dir / "scenarios.csv", mid, ["arm", "scenario", "mean_count", "mean_pct"],
               [[arm_name[arm], label.value, _fmt(cnt), _fmt(pct)]
                for (arm, label), (cnt, pct) in table.scenario_summary.items()])
    _write_truth_csv(out_dir, mid, table.truth)
    print(f"wrote metrics.csv, scenarios.csv, truth.csv, manifest.json to {out_dir}"
          f" ({table.n_replicates} replicates, {table.n_excluded} excluded)")
    return 0


def cmd_truth(args) -> int:
    config = _load_config(args.config)
    params, preset = _resolve_gen_params(config, args.preset)
    seed = int(_pick(args.seed, config, "plan", "seed", 0))
    n_datasets = int(_pick(args.n_datasets, config, "plan", "truth_n_datasets", 20000))
    truth = generate_truth(params, n_datasets, seed)
    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    identity = {"command": "truth", "preset": preset, "params": _params_dict(params),
                "seed": seed, "n_datasets": n_datasets}
    mid = _write_manifest(out_dir, identity, {})
    _write_truth_csv(out_dir, mid, truth)
    print(f"wrote truth.csv to {out_dir}")
    return 0


def cmd_analyze(args) -> int:
    config = _load_config(args.config)
    dataset = read_dataset_csv(args.dataset)
    violations = validate_dataset(dataset)
    if violations:
        for v in violations:
            print(f"error: subject {v.subject_id}: {v.message}", file=sys.stderr)
        return 1
    methods = _parse_methods(args.methods, config)
    arms = np.array([s.arm for s in dataset.subjects])
    n0 = int((arms == 0).sum())
    n1 = int((arms == 1).sum())
    com_df = {"control": n0 - 1, "treatment": n1 - 1, "difference": n0 + n1 - 2}

    rows = []
    for method in methods:
        cfg = ImputationConfig(
            method=method,
            m=int(_pick(args.m_imputations, config, "imputation", "m", 100)),
            seed=args.seed,
            survival_kind=_pick(None, config, "imputation", "survival_kind", "proportional_hazards"),
            min_donor_pool=int(_pick(None, config, "imputation", "min_donor_pool", 12)),
            mar_conditioning=_pick(None, config, "imputation", "mar_conditioning", "monotone-sequential"),
            gate_probability_override=_pick(None, config, "imputation",
                                            "gate_probability_override", None),
        )
        res = impute_matrix(dataset, cfg)
        est = estimate_matrix(arms, res.endpoints)
        for estimand in ESTIMANDS:
            key = estimand if estimand == "difference" else f"mean_{estimand}"
            vkey = "var_difference" if estimand == "difference" else f"var_{estimand}"
            pooled = pool_rubin(list(zip(est[key], est[vkey])), level=args.level,
                                com_df=com_df[estimand])
            rows.append([method, estimand, _fmt(pooled.point), _fmt(pooled.total ** 0.5),
                         _fmt(pooled.ci_low), _fmt(pooled.ci_high)])

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    identity = {"command": "analyze",
                "dataset_sha256": hashlib.sha256(args.dataset.read_bytes()).hexdigest(),
                "methods": list(methods), "m_imputations": int(args.m_imputations),
                "seed": args.seed, "ci_level": args.level}
    mid = _write_manifest(out_dir, identity, {})
    _write_csv(out_dir / "estimates.csv", mid,
               ["method", "estimand", "estimate", "se", "ci_low", "ci_high"], rows)
    print(f"wrote estimates.csv to {out_dir}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    handlers = {"simulate": cmd_simulate, "analyze": cmd_analyze, "truth": cmd_truth}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrialMIError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
