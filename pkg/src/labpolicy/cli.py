"""Command line entry point: ``labpolicy <command> [options]``.

All commands read and write artifacts in one output directory. Exit codes:
0 success, 2 usage or configuration problem, 3 invariant violation,
4 artifacts built from incompatible inputs.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import binio
from .cohort import (LABS, ConfigError, EmptyCohortError, ParseError, SplitError, cohort_config_hash,
                     cohort_summary, export_events, ingest_events, simulate_cohort, write_summary)
from .forecast import FILTERING, SMOOTHING, FitError, export_forecasts_csv
from .fqi import FqiError, PolicySet, history_to_jsonl
from .mdp import (REWARD_COMPONENTS, STATE_FEATURES, BuildError, ThresholdError, TransitionSet,
                  forecast_admission, kernels_from_dict, kernels_to_dict)
from .ope import EvaluationError, distributions_csv, dump_json
from .pipeline import (ForecastArtifacts, RunConfig, bytes_hash, stage_evaluate, stage_kernels,
                       stage_train, stage_transitions)
from .trees import TreeError, feature_importances

logger = logging.getLogger("labpolicy")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_MISMATCH = 0, 2, 3, 4

EVENTS = "events.csv"
SUMMARY = "cohort_summary.json"
KERNELS = "kernels.json"
TRAIN_TS = "transitions_train.bin"
TEST_TS = "transitions_test.bin"
Q_FILE = "q_ensemble.bin"
POLICY_FILE = "policy.bin"
METRICS = "metrics.jsonl"
TRAIN_SUMMARY = "train_summary.json"
EVALUATION = "evaluation.json"
REPORT = "report.md"


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# helpers ----------------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    cfg = RunConfig.from_dict(raw)
    return cfg


def _path(args, name):
    return os.path.join(args.out, name)


def _require(path):
    if not os.path.isfile(path):
        raise UsageError(f"missing input {path}; run the earlier pipeline stage first")
    return path


def _write_json(obj, path):
    dump_json(obj, path)


def _read_json(path):
    with open(_require(path), encoding="utf-8") as fh:
        return json.load(fh)


def _events_hash(args):
    with open(_require(_path(args, EVENTS)), "rb") as fh:
        return bytes_hash(fh.read())


def _load_admissions(args):
    return ingest_events(_require(_path(args, EVENTS))).admissions


def _load_kernels(args):
    d = _read_json(_path(args, KERNELS))
    if d["events_hash"] != _events_hash(args):
        raise MismatchError(f"{KERNELS} was built from a different {EVENTS}")
    return ForecastArtifacts(d["train_ids"], d["test_ids"], kernels_from_dict(d["kernels"]), d["config_hash"])


def _save_run_config(args, cfg):
    # thread count does not affect results, so it stays out of the record
    d = {k: v for k, v in cfg.to_dict().items() if k != "threads"}
    _write_json({"config": d, "config_hash": binio.config_hash(d)}, _path(args, "run_config.json"))


# commands -----------------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    cohort_cfg = cfg.cohort if args.n_admissions is None else replace(cfg.cohort, n_admissions=args.n_admissions)
    cohort_cfg.validate()
    adm = simulate_cohort(cohort_cfg, n_jobs=cfg.threads)
    export_events(adm, _path(args, EVENTS))
    write_summary(cohort_summary(adm, cohort_config_hash(cohort_cfg)), _path(args, SUMMARY))
    _save_run_config(args, cfg)
    print(f"simulated {len(adm)} admissions -> {_path(args, EVENTS)}")


def cmd_ingest(args, cfg):
    if not args.events or not os.path.isfile(args.events):
        raise UsageError(f"event file not found: {args.events}")
    res = ingest_events(args.events)
    if not res.admissions:
        raise EmptyCohortError(f"no admissions left after filtering ({res.dropped})")
    export_events(res.admissions, _path(args, EVENTS))
    with open(args.events, "rb") as fh:
        source = bytes_hash(fh.read())
    summary = cohort_summary(res.admissions, source)
    summary["dropped"] = dict(sorted(res.dropped.items()))
    write_summary(summary, _path(args, SUMMARY))
    print(f"ingested {len(res.admissions)} admissions, dropped {res.n_dropped} {dict(sorted(res.dropped.items()))}")


def cmd_forecast(args, cfg):
    adm = _load_admissions(args)
    fa = stage_kernels(adm, cfg, _events_hash(args))
    _write_json({"config_hash": fa.config_hash, "events_hash": _events_hash(args),
                 "train_ids": fa.train_ids, "test_ids": fa.test_ids,
                 "kernels": kernels_to_dict(fa.kernels)}, _path(args, KERNELS))
    if args.export_csv:
        use = sorted(adm, key=lambda a: a.admission_id)
        if args.max_admissions is not None:
            use = use[:args.max_admissions]
        rows = []
        for a in use:
            fc = forecast_admission(a, fa.kernels, smoothing=True)
            for lab in LABS:
                rows.append((a.admission_id, FILTERING, fc.filtered[lab]))
                rows.append((a.admission_id, SMOOTHING, fc.smoothed[lab]))
        export_forecasts_csv(rows, _path(args, "forecasts.csv"))
    print(f"fitted {len(fa.kernels)} trait kernels on {len(fa.train_ids)} training admissions")


def _build_transitions(args, cfg):
    adm = _load_admissions(args)
    fa = _load_kernels(args)
    ta = stage_transitions(adm, fa, cfg)
    ta.train.save(_path(args, TRAIN_TS))
    ta.test.save(_path(args, TEST_TS))
    return ta


def cmd_build_transitions(args, cfg):
    ta = _build_transitions(args, cfg)
    print(f"built {len(ta.train)} training and {len(ta.test)} test transitions; "
          f"info thresholds {np.round(ta.thresholds, 4).tolist()}")


def cmd_train(args, cfg):
    if args.iterations is not None:
        cfg.fqi = replace(cfg.fqi, iterations=args.iterations)
    if args.batch_size is not None:
        cfg.fqi = replace(cfg.fqi, batch_size=args.batch_size)
    if not os.path.isfile(_path(args, TRAIN_TS)):
        if not os.path.isfile(_path(args, EVENTS)):
            raise UsageError(f"missing {TRAIN_TS} and {EVENTS} in {args.out}")
        if not os.path.isfile(_path(args, KERNELS)):
            cmd_forecast(argparse.Namespace(**{**vars(args), "export_csv": False}), cfg)
        _build_transitions(args, cfg)
    train = TransitionSet.load(_path(args, TRAIN_TS))
    rows = []

    def log_row(row):
        rows.append(row)
        logger.info("iteration %d mean |dQ| %s", row["iteration"], row["mean_abs_delta_q"])

    art = stage_train(train, cfg, callback=log_row)
    header = {"gamma": cfg.fqi.gamma, "iterations": cfg.fqi.iterations, "batch_size": cfg.fqi.batch_size,
              "epsilon": list(cfg.fqi.epsilon), "seed": cfg.fqi.seed, "config_hash": art.config_hash,
              "transitions_hash": train.meta.get("config_hash"), "components": list(REWARD_COMPONENTS)}
    with open(_path(args, METRICS), "w", encoding="utf-8") as fh:
        fh.write(history_to_jsonl(art.history, header))
    with open(_path(args, Q_FILE), "wb") as fh:
        fh.write(art.q.to_bytes({"config_hash": art.config_hash}))
    with open(_path(args, POLICY_FILE), "wb") as fh:
        fh.write(art.policy.to_bytes())
    importances = {lab: dict(zip(STATE_FEATURES, map(float, feature_importances(c))))
                   for lab, c in zip(LABS, art.policy.classifiers)}
    _write_json({"config_hash": art.config_hash, "epsilon": art.epsilon.tolist(), "tuning": art.tuning,
                 "label_counts": art.policy.meta.get("label_counts"), "n_transitions": len(train),
                 "feature_importances": importances}, _path(args, TRAIN_SUMMARY))
    print(f"trained MO-FQI for {cfg.fqi.iterations} iterations on {len(train)} transitions "
          f"(config {art.config_hash})")


def cmd_evaluate(args, cfg):
    with open(_require(_path(args, POLICY_FILE)), "rb") as fh:
        policy = PolicySet.from_bytes(fh.read())
    train = TransitionSet.load(_require(_path(args, TRAIN_TS)))
    test = TransitionSet.load(_require(_path(args, TEST_TS)))
    want = policy.meta.get("transitions_hash")
    if want != test.meta.get("config_hash") or want != train.meta.get("config_hash"):
        raise MismatchError(f"policy was trained on transitions {want}, test set is "
                            f"{test.meta.get('config_hash')}")
    fa = _load_kernels(args)
    adm = _load_admissions(args)
    test_ids = set(fa.test_ids)
    summary, dist = stage_evaluate(policy, train, test, [a for a in adm if a.admission_id in test_ids],
                                   fa.kernels, cfg)
    summary["policy_hash"] = policy.meta.get("config_hash")
    summary["transitions_hash"] = want
    _write_json(summary, _path(args, EVALUATION))
    distributions_csv(dist["ps_wis.csv"], ("policy", "lab", "component", "value", "std", "ess_min"),
                      _path(args, "ps_wis.csv"))
    distributions_csv(dist["info_gain.csv"], ("source", "lab", "gain"), _path(args, "info_gain.csv"))
    distributions_csv(dist["time_to_treatment.csv"], ("source", "lab", "hours"),
                      _path(args, "time_to_treatment.csv"))
    print(render_report(summary))


def render_report(summary: dict) -> str:
    comps = list(REWARD_COMPONENTS)
    lines = ["# Evaluation report", "",
             f"Test set: {summary['n_test_admissions']} admissions, {summary['n_test_transitions']} transitions.",
             "", "## PS-WIS value per lab (best per component marked *)", ""]
    for lab in LABS:
        lines += [f"### {lab}", "", "| policy | " + " | ".join(comps) + " | min ESS |",
                  "|---" * (len(comps) + 2) + "|"]
        for name, per_lab in summary["ps_wis"].items():
            r = per_lab[lab]
            cells = []
            for c in comps:
                s = f"{r['values'][c]:.4f}"
                if "std" in r:
                    s += f" ± {r['std'][c]:.4f}"
                if summary["best"][lab][c] == name:
                    s += " *"
                cells.append(s)
            lines.append(f"| {name} | " + " | ".join(cells) + f" | {r['ess_min']:.1f} |")
        lines.append("")
    lines += ["## Order reduction", "", "| lab | clinician | recommended | after onset filter | reduction % |",
              "|---|---|---|---|---|"]
    for lab, r in summary["order_reduction"].items():
        pct = "n/a" if r["reduction_percent"] is None else f"{r['reduction_percent']:.1f}"
        lines.append(f"| {lab} | {r['clinician']} | {r['recommended']} | {r['recommended_filtered']} | {pct} |")
    lines += ["", "## Information gain and time to treatment (means)", "",
              "| lab | gain MO-FQI | gain clinician | hours MO-FQI | hours clinician |", "|---|---|---|---|---|"]
    fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
    for lab in LABS:
        g, t = summary["info_gain"], summary["time_to_treatment"]
        lines.append(f"| {lab} | {fmt(g['mo_fqi'][lab]['mean'])} | {fmt(g['clinician'][lab]['mean'])} | "
                     f"{fmt(t['mo_fqi'][lab]['mean'])} | {fmt(t['clinician'][lab]['mean'])} |")
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg):
    summary = _read_json(_path(args, EVALUATION))
    text = render_report(summary)
    with open(_path(args, REPORT), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


COMMANDS = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "forecast": cmd_forecast,
    "build-transitions": cmd_build_transitions, "train": cmd_train, "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides the config file)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for tree fitting")
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("--out", default=".", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="labpolicy", description="Learn and evaluate lab-ordering policies.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a cohort")
    s.add_argument("--n-admissions", type=int, default=None)
    s = sub.add_parser("ingest", parents=[common], help="ingest an event CSV")
    s.add_argument("--events", required=True)
    s = sub.add_parser("forecast", parents=[common], help="fit per-trait forecasters")
    s.add_argument("--export-csv", action="store_true", help="also write hourly lab forecasts")
    s.add_argument("--max-admissions", type=int, default=None)
    sub.add_parser("build-transitions", parents=[common], help="build train/test transition files")
    s = sub.add_parser("train", parents=[common], help="run MO-FQI and extract policies")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    sub.add_parser("evaluate", parents=[common], help="off-policy evaluation on the test set")
    sub.add_parser("report", parents=[common], help="render the evaluation as markdown")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ParseError, EmptyCohortError, SplitError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FqiError, BuildError, ThresholdError, TreeError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
