"""Command-line entry point: ``ioh-tta <subcommand> ...``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bank as bank_io
from . import experiment as X
from . import forecaster as fc
from . import synth
from .config import ExperimentConfig, load_config, serialize_config
from .detection import detect
from .errors import ConfigError, FormatError, GenerationError, InputError
from .evaluation import build_report
from .series import WindowSpec, read_cohort, segment_series

log = logging.getLogger("ioh_tta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg.with_overrides(getattr(args, "set", None))


def _need(value: str, what: str) -> Path:
    if not value:
        raise UsageError(f"{what} is not set (use the config file or --set)")
    return Path(value)


def _load_cohort(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"cohort directory not found: {directory}")
    cohort = read_cohort(directory)
    if not cohort:
        raise InputError(f"no patient CSV files in {directory}")
    return cohort


def _write_json(doc, path: Path | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args)
    cohort = synth.generate(X.cohort_spec(cfg, args.seed))
    paths = synth.write_cohort(cohort, args.out)
    spec = X.window_spec(cfg)
    rate = synth.window_rate(cohort, spec.lookback_steps, spec.horizon_steps)
    _write_json({"patients": len(paths), "out": str(args.out), "window_rate": rate}, None)


def cmd_ingest(args) -> None:
    cfg = _config(args)
    cohort = _load_cohort(args.cohort)
    spec = X.window_spec(cfg.replace(sampling_interval=cohort[0].sampling_interval))
    patients = []
    for s in cohort:
        samples = segment_series(s, WindowSpec(spec.lookback_steps, spec.horizon_steps, 1))
        patients.append({"patient_id": s.patient_id, "steps": s.n_steps,
                         "sampling_interval": s.sampling_interval,
                         "channels": list(s.channel_names),
                         "invalid_fraction": float(1 - s.valid_mask.mean()),
                         "windows": len(samples),
                         "hypo_windows": int(sum(x.label for x in samples))})
    intervals = sorted({p["sampling_interval"] for p in patients})
    if len(intervals) > 1:
        raise InputError(f"mixed sampling intervals in cohort: {intervals}")
    total = sum(p["windows"] for p in patients)
    doc = {"patients": patients, "n_patients": len(patients), "windows": total,
           "window_rate": sum(p["hypo_windows"] for p in patients) / total if total else 0.0}
    _write_json(doc, Path(args.out) if args.out else None)


def cmd_build_bank(args) -> None:
    cohort = _load_cohort(args.cohort)
    interval = cohort[0].sampling_interval
    if abs(interval - args.interval_s) > 1e-9:
        raise InputError(f"cohort sampling interval is {interval:g} s, --interval-s is "
                         f"{args.interval_s:g}")
    cfg = _config(args).replace(lookback_min=args.lookback_min, horizon_min=args.horizon_min,
                                sampling_interval=args.interval_s, k_hypo=args.k_hypo,
                                k_nonhypo=args.k_nonhypo)
    bank = X.make_bank(cohort, cfg, args.seed)
    bank_io.save_bank(bank, args.out)
    _write_json({"out": str(args.out), "hypo": len(bank.samples_hypo),
                 "nonhypo": len(bank.samples_nonhypo),
                 "k_hypo": bank.model_hypo.k, "k_nonhypo": bank.model_nonhypo.k}, None)


def cmd_train(args) -> None:
    cfg = _config(args)
    cohort = _load_cohort(args.cohort or _need(cfg.cohort_dir, "cohort_dir"))
    out = Path(args.out) if args.out else _need(cfg.checkpoint, "checkpoint")
    cfg = cfg.replace(sampling_interval=cohort[0].sampling_interval)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    params, history = X.train_model(cohort, cfg, seed)
    fc.save_checkpoint(params, out)
    _write_json({"out": str(out), "epochs": len(history), "loss": history}, None)


def _adapt_eval_once(cfg, cohort, params, bank, seed, out_dir: Path) -> dict:
    spec = X.window_spec(cfg)
    if params.lookback != spec.lookback_steps or params.horizon != spec.horizon_steps:
        raise InputError(f"checkpoint expects L={params.lookback}, H={params.horizon}; "
                         f"config gives L={spec.lookback_steps}, H={spec.horizon_steps}")
    use_bank = bank if cfg.strategy == "csa_tta" else None
    result = X.evaluate_cohort(cohort, params, use_bank, X.tta_config(cfg, seed), spec,
                               X.detector_config(cfg), keep_log=True)
    problems = X.audit_leakage(result.runs, bank, [s.patient_id for s in cohort], spec)
    if problems:
        for p in problems[:20]:
            log.error("leakage: %s", p)
        raise InvariantError(f"{len(problems)} leakage violations")
    tag = f"{cfg.strategy}_seed{seed}"
    with open(out_dir / f"predictions_{tag}.ndjson", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    if use_bank is not None:
        (out_dir / f"retrieval_{tag}.ndjson").write_text(result.retrieval_log.to_ndjson())
    summary = result.summary()
    meta = {"strategy": cfg.strategy, "mode": cfg.mode, "seed": seed,
            "horizon_min": cfg.horizon_min, "n_patients": len(cohort),
            "novel_windows": summary["novel_windows"], "novel_recall": summary["novel_recall"],
            "updates": summary["updates"]}
    doc = build_report({f"{cfg.horizon_min:g}min": result.metrics}, meta)
    _write_json(doc, out_dir / f"report_{tag}.json")
    log.info("%s: mse %.3f recall %.3f (%.1f s)", tag, result.metrics.mse,
             result.metrics.recall, result.seconds)
    return doc


def cmd_adapt_eval(args) -> None:
    cfg = _config(args)
    cohort = _load_cohort(_need(cfg.test_dir, "test_dir"))
    interval = cohort[0].sampling_interval
    cfg = cfg.replace(sampling_interval=interval)
    params = fc.load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    bank = None
    if cfg.strategy == "csa_tta" or cfg.bank_file:
        bank = bank_io.load_bank(_need(cfg.bank_file, "bank_file"))
        if abs(bank.sampling_interval - interval) > 1e-9:
            raise InputError("bank and test cohort sampling intervals differ")
    out_dir = _need(cfg.out_dir, "out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"config_{cfg.strategy}.txt").write_text(serialize_config(cfg))
    docs = [_adapt_eval_once(cfg, cohort, params, bank, seed, out_dir) for seed in cfg.seeds]
    _write_json({"reports": len(docs), "out_dir": str(out_dir)}, None)


def cmd_detect(args) -> None:
    cfg = _config(args)
    det = X.detector_config(cfg)
    path = Path(args.pred)
    if not path.is_file():
        raise InputError(f"prediction file not found: {path}")
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pred = rec["pred"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise InputError(f"{path}:{n}: not a prediction record") from None
            doc = {"patient_id": rec.get("patient_id"), "window_start": rec.get("window_start"),
                   **detect(pred, det).to_dict()}
            out.write(json.dumps(doc, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _report_files(inputs) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("report_*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise InputError(f"report input not found: {p}")
    if not files:
        raise InputError("no report files found")
    return files


METRIC_KEYS = ("mae", "mse", "accuracy", "recall", "precision", "f1")


def aggregate_reports(docs: list[dict]) -> dict:
    """Mean and population std over seeds for each (mode, strategy, horizon)."""
    groups: dict[tuple, dict[str, list]] = {}
    for doc in docs:
        meta = doc.get("meta", {})
        key = (meta.get("mode", "?"), meta.get("strategy", "?"))
        blocks = dict(doc["per_horizon"])
        blocks["average"] = doc["average"]
        for h, metrics in blocks.items():
            slot = groups.setdefault(key, {}).setdefault(h, [])
            slot.append({**{k: metrics[k] for k in METRIC_KEYS},
                         "novel_recall": meta.get("novel_recall", float("nan"))})
    table = []
    for (mode, strategy), per_h in sorted(groups.items()):
        for h, rows in sorted(per_h.items()):
            entry = {"mode": mode, "strategy": strategy, "horizon": h, "runs": len(rows)}
            for k in (*METRIC_KEYS, "novel_recall"):
                vals = np.array([r[k] for r in rows], dtype=float)
                entry[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
            table.append(entry)
    return {"rows": table}


def format_table(agg: dict) -> str:
    head = f"{'mode':<11} {'strategy':<16} {'horizon':<8} " + " ".join(
        f"{k:>15}" for k in METRIC_KEYS)
    lines = [head, "-" * len(head)]
    for row in agg["rows"]:
        cells = " ".join(f"{row[k]['mean']:7.3f}±{row[k]['std']:<7.3f}" for k in METRIC_KEYS)
        lines.append(f"{row['mode']:<11} {row['strategy']:<16} {row['horizon']:<8} {cells}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> None:
    docs = []
    for path in _report_files(args.inputs):
        try:
            docs.append(json.loads(path.read_text()))
        except json.JSONDecodeError:
            raise InputError(f"{path}: not a JSON report") from None
    try:
        agg = aggregate_reports(docs)
    except KeyError as exc:
        raise InputError(f"report missing field {exc}") from None
    if args.out:
        _write_json(agg, Path(args.out))
    sys.stdout.write(format_table(agg))


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ioh-tta", description="Cross-sample test-time adaptation for "
                                             "MAP forecasting and hypotension detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    sp.add_argument("--spec", dest="config", required=True, help="config file with cohort keys")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ingest", help="validate a CSV cohort and summarize it")
    common(sp)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("build-bank", help="build the cross-sample bank")
    common(sp)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k-hypo", type=int, default=8)
    sp.add_argument("--k-nonhypo", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lookback-min", type=float, default=15.0)
    sp.add_argument("--horizon-min", type=float, choices=(5.0, 10.0, 15.0), default=5.0)
    sp.add_argument("--interval-s", type=float, choices=(2.0, 30.0), default=30.0)
    sp.set_defaults(func=cmd_build_bank)

    sp = sub.add_parser("train", help="offline fine-tuning on the training cohort")
    common(sp)
    sp.add_argument("--cohort")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt-eval", help="stream the test cohort and score it")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_adapt_eval)

    sp = sub.add_parser("detect", help="event probabilities for a prediction file")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("report", help="mean ± std over seeds of report files")
    sp.add_argument("inputs", nargs="+", help="report JSON files or directories")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    where = f"ioh-tta {args.command}"
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{where}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FormatError, GenerationError, OSError) as exc:
        print(f"{where}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, FloatingPointError, AssertionError) as exc:
        print(f"{where}: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
