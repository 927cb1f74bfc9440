"""Command-line entry point: simulate, eval, compare, compress, train, plotdata."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .compression import (
    ModelFile, PruneSpec, QuantSpec, append_provenance, load_model, parse_codec_spec, prune_model,
    quantize_model, save_model, with_inference_option,
)
from .errors import EmbodiedError, TrainingDivergedError, ValidationError
from .metrics import (
    METRICS, UNDEFINED, MetricVector, NormalizedRow, SuiteSummary, aggregate_over_suites,
    episode_metrics, format_normalized, format_raw, format_sr, format_value,
    normalize_to_baseline, summarize,
)
from .policy import TrainConfig, save_policy, train
from .sim import expand_scenario, scenario_from_dict
from .trajectory import (
    MANIFEST_NAME, PLANES, atomic_write_bytes, iter_suite_files, project_trajectory,
    read_episode, read_suite, write_suite,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CSV_COLUMNS = ("suite", "run", "SR", *METRICS, "n_success", "N")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # flag problems are validation errors, so they share exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _num(x) -> str:
    return UNDEFINED if x is None else repr(float(x))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_suffix(suffix) if path.suffix != suffix else path.with_name(path.name + suffix)


# -- simulate ------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    scenario_path = Path(args.scenario)
    try:
        data = json.loads(scenario_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read scenario {scenario_path}: {exc}") from None
    scenario = scenario_from_dict(data, base_dir=scenario_path.parent)
    stop = args.stop or scenario.stop
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ValidationError(f"output {out} exists and is not an empty directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.", suffix=".tmp"))
    try:
        episodes = expand_scenario(scenario, stop=stop)
        write_suite(tmp, episodes, meta={
            "tool": "embeff simulate", "version": __version__, "stop": stop,
            "scenario": data, "scenario_sha256": _sha256(scenario_path),
        })
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    n_ok = sum(e.success for e in episodes)
    print(f"wrote {len(episodes)} episodes ({n_ok} successful) to {out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------

def evaluate_suites(dirs):
    """Per-episode records, per-(suite, run) summaries and per-file errors."""
    records, errors, groups = [], [], {}
    for d in dirs:
        d = Path(d)
        try:
            paths = list(iter_suite_files(d))
        except (OSError, ValueError, EmbodiedError) as exc:
            errors.append({"file": str(d / MANIFEST_NAME), "error": str(exc)})
            continue
        for path in paths:
            try:
                ep = read_episode(path)
                metrics = episode_metrics(ep) if ep.success else _try_metrics(ep)
            except (OSError, EmbodiedError) as exc:
                errors.append({"file": str(path), "error": str(exc)})
                continue
            records.append({
                "type": "episode", "suite": ep.suite_id, "run": ep.run_tag,
                "file": str(path), "task_id": ep.task_id, "success": ep.success, "T": ep.T,
                "metrics": metrics.as_dict() if metrics else None,
            })
            groups.setdefault((ep.suite_id, ep.run_tag), []).append((metrics, ep.success))
    summaries = [summarize([m for m, _ in g], [s for _, s in g], suite_id=k[0], run_tag=k[1])
                 for k, g in groups.items()]
    return records, summaries, errors


def _try_metrics(ep):
    try:
        return episode_metrics(ep)
    except EmbodiedError:
        return None


def summary_record(s: SuiteSummary) -> dict:
    return {"type": "summary", "suite": s.suite_id, "run": s.run_tag, "SR": s.SR,
            "means": s.means.as_dict() if s.means else None,
            "means_defined": s.means_defined, "n_success": s.n_success, "N": s.N}


def summaries_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in summaries:
        means = [getattr(s.means, m) if s.means else None for m in METRICS]
        w.writerow([s.suite_id, s.run_tag, _num(s.SR), *map(_num, means), s.n_success, s.N])
    return buf.getvalue()


def cmd_eval(args) -> int:
    records, summaries, errors = evaluate_suites(args.suite)
    out = Path(args.out)
    lines = records + [summary_record(s) for s in summaries]
    lines += [{"type": "error", **e} for e in errors]
    _write_text(out, summaries_csv(summaries))
    _write_text(_sibling(out, ".jsonl"), "".join(json.dumps(r) + "\n" for r in lines))
    for s in summaries:
        flag = "" if s.means_defined else f"  means {UNDEFINED} (no successful episodes)"
        print(f"{s.suite_id}/{s.run_tag}: SR {100 * s.SR:.1f}% ({s.n_success}/{s.N}){flag}")
    for e in errors:
        print(f"error: {e['file']}: {e['error']}", file=sys.stderr)
    return EXIT_INVALID if errors else EXIT_OK


# -- compare -------------------------------------------------------------------------------

def load_summaries(path) -> list[SuiteSummary]:
    """Read summaries from an ``eval`` CSV or JSONL output."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    try:
        out = _parse_summaries(path, text)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad summary record: {exc!r}") from None
    if not out:
        raise ValidationError(f"{path}: no summary records")
    return out


def _parse_summaries(path: Path, text: str) -> list[SuiteSummary]:
    out = []
    if path.suffix == ".jsonl":
        for line in text.splitlines():
            rec = json.loads(line) if line.strip() else {}
            if rec.get("type") == "summary":
                means = MetricVector(**rec["means"]) if rec["means"] else None
                out.append(SuiteSummary(rec["SR"], means, rec["n_success"], rec["N"],
                                        rec["suite"], rec["run"]))
    else:
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and set(CSV_COLUMNS) - set(rows[0]):
            raise ValidationError(f"{path}: missing columns {sorted(set(CSV_COLUMNS) - set(rows[0]))}")
        for r in rows:
            n_success = int(r["n_success"])
            means = None
            if n_success:
                means = MetricVector(**{m: float(r[m]) for m in METRICS})
            out.append(SuiteSummary(float(r["SR"]), means, n_success, int(r["N"]),
                                    r["suite"], r["run"]))
    return out


def _cell_record(cell) -> dict:
    return {"value": cell.value, "delta": cell.delta, "baseline": cell.baseline,
            "variant": cell.variant, "n_suites": cell.n_suites, "n_total": cell.n_total}


def _row_record(row: NormalizedRow) -> dict:
    return {"run": row.run_tag, "suite": row.suite_id, "SR_baseline": row.SR_baseline,
            "SR_variant": row.SR_variant, "SR_delta_pp": row.SR_delta_pp,
            "cells": {m: _cell_record(c) for m, c in row.cells.items()}}


def build_comparison(baseline: list[SuiteSummary], variants: list[SuiteSummary],
                     by_suite: bool = False) -> dict:
    """Normalize every variant run against the baseline, suite by suite.

    Without ``by_suite`` a single-suite baseline is compared with each run
    directly, whatever the suite labels say.
    """
    if len({s.run_tag for s in baseline}) != 1:
        raise ValidationError("baseline file must hold exactly one run")
    runs = {}
    for s in variants:
        runs.setdefault(s.run_tag, []).append(s)
    base_by_suite = {s.suite_id: s for s in baseline}
    sections, aggregated, missing = {}, [], []
    for run, summaries in runs.items():
        if not by_suite and len(baseline) == 1 and len(summaries) == 1:
            pairs = [(baseline[0], summaries[0])]
        else:
            pairs = [(base_by_suite[s.suite_id], s) for s in summaries
                     if s.suite_id in base_by_suite]
            missing += [f"{run}/{s.suite_id}" for s in summaries if s.suite_id not in base_by_suite]
        if not pairs:
            raise ValidationError(f"run {run!r} shares no suite with the baseline")
        rows = [normalize_to_baseline(b, v) for b, v in pairs]
        for row in rows:
            sections.setdefault(row.suite_id, []).append(row)
        if len(rows) >= 2:
            aggregated.append(aggregate_over_suites(rows))
    return {"baseline": baseline[0].run_tag, "runs": list(runs), "sections": sections,
            "aggregated": aggregated, "missing": missing}


def _normalized_table(rows) -> list[str]:
    lines = ["| Metric | baseline | " + " | ".join(r.run_tag for r in rows) + " |",
             "|---|---|" + "---|" * len(rows)]
    lines.append("| SR (%) | " + format_sr(rows[0].SR_baseline) + " | "
                 + " | ".join(format_sr(r.SR_variant, r.SR_baseline) for r in rows) + " |")
    for m in METRICS:
        lines.append(f"| {m} | 100.0 | " + " | ".join(format_normalized(r.cells[m]) for r in rows) + " |")
    return lines


def _raw_table(rows) -> list[str]:
    lines = ["| Metric | " + rows[0].baseline_tag + " | " + " | ".join(r.run_tag for r in rows) + " |",
             "|---|---|" + "---|" * len(rows)]
    for m in METRICS:
        b = rows[0].cells[m].baseline
        base = UNDEFINED if b is None else format_value(b)
        lines.append(f"| {m} | {base} | " + " | ".join(format_raw(r.cells[m]) for r in rows) + " |")
    return lines


def comparison_markdown(report: dict, by_suite: bool) -> str:
    lines = [f"# Comparison against `{report['baseline']}`", ""]
    sections = report["sections"]
    show = by_suite or len(sections) == 1 or not report["aggregated"]
    if show:
        for suite, rows in sections.items():
            lines += [f"## Suite `{suite}`", "", "Normalized (baseline = 100):", ""]
            lines += _normalized_table(rows)
            lines += ["", "Raw success-conditional means:", ""]
            lines += _raw_table(rows) + [""]
    if report["aggregated"]:
        n = max(r.cells[METRICS[0]].n_total for r in report["aggregated"])
        lines += [f"## Aggregated over {n} suites (equal weight)", ""]
        lines += _normalized_table(report["aggregated"]) + [""]
    lines += ["SR in percent with percentage-point change; other metrics averaged over "
              "successful episodes only.", ""]
    if report["missing"]:
        lines += ["Suites without a baseline: " + ", ".join(report["missing"]), ""]
    return "\n".join(lines)


def cmd_compare(args) -> int:
    baseline = load_summaries(args.baseline)
    variants = [s for p in args.variant for s in load_summaries(p)]
    report = build_comparison(baseline, variants, args.by_suite)
    record = {
        "baseline": report["baseline"], "runs": report["runs"],
        "sections": {k: [_row_record(r) for r in v] for k, v in report["sections"].items()},
        "aggregated": [_row_record(r) for r in report["aggregated"]] or None,
        "missing": report["missing"],
        "provenance": {
            "tool": "embeff compare", "version": __version__, "by_suite": args.by_suite,
            "baseline": {"path": str(args.baseline), "sha256": _sha256(args.baseline)},
            "variants": [{"path": str(p), "sha256": _sha256(p)} for p in args.variant],
        },
    }
    out = Path(args.out)
    json_path = out if out.suffix != ".md" else out.with_suffix(".json")
    md = comparison_markdown(report, args.by_suite)
    _write_text(json_path, json.dumps(record, indent=2, allow_nan=False) + "\n")
    _write_text(_sibling(json_path, ".md"), md)
    print(md)
    return EXIT_OK


# -- compress ------------------------------------------------------------------------------

def cmd_compress(args) -> int:
    if args.scope is not None and args.prune is None:
        raise UsageError("--scope only applies to --prune")
    model = load_model(args.model)
    record = {"tool": "embeff compress", "version": __version__,
              "source": {"path": str(args.model), "sha256": _sha256(args.model)}}
    if args.prune is not None:
        spec = PruneSpec(args.prune, args.scope or "per_tensor")
        model = prune_model(model, spec)
        record.update(op="prune", ratio=spec.ratio, scope=spec.scope, tensors="weights")
    elif args.quant_bits is not None:
        spec = QuantSpec(args.quant_bits)
        model = quantize_model(model, spec)
        record.update(op="quantize", bits=spec.bits, mode="symmetric_per_tensor",
                      rounding="half_away_from_zero")
    elif args.token_prune is not None:
        if not 0 <= args.token_prune < 1:
            raise ValidationError("token prune ratio must lie in [0, 1)")
        model = with_inference_option(model, "token_prune", args.token_prune)
        record.update(op="token_prune", ratio=args.token_prune, scorer="l2_norm")
    else:
        keep, qstep = parse_codec_spec(args.action_codec)
        model = with_inference_option(model, "action_codec", {"keep": keep, "qstep": qstep})
        record.update(op="action_codec", keep="all" if keep is None else keep, qstep=qstep)
    save_model(args.out, ModelFile(model.tensors, append_provenance(model.meta, record)))
    print(f"wrote {args.out} ({record['op']})")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from None
    if args.eta is not None:
        data["eta"] = args.eta
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TrainConfig.from_dict(data)
    demos = read_suite(args.demos)
    out = Path(args.out)
    meta = {"train": {"config": cfg.as_dict(), "demos": str(args.demos),
                      "n_demos": demos.N, "tool": "embeff train", "version": __version__}}
    try:
        result = train(cfg, demos)
    except TrainingDivergedError as exc:
        save_policy(out.with_name(out.name + ".last_finite"), exc.policy, meta)
        print(f"error: {exc}; last finite weights saved next to {out}", file=sys.stderr)
        return EXIT_RUNTIME
    final = result.history[-1]
    meta["train"]["final_loss"] = {"bc": final.bc, "jerk_term": final.jerk_term,
                                   "rate_term": final.rate_term, "total": final.total}
    save_policy(out, result.policy, meta)
    _write_text(_sibling(out, ".loss.csv"), result.history_csv())
    print(f"wrote {out}; final loss {final.total:.6g} (bc {final.bc:.6g})")
    return EXIT_OK


# -- plotdata ------------------------------------------------------------------------------

def cmd_plotdata(args) -> int:
    run = read_suite(args.suite)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ep in zip(run.files, run.episodes):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "u", "v"])
        for t, (u, v) in enumerate(project_trajectory(ep, args.plane), start=1):
            w.writerow([t, repr(u), repr(v)])
        _write_text(out / (Path(name).stem + ".csv"), buf.getvalue())
    print(f"wrote {run.N} {args.plane} projections to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def _ratio(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(x):
        raise argparse.ArgumentTypeError("must be finite")
    return x


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embeff", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="expand a scenario file into a suite directory")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stop", choices=("fixed", "first10"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="compute metrics for one or more suites")
    p.add_argument("--suite", required=True, nargs="+")
    p.add_argument("--out", required=True, help="CSV path; a .jsonl sibling is also written")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="baseline-normalized comparison report")
    p.add_argument("--baseline", required=True)
    p.add_argument("--variant", required=True, nargs="+")
    p.add_argument("--by-suite", action="store_true")
    p.add_argument("--out", required=True, help="JSON path; a .md sibling is also written")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("compress", help="prune, quantize or attach inference compression")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--prune", type=_ratio, metavar="R")
    g.add_argument("--quant-bits", type=int, metavar="B")
    g.add_argument("--token-prune", type=_ratio, metavar="R")
    g.add_argument("--action-codec", metavar="keep=K,qstep=S")
    p.add_argument("--scope", choices=("per_tensor", "global"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="behavior cloning with jerk and action-rate penalties")
    p.add_argument("--config", required=True)
    p.add_argument("--demos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=_ratio)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plotdata", help="per-episode plane projections as CSV")
    p.add_argument("--suite", required=True)
    p.add_argument("--plane", required=True, type=str.lower, choices=sorted(PLANES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except EmbodiedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
