"""Command-line entry point.

Verbs: ingest, stats, train, eval, sweep, synth, trace. Effective settings
come from defaults < --config file < explicit flags and are echoed at the
start of every run. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import graph as G
from . import plotting, synth, training
from .config import QUESTION_MODES, RunConfig
from .errors import UserInputError
from .model import KnowledgeTracer

OUT_DIR_ENV = "KTGRAPH_OUT"

ABLATIONS = {
    "no-multiset": ("use_multiset", False),
    "no-dual-time": ("use_dual_time", False),
    "no-time": ("use_time", False),
    "no-concept-out": ("use_concept_in_question_output", False),
}

SWEEPABLE = {
    "neighbor_len": int,
    "delta_t_threshold": int,
    "dim": int,
    "dropout": float,
    "lr": float,
    "batch_size": int,
}

_CONFIG_FLAGS = ("seed", "neighbor_len", "dim", "delta_t_threshold", "dropout",
                 "lr", "batch_size", "epochs", "patience", "weight_decay",
                 "min_count", "compute_chunk", "question_mode", "out_dir",
                 "eval_every")


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file (partial files allowed)")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--neighbor-len", type=int, dest="neighbor_len",
                     help="history window length per node")
    sub.add_argument("--dim", type=int, help="hidden/feature dimension")
    sub.add_argument("--delta-t", type=int, dest="delta_t_threshold",
                     help="short/long interval threshold in seconds")
    sub.add_argument("--dropout", type=float)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--patience", type=int,
                     help="early-stop patience in epochs; 0 disables early stopping")
    sub.add_argument("--weight-decay", type=float, dest="weight_decay")
    sub.add_argument("--min-count", type=int, dest="min_count")
    sub.add_argument("--compute-chunk", type=int, dest="compute_chunk")
    sub.add_argument("--eval-every", type=int, dest="eval_every")
    sub.add_argument("--question-mode", choices=QUESTION_MODES, dest="question_mode")
    sub.add_argument("--ablate", action="append", choices=sorted(ABLATIONS),
                     help="disable one model component (repeatable)")
    sub.add_argument("--out-dir", dest="out_dir",
                     help=f"output directory (default ${OUT_DIR_ENV} or .)")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip rendering PNG figures next to the data files")


def effective_config(args, base=None):
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        cfg = cfg.merged(RunConfig.load(args.config).to_dict())
    overrides = {}
    for name in _CONFIG_FLAGS:
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if overrides.get("patience") == 0:
        overrides["patience"] = None
    for tag in getattr(args, "ablate", None) or ():
        field_name, value = ABLATIONS[tag]
        overrides[field_name] = value
    if "out_dir" not in overrides and os.environ.get(OUT_DIR_ENV) and (
            base is None or base.out_dir == "."):
        overrides["out_dir"] = os.environ[OUT_DIR_ENV]
    return cfg.merged(overrides)


def _echo_config(cfg):
    print("config:", json.dumps(cfg.to_dict(), sort_keys=True))


def _out_dir(cfg):
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_counts(graph):
    print("students     %d" % graph.num_students)
    print("questions    %d" % graph.num_questions)
    print("concepts     %d" % graph.num_concepts)
    print("interactions %d" % graph.num_events)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    rows = G.read_interactions_csv(args.input)
    graph = G.ingest(rows, filter_min_count=cfg.min_count)
    G.save_snapshot(graph, args.out)
    _print_counts(graph)
    print(f"snapshot written to {args.out}")
    return 0


def cmd_stats(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    graph = G.load_snapshot(args.graph)
    intervals = G.interval_stats(graph)
    repeats = G.repeat_stats(graph, sample_size=args.sample_size, seed=cfg.seed)
    doc = {
        "counts": {"students": graph.num_students, "questions": graph.num_questions,
                   "concepts": graph.num_concepts, "interactions": graph.num_events},
        "intervals": {
            "bucket_edges_seconds": list(intervals.bucket_edges),
            "bucket_labels": list(G.BUCKET_LABELS),
            "counts": intervals.counts.tolist(),
            "n_intervals": intervals.n_intervals,
            "frac_below_1day": intervals.frac_below_1day,
            "frac_above_1day": intervals.frac_above_1day,
        },
        "repeats": {
            "sampled_pairs": repeats.sampled_pairs,
            "max_repeats": repeats.max_repeats,
            "mean_repeats": repeats.mean_repeats,
            "mean_attempts_before_success": (
                None if np.isnan(repeats.mean_attempts_before_success)
                else repeats.mean_attempts_before_success),
            "never_correct_count": repeats.never_correct_count,
            "max_repeats_per_student": repeats.max_repeats_per_student.tolist(),
            "mean_repeats_per_student": repeats.mean_repeats_per_student.tolist(),
            "attempts_before_success": repeats.attempts_before_success.tolist(),
        },
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"stats written to {args.out}")
    if not args.no_figures:
        fig_path = str(Path(args.out).with_suffix(".png"))
        plotting.save_stats_figure(intervals, repeats, fig_path)
        print(f"figure written to {fig_path}")
    return 0


def _train_one(graph, cfg, progress=True):
    split = G.plan_split(graph, cfg.split_ratios)
    model = KnowledgeTracer(cfg, graph.num_questions, graph.num_concepts)
    callback = None
    if progress:
        def callback(rec):
            print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  "
                  f"val_ap {rec.val_ap:.4f}  val_auc {rec.val_auc:.4f}  "
                  f"{rec.seconds:.1f}s")
    result = training.train(graph, split, model, cfg, progress=callback)
    return split, model, result


def cmd_train(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    out = _out_dir(cfg)
    graph = G.load_snapshot(args.graph)
    split, model, result = _train_one(graph, cfg)
    if result.diverged:
        print("warning: training diverged; keeping last finite checkpoint",
              file=sys.stderr)

    ckpt_path = out / "checkpoint.ckpt"
    training.save_checkpoint(ckpt_path, model, cfg)
    training.write_train_log(out / "train_log.csv", result.log)

    trans = training.evaluate(graph, split, model, "transductive", cfg.compute_chunk)
    ind = training.evaluate(graph, split, model, "inductive", cfg.compute_chunk)
    (out / "eval_transductive.txt").write_text(trans.to_text(), encoding="utf-8")
    (out / "eval_inductive.txt").write_text(ind.to_text(), encoding="utf-8")

    summary = {
        "parameter_count": model.parameter_count(),
        "parameter_mb": model.parameter_count() * 8 / 1e6,
        "train_seconds": result.wall_time_s,
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_val_auc,
        "diverged": result.diverged,
        "learning_model": "twin recurrent towers over a dynamic interaction graph",
        "time_encoder": "dual affine (threshold on interval length)",
        "transductive": {"ap": trans.ap, "auc": trans.auc, "defined": trans.defined},
        "inductive": {"ap": ind.ap, "auc": ind.auc, "defined": ind.defined},
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, default=float)
        fh.write("\n")
    if not args.no_figures and result.log:
        plotting.save_training_curves(result.log, out / "training_curves.png")

    print(f"checkpoint: {ckpt_path}")
    print(f"transductive: ap={trans.ap:.4f} auc={trans.auc:.4f}" if trans.defined
          else "transductive: undefined")
    print(f"inductive:    ap={ind.ap:.4f} auc={ind.auc:.4f}" if ind.defined
          else "inductive:    undefined (no unseen-question test events)")
    return 0


def _model_for_checkpoint(args, graph):
    """Build a model matching the checkpoint (stored config + CLI overrides)."""
    header = training.read_checkpoint_header(args.checkpoint)
    base = RunConfig.from_dict(header["config"])
    cfg = effective_config(args, base=base)
    model = KnowledgeTracer(cfg, graph.num_questions, graph.num_concepts)
    training.load_checkpoint(args.checkpoint, model, cfg)
    return cfg, model


def cmd_eval(args):
    graph = G.load_snapshot(args.graph)
    cfg, model = _model_for_checkpoint(args, graph)
    _echo_config(cfg)
    split = G.plan_split(graph, cfg.split_ratios)
    mode = {"trans": "transductive", "ind": "inductive"}[args.mode]
    report = training.evaluate(graph, split, model, mode, cfg.compute_chunk)
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report written to {args.out}")
    return 0


def cmd_sweep(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    out = _out_dir(cfg)
    if args.param not in SWEEPABLE:
        raise UserInputError(
            f"parameter {args.param!r} is not sweepable; choose from "
            f"{sorted(SWEEPABLE)}")
    cast = SWEEPABLE[args.param]
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UserInputError(f"bad --values list: {exc}") from None
    if not values:
        raise UserInputError("--values is empty")

    graph = G.load_snapshot(args.graph)
    rows = []
    for value in values:
        run_cfg = cfg.merged({args.param: value})
        print(f"--- {args.param}={value}")
        try:
            split, model, _ = _train_one(graph, run_cfg, progress=False)
            trans = training.evaluate(graph, split, model, "transductive",
                                      run_cfg.compute_chunk)
            ind = training.evaluate(graph, split, model, "inductive",
                                    run_cfg.compute_chunk)
            rows.append((value, trans.ap, trans.auc, ind.ap, ind.auc, None))
            print(f"    ap={trans.ap:.4f} auc={trans.auc:.4f}")
        except Exception as exc:  # record the failure, keep sweeping
            rows.append((value, float("nan"), float("nan"), float("nan"),
                         float("nan"), str(exc)))
            print(f"    failed: {exc}", file=sys.stderr)

    table_path = out / "sweep.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(f"{args.param},trans_ap,trans_auc,ind_ap,ind_auc,error\n")
        for value, tap, tauc, iap, iauc, err in rows:
            fh.write(f"{value},{tap:.6f},{tauc:.6f},{iap:.6f},{iauc:.6f},"
                     f"{err or ''}\n")
    print(f"sweep table written to {table_path}")
    if not args.no_figures:
        plotting.save_sweep_figure(rows, args.param, out / "sweep.png")
    return 0


def cmd_synth(args):
    cfg = effective_config(args)
    _echo_config(cfg)
    result = synth.generate(args.students, args.questions, args.concepts,
                            args.events, args.pattern, seed=cfg.seed)
    G.write_interactions_csv(result.rows, args.out)
    meta_path = args.out + ".meta.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(result.meta, fh, indent=2)
        fh.write("\n")
    print(f"{len(result.rows)} events written to {args.out}")
    print(f"generator parameters written to {meta_path}")
    return 0


def cmd_trace(args):
    graph = G.load_snapshot(args.graph)
    cfg, model = _model_for_checkpoint(args, graph)
    _echo_config(cfg)
    out = _out_dir(cfg)
    trace = training.mastery_trace(graph, model, args.student, args.question,
                                   upto=args.upto, steps=args.steps)
    if trace.truncated:
        print(f"notice: only {len(trace.steps)} events available before the "
              f"requested horizon; trace truncated")
    trace_path = out / f"trace_s{args.student}_q{args.question}.csv"
    training.write_trace_csv(trace_path, trace)
    print(f"trace written to {trace_path}")
    for s in trace.steps:
        print(f"step {s.step:3d} t={s.timestamp} p={s.probability:.4f} "
              f"gap={s.gap_bucket:7s} multiset={s.multiset_flag}")
    if not args.no_figures:
        fig_path = out / f"trace_s{args.student}_q{args.question}.png"
        plotting.save_trace_figure(trace, fig_path)
        print(f"figure written to {fig_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ktgraph",
        description="Knowledge tracing on a continuous-time interaction graph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a CSV and write a graph snapshot")
    p.add_argument("--input", required=True, help="interaction CSV")
    p.add_argument("--out", required=True, help="snapshot output path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="interval and repetition statistics")
    p.add_argument("--graph", required=True, help="graph snapshot")
    p.add_argument("--out", required=True, help="JSON output path")
    p.add_argument("--sample-size", type=int, default=10000)
    _add_config_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train and evaluate a model")
    p.add_argument("--graph", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("trans", "ind"), default="trans")
    p.add_argument("--out", help="also write the report to this path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train once per value of one parameter")
    p.add_argument("--graph", required=True)
    p.add_argument("--param", required=True, help=f"one of {sorted(SWEEPABLE)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic interaction CSV")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--questions", type=int, required=True)
    p.add_argument("--concepts", type=int, required=True)
    p.add_argument("--events", type=int, required=True)
    p.add_argument("--pattern", choices=synth.PATTERNS, required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("trace", help="export a mastery trace for one pair")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--student", type=int, required=True)
    p.add_argument("--question", type=int, required=True)
    p.add_argument("--steps", type=int, default=15)
    p.add_argument("--upto", type=int, help="horizon timestamp (default: end of log)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args) or 0
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
