"""Command-line front end.

Subcommands: ``gen-synth`` (synthetic dataset), ``train``, ``eval``,
``ablate`` (expert-subset study), and ``grad-check`` (finite-difference
health check).  Exit codes: 0 success, 1 validation error, 2 runtime
failure.  Reports are written as JSON next to aligned text tables, and
every run echoes its fully resolved config so results are self-describing.
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace

import numpy as np

from . import dataio
from .config import config_hash, config_to_dict, resolve_config
from .exceptions import ConfigError, DataIntegrityError, FormatError, TrainingDiverged
from .gradcheck import run_gradient_suite
from .metrics import evaluate_model, format_reports, report_metrics, report_to_dict
from .params import init_model_params
from .training import load_checkpoint, restore_params, train

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")


def _write_json(path, doc):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(run):
    """Writes the resolved config into the run directory and announces it."""
    path = os.path.join(run.out_dir, "resolved_config.json")
    _write_json(path, config_to_dict(run))
    digest = config_hash(run)
    print(f"resolved config: {path} (sha256 {digest[:12]})")
    return digest


def _load_records(run, split, allow_extra=False):
    entries = dataio.load_manifest(os.path.join(run.data_dir, dataio.MANIFEST_NAME))
    dataio.check_manifest(entries, run.data_dir, run.model, allow_extra=allow_extra)
    return dataio.load_split(entries, run.data_dir, run.model, split)


def _restrict_experts(run, names):
    """Run config narrowed to an expert subset, keeping configured order."""
    keep = tuple(e for e in run.model.experts if e.name in names)
    return replace(run, model=replace(run.model, experts=keep))


def aggregate_reports(reports_by_seed):
    """Mean and population std of every metric across seeds, per direction."""
    reports_by_seed = list(reports_by_seed)
    out = {}
    for direction in ("text_to_video", "video_to_text"):
        rows = [report_metrics(rep[direction]) for rep in reports_by_seed]
        out[direction] = {
            name: {
                "mean": float(np.mean([r[name] for r in rows])),
                "std": float(np.std([r[name] for r in rows])),
            }
            for name in rows[0]
        }
    return out


def format_aggregate(agg) -> str:
    """Aligned mean ± std table, one row per direction."""
    names = list(next(iter(agg.values())))
    rows = [["direction"] + names]
    for direction, stats in agg.items():
        rows.append(
            [direction]
            + [f"{stats[n]['mean']:.4f} ± {stats[n]['std']:.4f}" for n in names]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
    )


def cmd_gen_synth(args) -> int:
    spec = dataio.resolve_synth_spec(_load_json(args.spec))
    manifest = dataio.gen_synthetic(spec, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = resolve_config(_load_json(args.config))
    if args.resume is not None and len(run.seeds) != 1:
        raise ConfigError("--resume requires a config with exactly one seed")
    digest = _echo_config(run)
    records = _load_records(run, run.train_split)
    for seed in run.seeds:
        seed_dir = os.path.join(run.out_dir, f"seed{seed}")
        params, loss_log = train(
            records, run.model, run.optim, seed,
            config_digest=digest,
            checkpoint_dir=seed_dir,
            resume_from=args.resume,
        )
        log_path = os.path.join(seed_dir, "loss_log.jsonl")
        with open(log_path, "a" if args.resume else "w", encoding="utf-8") as fh:
            for entry in loss_log:
                fh.write(json.dumps(entry) + "\n")
        final = loss_log[-1]["loss"] if loss_log else float("nan")
        print(
            f"seed {seed}: {len(loss_log)} steps, final loss {final:.6f}, "
            f"checkpoint {os.path.join(seed_dir, 'checkpoint-final')}"
        )
    return EXIT_OK


def _params_for_eval(run, seed, checkpoint):
    """Initialized parameters, loaded from a checkpoint when one exists.

    An explicitly named checkpoint must exist; the per-seed default path
    falls back to the untrained initialization so a fresh model can still
    be scored.
    """
    params = init_model_params(run.model, seed)
    path = checkpoint or os.path.join(run.out_dir, f"seed{seed}", "checkpoint-final")
    if not os.path.isdir(path):
        if checkpoint is not None:
            raise ConfigError(f"checkpoint {path} not found")
        return params, "untrained"
    state = load_checkpoint(path)
    restore_params(params, state["params"])
    return params, f"{path} (step {state['step']})"


def cmd_eval(args) -> int:
    run = resolve_config(_load_json(args.config))
    if args.checkpoint is not None and len(run.seeds) != 1:
        raise ConfigError("--checkpoint requires a config with exactly one seed")
    _echo_config(run)
    records = _load_records(run, run.eval_split)
    per_seed = {}
    for seed in run.seeds:
        params, source = _params_for_eval(run, seed, args.checkpoint)
        reports = evaluate_model(records, params, run.model, run.recall_ks)
        per_seed[seed] = reports
        print(f"seed {seed}: {source}")
        print(format_reports(reports.values()))
    agg = aggregate_reports(per_seed.values())
    print("mean ± std over seeds:")
    print(format_aggregate(agg))
    doc = {
        "split": run.eval_split,
        "seeds": {
            str(seed): {d: report_to_dict(r) for d, r in reports.items()}
            for seed, reports in per_seed.items()
        },
        "aggregate": agg,
    }
    out_path = os.path.join(run.out_dir, "eval_report.json")
    _write_json(out_path, doc)
    print(f"wrote {out_path}")
    return EXIT_OK


def _ablation_rows(mode, names):
    """Expands an --experts argument into (label, subset) rows.

    ``cumulative`` grows the expert list one configured name at a time;
    ``pairwise[:base]`` pairs a base expert with every other; anything
    else is a single ``a+b+c`` subset.
    """
    if mode == "cumulative":
        return [("+".join(names[: k + 1]), names[: k + 1]) for k in range(len(names))]
    if mode == "pairwise" or mode.startswith("pairwise:"):
        base = mode.split(":", 1)[1] if ":" in mode else names[0]
        if base not in names:
            raise ConfigError(
                f"unknown base expert {base!r}; valid names: {list(names)}"
            )
        if len(names) < 2:
            raise ConfigError("pairwise ablation needs at least two experts")
        return [(f"{base}+{x}", (base, x)) for x in names if x != base]
    subset = tuple(mode.split("+"))
    unknown = [n for n in subset if n not in names]
    if unknown:
        raise ConfigError(f"unknown experts {unknown}; valid names: {list(names)}")
    if len(set(subset)) != len(subset):
        raise ConfigError(f"duplicate experts in {mode!r}")
    return [(mode, subset)]


def cmd_ablate(args) -> int:
    run = resolve_config(_load_json(args.config))
    digest = _echo_config(run)
    rows = _ablation_rows(args.experts, run.model.expert_names)
    results = []
    for label, subset in rows:
        sub = _restrict_experts(run, subset)
        # The dataset keeps every stream on disk; only the model narrows.
        train_records = _load_records(sub, run.train_split, allow_extra=True)
        eval_records = _load_records(sub, run.eval_split, allow_extra=True)
        seed_reports = []
        for seed in run.seeds:
            params, _ = train(train_records, sub.model, sub.optim, seed, digest)
            seed_reports.append(
                evaluate_model(eval_records, params, sub.model, run.recall_ks)
            )
        agg = aggregate_reports(seed_reports)
        results.append({"experts": list(subset), "label": label, "metrics": agg})
        print(f"{label}:")
        print(format_aggregate(agg))
    print(format_ablation(results))
    out_path = os.path.join(run.out_dir, "ablation_report.json")
    _write_json(out_path, {"mode": args.experts, "rows": results})
    print(f"wrote {out_path}")
    return EXIT_OK


def format_ablation(results) -> str:
    """One row per expert subset, text-to-video metrics as mean ± std."""
    names = list(next(iter(results[0]["metrics"].values())))
    rows = [["experts"] + names]
    for res in results:
        stats = res["metrics"]["text_to_video"]
        rows.append(
            [res["label"]]
            + [f"{stats[n]['mean']:.4f} ± {stats[n]['std']:.4f}" for n in names]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
    )


def cmd_grad_check(args) -> int:
    checks = run_gradient_suite(seeds=args.seeds, corrupt_op=args.corrupt_op)
    width = max(len(c.op) for c in checks)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(
            f"{c.op.ljust(width)}  worst rel err {c.worst_rel_err:.3e}  "
            f"(tol {c.tolerance:.0e}, {c.seeds} seeds)  {status}"
        )
    failures = [c for c in checks if not c.passed]
    if failures:
        for c in failures:
            print(
                f"gradient check failed: {c.op} at seed {c.worst_seed} "
                f"(rel err {c.worst_rel_err:.3e})",
                file=sys.stderr,
            )
        return EXIT_RUNTIME
    print("all gradient checks passed")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation errors, so exit 1 rather than 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="expertfuse",
        description="Joint video-text embeddings from fused pretrained experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON generator spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one model per configured seed")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument(
        "--resume", default=None,
        help="checkpoint directory to continue from (single-seed configs)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and report retrieval metrics")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument(
        "--checkpoint", default=None,
        help="checkpoint directory (default: per-seed checkpoint-final, "
        "or the untrained initialization when none exists)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval over expert subsets")
    p.add_argument(
        "--experts", required=True,
        help="'cumulative' ladder, 'pairwise[:base]', or a subset like obj+audio",
    )
    p.add_argument("--config", required=True, help="JSON run config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=20, help="random draws per op")
    p.add_argument(
        "--corrupt-op", default=None,
        help="deliberately break one op's gradient (negative control)",
    )
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataIntegrityError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # anything else is a runtime failure, not bad input
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
