"""Command-line entry point: ``cliprepro <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error or failed verification, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import repro
from .config import RunConfig, diff_configs
from .data import load_dataset, save_dataset
from .errors import ReproError
from .model import EncoderParams
from .numerics import load_checkpoint
from .trainer import dataset_for, model_dims, train
from .zeroshot import evaluate


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cliprepro", description="Deterministic desk-scale CLIP training and run ledger.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        return sp

    sp = add("data-synth", "generate the synthetic dataset described by a config")
    sp.add_argument("--config", help="run config JSON (default: built-in defaults)")
    sp.add_argument("--seed", type=int, help="override dataset.seed")
    sp.add_argument("--out", required=True, help="output dataset directory")

    sp = add("train", "train and write trajectory.jsonl + checkpoint.rpck")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, help="override the run seed (recorded in the ledger)")
    sp.add_argument("--dataset", help="dataset directory instead of the config's synthetic data")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--ledger", help="append a ledger entry here")

    sp = add("eval", "zero-shot evaluation of a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset directory (default: the config's held-out synthetic split)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ledger", help="append a ledger entry with the report")

    sp = add("verify-same", "train K times and require byte-identical outputs")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--repeats", type=int, default=2)

    sp = add("verify-compare", "permutation test between two groups of run metrics")
    sp.add_argument("--a", required=True, help="comma-separated values or a JSON file holding a list")
    sp.add_argument("--b", required=True)
    sp.add_argument("--one-sided", action="store_true", help="test mean(a) > mean(b)")
    sp.add_argument("--threshold", type=float, default=0.05)

    sp = add("ledger-show", "print ledger entries")
    sp.add_argument("--ledger", required=True)

    sp = add("ledger-diff", "list differing config fields")
    sp.add_argument("--a", required=True, help="config path or fixture name (e.g. R8)")
    sp.add_argument("--b", required=True)
    return p


def _config(args) -> RunConfig:
    cfg = repro.resolve_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg.validate()


def _values(ref: str) -> list[float]:
    p = Path(ref)
    if p.is_file():
        data = json.loads(p.read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise UsageError(f"{ref}: expected a JSON list of numbers")
        return [float(x) for x in data]
    try:
        return [float(x) for x in ref.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {ref!r} as comma-separated numbers or a JSON file") from None


def _show(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def _emit(args, obj, text: str) -> None:
    print(json.dumps(obj) if args.json else text)


def cmd_data_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides(dataset=replace(cfg.dataset, seed=args.seed))
    ds = dataset_for(cfg)
    out = save_dataset(ds, args.out)
    summary = {"path": str(out), "pairs": len(ds), "concepts": list(ds.concepts), "image_size": ds.image_size, "seed": ds.seed}
    _emit(args, summary, f"wrote {len(ds)} pairs ({', '.join(ds.concepts)}) to {out}")
    return 0


def _eval_split(cfg: RunConfig, dataset_dir: str | None):
    if dataset_dir:
        return load_dataset(dataset_dir)
    return dataset_for(cfg, eval_split=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.dataset) if args.dataset else None
    result = train(cfg, ds)
    traj, ckpt = result.write(args.out)
    reports = {}
    if cfg.dataset.concepts and not args.dataset:
        reports[cfg.dataset.name] = evaluate(result.params, dataset_for(cfg, eval_split=True), cfg.aug.out_size, cfg.aug.mean, cfg.aug.std, dataset_name=cfg.dataset.name)
    entry = None
    if args.ledger:
        entry = repro.record_run(args.ledger, cfg, repro.capture_env(cfg.dtype), reports, trajectory=str(traj))
    last = result.trajectory[-1]
    obj = {
        "steps": len(result.trajectory),
        "final_loss": last.loss,
        "trajectory": str(traj),
        "checkpoint": str(ckpt),
        "results": {k: v.to_dict() for k, v in reports.items()},
        "run_id": entry.run_id if entry else None,
    }
    lines = [f"trained {len(result.trajectory)} steps, final loss {last.loss:.6f}, tau {last.tau:.4f}", f"wrote {traj} and {ckpt}"]
    lines += [r.render() for r in reports.values()]
    if entry:
        lines.append(f"ledger entry {entry.run_id}")
    _emit(args, obj, "\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = _eval_split(cfg, args.dataset)
    tensors, dtype = load_checkpoint(args.checkpoint)
    params = EncoderParams.from_checkpoint(tensors, dtype, model_dims(cfg, len(ds.vocab)))
    name = cfg.dataset.name if not args.dataset else Path(args.dataset).name
    report = evaluate(params, ds, cfg.aug.out_size, cfg.aug.mean, cfg.aug.std, dataset_name=name)
    if args.ledger:
        repro.record_run(args.ledger, cfg, repro.capture_env(dtype), {name: report})
    _emit(args, report.to_dict(), report.render())
    return 0


def cmd_verify_same(args) -> int:
    cfg = _config(args)
    report = repro.verify_determinism(cfg, args.repeats)
    d = report.details
    if report.passed:
        text = f"PASS ({d['repeats']} repeats, {d['steps']} steps, checkpoint sha256 {d['checkpoint_sha256'][:16]})"
    else:
        text = f"FAIL: repeat {d['repeat']} diverges at step {d['step']} (first differing tensor: {d['tensor']})"
    _emit(args, report.to_dict(), text)
    return 0 if report.passed else 1


def cmd_verify_compare(args) -> int:
    a, b = _values(args.a), _values(args.b)
    report = repro.compare_groups(a, b, two_sided=not args.one_sided, threshold=args.threshold)
    d = report.details
    verdict = "significant" if d["significant"] else "not significant"
    text = f"p = {report.p_value:.6g} ({d['method']}); {verdict} at {d['threshold']}"
    _emit(args, report.to_dict(), text)
    return 0


def cmd_ledger_show(args) -> int:
    if not Path(args.ledger).exists():
        raise repro.LedgerIOError(f"no ledger at {args.ledger}")
    entries = repro.read_ledger(args.ledger)
    if args.json:
        print(json.dumps([e.to_dict() for e in entries]))
    else:
        print("\n".join(e.render() for e in entries) if entries else "(empty ledger)")
    return 0


def cmd_ledger_diff(args) -> int:
    a, b = repro.resolve_config(args.a), repro.resolve_config(args.b)
    diffs = diff_configs(a, b)
    if args.json:
        print(json.dumps([{"field": f, "a": x, "b": y} for f, x, y in diffs]))
    else:
        print("\n".join(f"{f}: {_show(x)} -> {_show(y)}" for f, x, y in diffs) if diffs else "(no differences)")
    return 0


COMMANDS = {
    "data-synth": cmd_data_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-same": cmd_verify_same,
    "verify-compare": cmd_verify_compare,
    "ledger-show": cmd_ledger_show,
    "ledger-diff": cmd_ledger_diff,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cliprepro: error: {exc}", file=sys.stderr)
        return 2
    except (ReproError, OSError, json.JSONDecodeError) as exc:
        print(f"cliprepro: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
