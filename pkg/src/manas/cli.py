"""Command line: ingest, synth, train, eval, enumerate, sample-arch, sweep.

Run configuration precedence, lowest to highest: built-in defaults, the JSON config file, flags.
Relative output paths are resolved against ``$MANAS_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import architecture as A
from .controller import GREEDY, SAMPLE
from .data import Dataset, default_rule, file_digest, generate_synthetic, load_interactions, make_dataset, \
    write_interactions
from .evaluation import evaluate, metric_columns, write_csv, write_json
from .logic import LAWS
from .numerics import VocabularyError
from .trainer import MODES, Trainer, TrainConfig

OUTPUT_ROOT_ENV = "MANAS_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("manas")


class UsageError(Exception):
    """Bad configuration, arguments or input paths (exit code 2)."""


def _field_schema(name: str, default) -> dict:
    if name == "mode":
        return {"enum": list(MODES)}
    if name == "strategy":
        return {"enum": [SAMPLE, GREEDY]}
    if name == "batching":
        return {"enum": ["packed", "grouped"]}
    if name == "laws":
        return {"type": "array", "items": {"enum": list(LAWS)}, "uniqueItems": True}
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer", "minimum": 0 if name == "seed" else 1}
    if isinstance(default, float):
        return {"type": "number", "minimum": 0}
    return {}


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "bundle": {"type": "string"},
        "output_dir": {"type": "string"},
        **{f.name: _field_schema(f.name, f.default) for f in fields(TrainConfig)},
    },
}


def validate_run_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {e.message}") from None
    return cfg


def load_run_config(path: str | None, overrides: dict) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {p} is not valid JSON: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return validate_run_config(cfg)


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({k: v for k, v in cfg.items() if k not in ("bundle", "output_dir")})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def output_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return path if path.is_absolute() or not root else Path(root) / path


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_bundle(path: str | Path) -> Dataset:
    try:
        return Dataset.load(_existing(path, "bundle"))
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read bundle {path}: {e}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _print_stats(stats: dict) -> None:
    width = max(len(k) for k in stats)
    for k, v in stats.items():
        print(f"{k:<{width}}  {v:.6%}" if k == "density" else f"{k:<{width}}  {v}")


# -- commands ------------------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    src = _existing(args.input, "input file")
    try:
        table = load_interactions(src, args.delimiter)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = make_dataset(table, args.n, args.seed, args.min_history)
    out = ds.save(output_path(args.out))
    _print_stats(ds.stats)
    print(f"bundle {out} sha256 {file_digest(out)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    rule = default_rule(args.items, noise=args.noise, window=args.window or args.n, gated=args.gated)
    table = generate_synthetic(rule, args.users, args.items, args.interactions, args.seed)
    if args.table:
        write_interactions(table, output_path(args.table))
    ds = make_dataset(table, args.n, args.seed, args.min_history, rule)
    out = ds.save(output_path(args.out))
    print(f"rule  {rule.describe()}")
    _print_stats(ds.stats)
    print(f"bundle {out} sha256 {file_digest(out)}")
    return EXIT_OK


def _epoch_rows(history: list[dict]) -> tuple[list[dict], list[dict]]:
    metrics, timing = [], []
    for r in history:
        metrics.append({"epoch": r["epoch"], "loss": r["loss"], "controller_reward": r["controller_reward"],
                        "val_reward": r["val_reward"], **{c: r[f"val_{c}"] for c in metric_columns()}})
        timing.append({"epoch": r["epoch"], "child_seconds": r["child_seconds"],
                       "controller_seconds": r["controller_seconds"]})
    return metrics, timing


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {"bundle": args.bundle, "output_dir": args.out, "mode": args.mode,
                                        "strategy": args.strategy, "epochs": args.epochs, "seed": args.seed,
                                        "controller_steps": args.controller_steps})
    if "bundle" not in cfg:
        raise UsageError("no dataset bundle given (config key 'bundle' or --bundle)")
    tc = train_config(cfg)
    data = _load_bundle(cfg["bundle"])
    out = output_path(cfg.get("output_dir", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_log.jsonl").unlink(missing_ok=True)
    write_json(out / "run_config.json", {**cfg, **tc.to_dict()})
    trainer = Trainer(data, tc)
    history = trainer.fit(out, progress=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  val HR@10 {r['val_HR@10']:.4f}  "
        f"reward {r['val_reward']:.4f}", flush=True))
    metrics, timing = _epoch_rows(history)
    write_csv(out / "metrics_by_epoch.csv", metrics)
    write_csv(out / "timing_by_epoch.csv", timing)
    print(f"checkpoint {out / 'checkpoint_last'}")
    return EXIT_OK


def oracle_score_fn(data: Dataset):
    """Scores 1 for candidates in the rule's target class; needs a synthetic bundle."""
    if data.rule is None:
        raise UsageError("--oracle needs a synthetic bundle with a stored rule")
    cls = data.rule.class_of(data.num_items)

    def score(histories, candidates, rng):
        target = np.array([data.rule.target_class(cls[h]) for h in histories])
        return (cls[candidates] == target[:, None]).astype(float)

    return score


def cmd_eval(args) -> int:
    data = _load_bundle(args.bundle)
    eval_set = data.test if args.split == "test" else data.valid
    mode = "multi20" if args.multi20 else "single"
    if args.oracle:
        report = evaluate(oracle_score_fn(data), eval_set, tuple(args.ks), mode,
                          np.random.default_rng(eval_set.seed))
        label, model_mode, strategy = "oracle", "oracle", "-"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        try:
            trainer = Trainer.load(_existing(args.checkpoint, "checkpoint"), data)
        except (ValueError, KeyError) as e:
            raise UsageError(str(e)) from None
        strategy = GREEDY if args.greedy else trainer.config.strategy
        rng = np.random.default_rng([trainer.config.seed, 3, eval_set.seed])
        report = evaluate(trainer.score_fn(strategy), eval_set, tuple(args.ks), mode, rng)
        label, model_mode = Path(args.checkpoint).name, trainer.config.mode
    row = report.row({"model": label, "mode": model_mode, "strategy": strategy, "split": args.split,
                      "runs": len(next(iter(report.per_run.values())))})
    cols = metric_columns(tuple(args.ks))
    row.update({c: report.metrics[c] for c in cols})
    out = output_path(args.out)
    write_csv(out, [row])
    write_json(out.with_suffix(".json"), {"row": row, "per_run": report.per_run, "stats": report.stats})
    print("  ".join(f"{c} {report.metrics[c]:.4f}" for c in cols))
    if report.stats:
        print("  ".join(f"{c}_std {report.stats[c]['std']:.6f}" for c in cols))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    n = args.n
    if n < 1:
        raise UsageError("n must be >= 1")
    count = A.count_architectures(n)
    print(count)
    if args.count_only:
        return EXIT_OK
    try:
        archs = A.enumerate_architectures(n)
    except A.EnumerationRefused as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    for a in archs:
        print(f"{a.to_text()}\t{A.to_expression_string(a)}")
    return EXIT_OK


def cmd_sample_arch(args) -> int:
    data = _load_bundle(args.bundle)
    try:
        trainer = Trainer.load(_existing(args.checkpoint, "checkpoint"), data)
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from None
    strategy = GREEDY if args.greedy else SAMPLE
    rng = np.random.default_rng(args.seed)
    for raw in args.items:
        if len(raw) != data.n:
            raise UsageError(f"expected {data.n} items per input, got {len(raw)}")
        try:
            items = [data.vocab.encode_item(str(r)) for r in raw] if data.vocab else list(raw)
        except KeyError as e:
            raise VocabularyError(f"unknown item {e}") from None
        names = [f"i{r}" for r in raw]
        print(f"input {','.join(str(r) for r in raw)}")
        for k in range(args.k):
            if trainer.controller is None:
                arch = trainer.fixed_arch
            else:
                arch = trainer.controller.sample_architecture(items, strategy, rng).architecture
            print(f"  [{k}] {A.to_expression_string(arch, names)}    {arch.to_text()}")
            if args.dot:
                print(A.to_dot(arch, names, target="target"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    table = load_interactions(_existing(args.interactions, "interactions file"))
    cfg = load_run_config(args.config, {"epochs": args.epochs, "seed": args.seed,
                                        "controller_steps": args.controller_steps, "mode": args.mode})
    tc_base = train_config(cfg)
    out = output_path(args.out)
    rows, user_sets = [], []
    for n in args.lengths:
        ds = make_dataset(table, n, tc_base.seed, max(args.min_history, n))
        user_sets.append(frozenset(ds.valid.users.tolist()))
        tr = Trainer(ds, tc_base)
        t0 = time.perf_counter()
        tr.fit()
        minutes = (time.perf_counter() - t0) / 60.0 / max(tr.epoch, 1)
        rep = tr.evaluate(ds.test)
        rows.append({"length": n, "users": len(ds.valid), "train_samples": len(ds.train),
                     **rep.metrics, "minutes_per_epoch": minutes})
        print(f"n={n:2d}  HR@10 {rep.metrics['HR@10']:.4f}  {minutes:.3f} min/epoch", flush=True)
    if len(set(user_sets)) > 1:
        raise RuntimeError("user populations differ across sequence lengths")
    write_csv(out, rows)
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="interaction log -> dataset bundle")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4, help="history length")
    s.add_argument("--seed", type=int, default=0, help="candidate sampling seed")
    s.add_argument("--min-history", type=int, default=None)
    s.add_argument("--delimiter", default=None)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="planted-rule synthetic bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--table", default=None, help="also write the raw interaction table here")
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--items", type=int, default=200)
    s.add_argument("--interactions", type=int, default=20, help="interactions per user")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--window", type=int, default=None, help="rule window (defaults to n)")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--gated", action="store_true",
                   help="when the premise fails, offset from the oldest history item instead of the newest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-history", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="interleaved child / controller training")
    s.add_argument("--config", default=None, help="RunConfig JSON")
    s.add_argument("--bundle", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--mode", choices=MODES, default=None)
    s.add_argument("--strategy", choices=[SAMPLE, GREEDY], default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--controller-steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="ranking metrics for a checkpoint")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--bundle", required=True)
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--multi20", action="store_true", help="20 derivations, avg/min/max/std")
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--oracle", action="store_true", help="score with the bundle's planted rule")
    s.add_argument("--ks", type=_int_list, default=[5, 10])
    s.add_argument("--out", default="eval.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("enumerate", help="count or list canonical architectures")
    s.add_argument("n", type=int)
    s.add_argument("--count-only", action="store_true")
    s.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("sample-arch", help="print sampled architectures for given inputs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--items", type=_int_list, action="append", required=True,
                   help="comma separated item ids; repeat for several inputs")
    s.add_argument("--k", type=int, default=1, help="samples per input")
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--dot", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_arch)

    s = sub.add_parser("sweep", help="metric and time per epoch versus history length")
    s.add_argument("--interactions", required=True, help="raw interaction table")
    s.add_argument("--config", default=None)
    s.add_argument("--lengths", type=_int_list, default=[2, 4, 6, 8, 10])
    s.add_argument("--min-history", type=int, default=10)
    s.add_argument("--mode", choices=MODES, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--controller-steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default="sweep.csv")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, VocabularyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
