"""Command-line entry point.

Subcommands: synth | prompts | embed-hash | train | eval | corrupt-bench |
grad-check. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 check or acceptance failure. Errors print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .checks import gradient_suite
from .data import (
    Dataset,
    compute_imputation_stats,
    corrupt,
    impute,
    load_dataset,
    save_corruption_flags,
    save_dataset,
    save_schema,
    split_indices,
    synthesize,
)
from .embedding import hash_embed, write_store
from .errors import CellformerError, CheckFailure, DataError
from .prompts import read_prompts, render_sample, write_prompts
from .training import (
    DEFAULT_RATES,
    TrainConfig,
    corruption_benchmark,
    embed_splits,
    evaluate,
    load_run_checkpoint,
    mlp_baseline,
    prepare_splits,
    save_run_checkpoint,
    train,
    write_curve,
    write_history,
    write_manifest,
    write_metrics,
    write_predictions,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors exit 1 (argparse defaults to 2, which we reserve
        # for data errors)
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(1)


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("CELLFORMER_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_train_flags(sub):
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--data", help="dataset CSV path")
    sub.add_argument("--schema", help="schema descriptor path")
    sub.add_argument("--store", help="CEMB embedding store path (store provider)")
    sub.add_argument("--head", choices=["ce", "or", "coral"])
    sub.add_argument("--seed", type=int, help="single training seed")
    sub.add_argument("--seeds", help="comma-separated training seeds")
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--max-epochs", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--split-seed", type=int)
    sub.add_argument("--out-dir")


def _build_config(args) -> TrainConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
    if args.data:
        doc["data"] = args.data
    if args.schema:
        doc["schema"] = args.schema
    if args.store:
        doc["provider"] = {"kind": "store", "path": args.store}
    if args.head:
        doc["head"] = args.head
    if args.seeds is not None:
        doc["seeds"] = [int(s) for s in args.seeds.split(",") if s != ""]
    elif args.seed is not None:
        doc["seeds"] = [args.seed]
    for flag in ("lr", "batch_size", "max_epochs", "patience", "split_seed"):
        value = getattr(args, flag)
        if value is not None:
            doc[flag] = value
    return TrainConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    dataset = synthesize(args.n, args.seed, variant=args.variant,
                         text_missing=args.text_missing)
    save_dataset(dataset, out / "data.csv")
    save_schema(dataset.schema, out / "schema.json")
    print(f"wrote {out / 'data.csv'} ({len(dataset)} rows) and {out / 'schema.json'}")
    return 0


def cmd_prompts(args) -> int:
    dataset = load_dataset(args.data, args.schema)
    train_idx, val_idx, test_idx = split_indices(len(dataset), args.split_seed)
    train_rows = [dataset.rows[i] for i in train_idx]
    stats = compute_imputation_stats(Dataset(schema=dataset.schema, rows=tuple(train_rows)))
    entries = []
    for idx in (train_idx, val_idx, test_idx):
        subset = impute(Dataset(schema=dataset.schema,
                                rows=tuple(dataset.rows[i] for i in idx)), stats)
        for local, row in enumerate(subset.rows):
            prompted = render_sample(dataset.schema, row.cells)
            for col, (text, present) in enumerate(zip(prompted.prompts, prompted.presence)):
                if present:
                    entries.append((idx[local], col, text))
    entries.sort(key=lambda e: (e[0], e[1]))
    write_prompts(entries, args.out)
    print(f"wrote {len(entries)} prompts to {args.out}")
    return 0


def cmd_embed_hash(args) -> int:
    entries = read_prompts(args.prompts)
    unique = sorted({text for _, _, text in entries})
    if not unique:
        raise DataError(f"{args.prompts}: no prompts to embed")
    vectors = [(text, hash_embed(text, args.dim, args.seed)) for text in unique]
    write_store(vectors, args.out, normalize=True,
                producer=f"cellformer-hash dim={args.dim} seed={args.seed}")
    print(f"wrote {len(vectors)} embeddings (dim {args.dim}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    write_manifest(config, out / "manifest.json", __version__,
                   datetime.now(timezone.utc).isoformat())
    runner = mlp_baseline if args.mlp else train
    result = runner(config)
    write_metrics(result, out / "metrics.json")
    write_history(result, out / "history.csv")
    for sr in result.seed_results:
        write_predictions(sr.test, config.head, result.num_ranks,
                          out / f"predictions_seed{sr.seed}.csv")
        if not args.mlp:
            save_run_checkpoint(out / f"checkpoint_seed{sr.seed}.ckpt",
                                config, result.num_ranks, result.models[sr.seed])
    print(json.dumps(result.metrics_doc()["mean"], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config, num_ranks, model, head = load_run_checkpoint(args.checkpoint)
    overrides = {}
    if args.data:
        overrides["data"] = args.data
    if args.schema:
        overrides["schema"] = args.schema
    if args.store:
        overrides["provider"] = {"kind": "store", "path": args.store}
    if overrides:
        doc = config.to_dict()
        doc.update(overrides)
        config = TrainConfig.from_dict(doc)
    prep = prepare_splits(config)
    emb = embed_splits(config, prep)
    samples = emb.samples["test"]
    encode = lambda idx: model.encode_batch([samples[i] for i in idx])
    result = evaluate(encode, head, prep.ranks["test"], config.batch_size)
    doc = {"rmse": result.rmse, "mae": result.mae}
    if args.out_dir:
        out = _out_dir(args)
        with open(out / "eval_metrics.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        write_predictions(result, config.head, num_ranks, out / "eval_predictions.csv")
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_corrupt_bench(args) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    rates = ([float(r) for r in args.rates.split(",")] if args.rates
             else list(DEFAULT_RATES))
    curve = corruption_benchmark(config, rates=rates)
    write_curve(curve, out / "curve.csv")
    if args.dump_corrupted:
        prep = prepare_splits(config)
        for idx, rate in enumerate(sorted(rates)):
            if rate == 0.0:
                continue
            result = corrupt(prep.datasets["test"], rate,
                             seed=(config.seeds[0] + 1) * 99991 + idx)
            tag = f"{rate:g}".replace(".", "p")
            save_dataset(result.dataset, out / f"corrupted_test_rate{tag}.csv")
            save_corruption_flags(result, prep.schema,
                                  out / f"corrupted_test_rate{tag}_flags.csv")
    for point in curve:
        print(f"rate={point.rate:g} rmse={point.rmse:.6f} mae={point.mae:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradient_suite()
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:24s} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tolerance:g}")
        failed = failed or not r.passed
    if failed:
        raise CheckFailure("gradient suite exceeded tolerance")
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cellformer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["text", "mixed"], default="text")
    p.add_argument("--text-missing", type=float, default=0.0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("prompts", help="dump rendered prompts for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--split-seed", type=int, default=0,
                   help="must match the training split seed so imputed "
                        "values agree")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts)

    p = subs.add_parser("embed-hash", help="build a CEMB store with the hash embedder")
    p.add_argument("--prompts", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_hash)

    p = subs.add_parser("train", help="train and evaluate over the seed list")
    _add_train_flags(p)
    p.add_argument("--mlp", action="store_true",
                   help="train the numeric-only MLP baseline instead")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--store")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("corrupt-bench", help="corruption robustness curve")
    _add_train_flags(p)
    p.add_argument("--rates", help="comma-separated corruption rates")
    p.add_argument("--dump-corrupted", action="store_true",
                   help="also write corrupted test CSVs + flag sidecars "
                        "(first seed)")
    p.set_defaults(func=cmd_corrupt_bench)

    p = subs.add_parser("grad-check", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3
    except CellformerError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
