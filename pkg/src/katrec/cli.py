"""``katrec`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import VARIANT_LABELS, VARIANTS, RunConfig, apply_ablation, load_config, toy_config
from .data import Dataset, id_map_rows, load_dataset
from .evaluation import (
    cooccurrence_matrix,
    evaluate,
    export_attention,
    matrix_to_tsv,
)
from .fileio import atomic_write_text, file_digest
from .kg import KgParams, pretrain_kg
from .trainer import (
    Checkpoint,
    Trainer,
    load_checkpoint,
    make_streams,
    model_from_checkpoint,
    save_checkpoint,
)
from .toy import toy_paths

logger = logging.getLogger("katrec")

ABLATION_COLUMNS = ("NDCG@10", "Hit@10", "NDCG@5", "Hit@5", "NDCG@1", "MAP")


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    base = None
    if args.toy:
        base = toy_config()
        inter, trip = toy_paths()
        overrides.setdefault("interactions", inter)
        overrides.setdefault("triplets", trip)
    if args.interactions:
        overrides["interactions"] = args.interactions
    if args.triplets:
        overrides["triplets"] = args.triplets
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.max_len is not None:
        overrides["max_len"] = str(args.max_len)
    config = load_config(args.config, overrides, base=base)
    if args.ablation:
        config = apply_ablation(config, args.ablation)
    return config


def load_data(config: RunConfig) -> Dataset:
    if not config.interactions:
        raise ValueError("no interactions file given (use --interactions, --toy or the config key)")
    return load_dataset(config.interactions, config.triplets or None, config.min_interactions,
                        config.min_entity_occurrences, config.min_relation_occurrences)


def write_manifest(out: Path, command: str, config: RunConfig, extra=None) -> None:
    digests = {}
    for key in ("interactions", "triplets"):
        path = getattr(config, key)
        if path:
            digests[key] = {"path": path, "sha256": file_digest(path)}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": digests,
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(out / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_report(out: Path, stem: str, report) -> None:
    atomic_write_text(out / f"{stem}.tsv", "metric\tvalue\n" + report.to_tsv())
    atomic_write_text(out / f"{stem}.json", report.to_json())


def stats_table(dataset: Dataset) -> str:
    stats = dataset.stats()
    header = "\t".join(stats)
    row = "\t".join(repr(v) if isinstance(v, float) else str(v) for v in stats.values())
    return f"{header}\n{row}\n"


def cmd_ingest(args, config, out):
    ds = load_data(config)
    atomic_write_text(out / "stats.tsv", stats_table(ds))
    rows = id_map_rows(ds)
    atomic_write_text(out / "id_map.tsv", "kind\traw_id\tid\n" + "".join(f"{k}\t{r}\t{i}\n" for k, r, i in rows))
    print(stats_table(ds), end="")
    return 0


def cmd_pretrain(args, config, out):
    ds = load_data(config)
    streams = make_streams(config.seed)
    g = ds.graph
    kg = KgParams.init(g.num_nodes, g.num_relations, config.d, config.relation_dim, config.layer_dims,
                       streams["init"], np.dtype(config.dtype), config.init_std, config.init_low, config.init_high)
    pretrain_kg(config, g, streams["triplet"], params=kg)
    save_checkpoint(out / "kg_checkpoint", Checkpoint(config, {k: t.data for k, t in kg.tensors().items()}))
    return 0


def train_and_test(config: RunConfig, ds: Dataset, out: Path | None = None):
    tr = Trainer(config, ds).setup().fit()
    model = tr.finalize()
    report = evaluate(tr.scorer, ds.log, "test", config.eval_negatives, config.seed,
                      bucket_edges=config.bucket_edges)
    if out is not None:
        save_checkpoint(out / "checkpoint", tr.checkpoint())
        keys = sorted({k for rec in tr.epoch_losses for k in rec})
        lines = ["\t".join(keys)] + ["\t".join(repr(rec.get(k, float("nan"))) for k in keys) for rec in tr.epoch_losses]
        atomic_write_text(out / "history.tsv", "\n".join(lines) + "\n")
        write_report(out, "metrics_test", report)
    return model, report


def cmd_train(args, config, out):
    ds = load_data(config)
    _, report = train_and_test(config, ds, out)
    print(report.to_tsv(), end="")
    return 0


def _load_model(args, config, out):
    ds = load_data(config)
    ckpt_dir = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    ckpt = load_checkpoint(ckpt_dir, config)
    return ds, model_from_checkpoint(ckpt, ds), ckpt


def cmd_evaluate(args, config, out):
    ds, model, ckpt = _load_model(args, config, out)
    report = evaluate(model.score, ds.log, args.split, config.eval_negatives, config.seed,
                      bucket_edges=config.bucket_edges)
    write_report(out, f"metrics_{args.split}", report)
    print(report.to_tsv(), end="")
    return 0


def cmd_ablate(args, config, out):
    ds = load_data(config)
    lines = ["variant\t" + "\t".join(ABLATION_COLUMNS)]
    if config.ablation != "none":
        raise ValueError("ablate runs every variant itself; drop --ablation")
    for variant in VARIANTS:
        cfg = apply_ablation(config, variant)
        _, report = train_and_test(cfg, ds, out / "variants" / variant)
        values = dict(report.rows())
        lines.append(VARIANT_LABELS[variant] + "\t" + "\t".join(repr(values[c]) for c in ABLATION_COLUMNS))
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "ablation.tsv", text)
    print(text, end="")
    return 0


def cmd_export_attention(args, config, out):
    ds, model, _ = _load_model(args, config, out)
    log = ds.log
    _, attns, tokens = model.encode_histories([log.history(u, args.split) for u in range(log.num_users)])
    layers = range(len(attns)) if args.layer is None else [args.layer - 1]
    heads = range(config.n_heads) if args.head is None else [args.head - 1]
    for l in layers:
        if not 0 <= l < len(attns):
            raise ValueError(f"layer {l + 1} out of range 1..{len(attns)}")
        for h in heads:
            if not 0 <= h < config.n_heads:
                raise ValueError(f"head {h + 1} out of range 1..{config.n_heads}")
            mat = export_attention(attns[l][:, h], tokens, args.window)
            atomic_write_text(out / f"attn_L{l + 1}_H{h + 1}.tsv", matrix_to_tsv(mat))
    return 0


def cmd_cooccurrence(args, config, out):
    ds = load_data(config)
    log = ds.log
    index = log.item_index
    if args.items:
        raw = [x.strip() for x in args.items.split(",") if x.strip()]
        missing = [x for x in raw if x not in index]
        if missing:
            raise ValueError(f"unknown items: {missing}")
        items = [index[x] for x in raw]
    else:
        counts = np.bincount(np.concatenate(log.sequences), minlength=log.num_items)
        items = np.argsort(-counts, kind="stable")[: args.top].tolist()
    mat = cooccurrence_matrix(log.sequences, items)
    atomic_write_text(out / "cooccurrence.tsv", matrix_to_tsv(mat, [log.item_ids[i] for i in items]))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain-kg": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-attention": cmd_export_attention,
    "cooccurrence": cmd_cooccurrence,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--ablation", choices=VARIANTS)
    common.add_argument("--split", choices=("val", "test"), default="test")
    common.add_argument("--max-len", type=int, dest="max_len")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--interactions", help="interactions file (user item item ...)")
    common.add_argument("--triplets", help="KG triplet file (head<TAB>relation<TAB>tail)")
    common.add_argument("--toy", action="store_true", help="use the bundled toy fixture and its config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="katrec", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "export-attention"):
            p.add_argument("--checkpoint", help="checkpoint directory (default <out>/checkpoint)")
        if name == "export-attention":
            p.add_argument("--layer", type=int, help="1-based layer (default: all)")
            p.add_argument("--head", type=int, help="1-based head (default: all)")
            p.add_argument("--window", type=int, default=15)
        if name == "cooccurrence":
            p.add_argument("--items", help="comma-separated raw item ids")
            p.add_argument("--top", type=int, default=6, help="most frequent items when --items is absent")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("KATREC_THREADS")
    try:
        config = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, config)
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(int(threads)):
                return COMMANDS[args.command](args, config, out)
        return COMMANDS[args.command](args, config, out)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"katrec {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
