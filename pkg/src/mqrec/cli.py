"""Command-line entry point: ``mqrec <command> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .artifacts import ArtifactError
from .cf import extend_for_new_entities, train_cf
from .config import Config, ConfigError, load_config
from .data import DatasetError, reveal_unseen
from .evaluate import (PROTOCOLS, InnerProductPipeline, TokenPipeline, benchmark_inference, evaluate,
                       recommend)

log = logging.getLogger("mqrec")

COMMANDS = ("ingest", "train-cf", "train-tokenizer", "train-ranker", "recommend", "evaluate", "ablate", "bench")


def _common(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands repeat the global flags without defaults so either position works
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="key = value config file")
    common.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
    common.add_argument("--out", default=d("artifacts"), help="artifact directory (default: artifacts)")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def _parser() -> argparse.ArgumentParser:
    common = _common(True)
    p = argparse.ArgumentParser(prog="mqrec", parents=[_common(False)],
                                description="Collaborative ID tokenization and generative retrieval recommender.")
    sub = p.add_subparsers(dest="command", required=True)
    ing = sub.add_parser("ingest", parents=[common], help="load interactions, print statistics")
    ing.add_argument("--data", help="interaction file (overrides config)")
    ing.add_argument("--format", choices=("tsv", "movielens-dat"))
    sub.add_parser("train-cf", parents=[common], help="train the LightGCN / MF embedding table")
    sub.add_parser("train-tokenizer", parents=[common], help="train user and item ID tokenizers")
    sub.add_parser("train-ranker", parents=[common], help="train the query encoder")
    rec = sub.add_parser("recommend", parents=[common], help="write top-K recommendations as TSV")
    rec.add_argument("--users", help="comma-separated raw user ids (default: all evaluable users)")
    rec.add_argument("--k", type=int, help="list length (default: config top_k)")
    rec.add_argument("--output", help="TSV path (default: stdout)")
    ev = sub.add_parser("evaluate", parents=[common], help="HR/NDCG under an evaluation protocol")
    ev.add_argument("--protocol", choices=PROTOCOLS, default="standard")
    ev.add_argument("--baseline", action="store_true", help="score by CF inner product instead")
    ab = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    ab.add_argument("--variants", default="full", help=f"comma list from {','.join(pl.VARIANTS)}")
    ab.add_argument("--sweep", help="KEY=v1,v2,... to sweep one config key")
    be = sub.add_parser("bench", parents=[common], help="per-user inference latency")
    be.add_argument("--users", type=int, help="number of users to time (default: config bench_users)")
    be.add_argument("--threads", type=int, help="BLAS thread count (default: config bench_threads)")
    return p


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if getattr(args, "format", None):
        overrides["format"] = args.format
    return cfg.updated(**overrides) if overrides else cfg


def _meta(cfg: Config, ds) -> dict:
    return {"seed": cfg.seed, "dataset": pl.dataset_digest(ds), "dim": cfg.cf_dim, "K": cfg.tok_K,
            "L": cfg.tok_L, "rho": cfg.tok_rho, "beta": cfg.tok_beta, "gamma": cfg.rank_margin}


def _load_trained(out: Path, cfg: Config):
    ds, split = pl.load_split(cfg)
    table, _ = pl.load_table(out / "cf")
    user_tok, item_tok, _ = pl.load_tokenizers(out / "tokenizer")
    ranker = pl.load_ranker(out / "ranker")
    pipe = TokenPipeline(table, user_tok, item_tok, ranker, pl._templates(cfg), cfg.rank_max_history,
                         cfg.seed, pl._pool_items(split))
    return ds, split, pipe


def cmd_ingest(args, cfg, out):
    ds, split = pl.load_split(cfg)
    stats = ds.stats()
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v:.4f}" if isinstance(v, float) else f"{k} = {v}" for k, v in stats.items()]
    lines += [f"test_users = {len(split.test_users())}", f"unseen_users = {len(split.unseen_users)}",
              f"dataset = {pl.dataset_digest(ds)}"]
    text = "\n".join(lines) + "\n"
    (out / "dataset.txt").write_text(text, encoding="utf-8")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    sys.stdout.write(text)


def cmd_train_cf(args, cfg, out):
    ds, split = pl.load_split(cfg)
    table = train_cf(split, cfg.cf())
    pl.save_table(out / "cf", table, _meta(cfg, ds))
    rep = evaluate(split, InnerProductPipeline(table), "standard", cfg.cutoffs, cfg.eval_exclude_train)
    sys.stdout.write(rep.to_table())


def cmd_train_tokenizer(args, cfg, out):
    ds, split = pl.load_split(cfg)
    table, _ = pl.load_table(out / "cf")
    user_tok, item_tok = pl.fit_tokenizers(table, split, cfg)
    pl.save_tokenizers(out / "tokenizer", user_tok, item_tok, table, ds, _meta(cfg, ds))
    for tok in (user_tok, item_tok):
        rec = tok.history.get("recon", [float("nan")])
        sys.stdout.write(f"{tok.side}: K={tok.K} L={tok.L} recon {rec[0]:.5f} -> {rec[-1]:.5f}\n")


def cmd_train_ranker(args, cfg, out):
    ds, split = pl.load_split(cfg)
    table, _ = pl.load_table(out / "cf")
    user_tok, item_tok, _ = pl.load_tokenizers(out / "tokenizer")
    model = pl.fit_ranker(table, split, user_tok, item_tok, cfg, pl._pool_items(split))
    pl.save_ranker(out / "ranker", model, _meta(cfg, ds))
    sys.stdout.write(f"final epoch loss {model.history['loss'][-1]:.5f} after {len(model.history['loss'])} epochs\n")


def cmd_recommend(args, cfg, out):
    ds, split, pipe = _load_trained(out, cfg)
    if args.users:
        users = []
        for raw in args.users.split(","):
            if raw not in ds.user_index:
                raise DatasetError(f"unknown user id {raw!r}")
            users.append(ds.user_index[raw])
    else:
        users = split.test_users()
    k = args.k or cfg.top_k
    recs = recommend(split, pipe, users, k, exclude_train=cfg.eval_exclude_train)
    lines = []
    for u in users:
        items, scores = recs[u]
        for rank, (j, s) in enumerate(zip(items, scores), start=1):
            lines.append(f"{ds.user_ids[u]}\t{rank}\t{ds.item_ids[j]}\t{s:.6f}\n")
    if args.output:
        Path(args.output).write_text("".join(lines), encoding="utf-8")
    else:
        sys.stdout.write("".join(lines))


def cmd_evaluate(args, cfg, out):
    if args.baseline:
        ds, split = pl.load_split(cfg)
        table, _ = pl.load_table(out / "cf")
        rep = evaluate(split, InnerProductPipeline(table), args.protocol, cfg.cutoffs, cfg.eval_exclude_train)
        tag = f"baseline_{args.protocol}"
    else:
        ds, split, pipe = _load_trained(out, cfg)
        if args.protocol == "unseen_user":
            if not split.unseen_users:
                raise ValueError("unseen_user protocol needs unseen_fraction > 0 in the config")
            table = extend_for_new_entities(pipe.table, reveal_unseen(split), cfg.cf())
            pl.save_table(out / "cf_refreshed", table, _meta(cfg, ds))
            pipe.refresh(table, None)
        rep = evaluate(split, pipe, args.protocol, cfg.cutoffs, cfg.eval_exclude_train)
        tag = args.protocol
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{tag}.txt").write_text(rep.to_kv(), encoding="utf-8")
    sys.stdout.write(rep.to_table())
    sys.stdout.write(rep.to_kv())


def cmd_ablate(args, cfg, out):
    ds, split = pl.load_split(cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    runs = [({}, v) for v in variants]
    if args.sweep:
        key, _, values = args.sweep.partition("=")
        runs = [({key.strip(): val.strip()}, v) for v in variants for val in values.split(",")]
    protocols = ("standard", "unseen_user") if split.unseen_users else ("standard",)
    rows = []
    shared_table = {}
    for overrides, variant in runs:
        run_cfg = cfg.updated(**overrides)
        # the CF table only depends on cf_* keys and the seed; reuse it across runs
        cf_key = (variant == "mf",) + tuple(sorted((k, v) for k, v in overrides.items() if k.startswith("cf_") or k == "seed"))
        if cf_key not in shared_table:
            ccfg = run_cfg.cf() if variant != "mf" else replace(run_cfg.cf(), method="mf_bpr")
            shared_table[cf_key] = train_cf(split, ccfg)
        reports = pl.run_variant(split, run_cfg, variant, protocols, shared_table[cf_key])
        label = variant + "".join(f" {k}={v}" for k, v in overrides.items())
        for p, rep in reports.items():
            rows.append((label, p, rep))
    ks = cfg.cutoffs
    head = "variant\tprotocol\t" + "\t".join(f"hr@{k}\tndcg@{k}" for k in ks)
    body = [f"{label}\t{p}\t" + "\t".join(f"{rep.hr[k]:.4f}\t{rep.ndcg[k]:.4f}" for k in ks)
            for label, p, rep in rows]
    text = "\n".join([head] + body) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_bench(args, cfg, out):
    ds, split, pipe = _load_trained(out, cfg)
    n = cfg.bench_users if args.users is None else args.users
    users = split.test_users()[:n]
    rep = benchmark_inference(pipe, split, users, args.threads or cfg.bench_threads, cfg.top_k)
    sys.stdout.write(rep.to_kv())


HANDLERS = {
    "ingest": cmd_ingest,
    "train-cf": cmd_train_cf,
    "train-tokenizer": cmd_train_tokenizer,
    "train-ranker": cmd_train_ranker,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg, Path(args.out))
    except (ConfigError, DatasetError, ArtifactError, FileNotFoundError, ValueError) as exc:
        sys.stderr.write(f"mqrec {args.command}: error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
