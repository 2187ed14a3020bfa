"""Command-line interface: ``lkgr <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 input or validation error.
``LKGR_LOG`` sets the log level (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import graph as g
from . import training as tr
from .model import ABLATIONS, AGGREGATORS

log = logging.getLogger("lkgr")

BUNDLE_FORMAT = 1
GRADCHECK_TOLERANCE = 1e-4
SPLIT_RATIOS = (0.6, 0.2, 0.2)
# Keys a run config file may hold beyond the training hyper-parameters.
RUN_KEYS = {"dataset_preset", "bundle", "out", "threads", "k"}


class UsageError(Exception):
    """Bad command-line or config input (exit code 2)."""


# --------------------------------------------------------------------------
# bundle
# --------------------------------------------------------------------------


def _write_lines(path: Path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_bundle(out_dir, kg: g.KnowledgeGraph, inter: g.InteractionMatrix, alignment=None, threshold=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ukg = g.build_ukg(kg, inter, alignment)
    _write_lines(out / "kg.tsv", ("\t".join(map(str, t)) for t in kg.triples.tolist()))
    _write_lines(out / "interactions.tsv", (f"{u}\t{i}" for u, i in inter.pairs.tolist()))
    files = ["kg.tsv", "interactions.tsv"]
    if alignment is not None:
        _write_lines(out / "alignment.tsv", (f"{i}\t{e}" for i, e in sorted(alignment.items())))
        files.append("alignment.tsv")
    summary = ukg.summary()
    meta = {"format": BUNDLE_FORMAT, "version": __version__, "threshold": threshold, "files": files, "summary": summary}
    (out / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_lines(out / "summary.csv", ["key,value"] + [f"{k},{v}" for k, v in summary.items()])
    return summary


def load_bundle(path):
    path = Path(path)
    meta_path = path / "bundle.json"
    if not meta_path.is_file():
        raise g.InputError(f"{path}: not a dataset bundle (missing bundle.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != BUNDLE_FORMAT:
        raise g.InputError(f"{path}: unsupported bundle format {meta.get('format')!r}")
    kg = g.load_kg_triples(path / "kg.tsv")
    inter = g.load_interactions(path / "interactions.tsv")
    alignment = g.load_alignment(path / "alignment.tsv") if "alignment.tsv" in meta["files"] else None
    return kg, inter, alignment


class Dataset:
    """A bundle split into train/eval/test with the training graph built."""

    def __init__(self, bundle, seed: int):
        kg, inter, alignment = load_bundle(bundle)
        self.full = g.build_ukg(kg, inter, alignment)
        self.split = ev.split_dataset(inter, SPLIT_RATIOS, seed)
        self.ukg = g.build_ukg(kg, self.split.train, alignment, items=self.full.item_ids, n_users=self.full.n_users)
        self.train = self.ukg.interactions
        self.eval = self.ukg.entity_pairs(self.split.eval.pairs)
        self.test = self.ukg.entity_pairs(self.split.test.pairs)

    def relevant_and_excluded(self, split: str):
        if split == "test":
            return self.test, np.concatenate([self.train, self.eval])
        if split == "eval":
            return self.eval, self.train
        if split == "train":
            return self.train, None
        raise UsageError(f"unknown split {split!r}")


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------


def _parse_k(text) -> list[int]:
    try:
        ks = [int(p) for p in str(text).replace(" ", "").split(",") if p]
    except ValueError:
        raise UsageError(f"--k expects integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be >= 1")
    return ks


def resolve_run_config(args) -> tuple[tr.TrainConfig, dict]:
    """Preset, then config file, then flags; unknown config keys are rejected."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    known = {f for f in tr.TrainConfig.__dataclass_fields__} | RUN_KEYS
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {unknown}")

    preset = args.dataset_preset or file_cfg.get("dataset_preset") or "book"
    if preset not in tr.PRESETS:
        raise UsageError(f"unknown dataset preset {preset!r}; choose from {sorted(tr.PRESETS)}")
    values = tr.PRESETS[preset].to_dict()
    values.update({k: v for k, v in file_cfg.items() if k not in RUN_KEYS})
    flag_map = {
        "seed": "seed", "aggregator": "aggregator", "depth": "depth", "dim": "dim", "loss": "loss",
        "epochs": "epochs_max", "batch_size": "batch_size", "sample_size": "sample_size",
        "lr": "eta", "l2": "lam", "patience": "patience",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    if getattr(args, "ablate", None):
        values["ablate"] = sorted(set(values.get("ablate", [])) | set(args.ablate))
    try:
        cfg = tr.TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    run = {
        "dataset_preset": preset,
        "bundle": getattr(args, "bundle", None) or file_cfg.get("bundle"),
        "out": getattr(args, "out", None) or file_cfg.get("out"),
        "threads": args.threads if getattr(args, "threads", None) is not None else file_cfg.get("threads", 1),
        "k": _parse_k(args.k) if getattr(args, "k", None) else list(file_cfg.get("k", ev.DEFAULT_K)),
    }
    if run["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg, run


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    kg = g.load_kg_triples(args.kg)
    inter = g.load_interactions(args.interactions, args.threshold)
    alignment = g.load_alignment(args.alignment) if args.alignment else None
    summary = write_bundle(args.out, kg, inter, alignment, args.threshold)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _metric_rows(rows, epoch, split):
    return [{"epoch": epoch, "split": split, "K": r["K"], "recall": r["recall"], "ndcg": r["ndcg"]} for r in rows]


def cmd_train(args) -> int:
    cfg, run = resolve_run_config(args)
    if not run["bundle"] or not run["out"]:
        raise UsageError("train needs --bundle and --out (flags or config)")
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = Dataset(run["bundle"], cfg.seed)
    mcfg = cfg.model_config()
    resolved = {"version": __version__, "train": cfg.to_dict(), "run": run}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def monitor(params, epoch):
        rel, exc = data.relevant_and_excluded("eval")
        if len(rel) == 0:
            rel, exc = data.relevant_and_excluded("train")
        row = ev.evaluate_topk(params, data.ukg, mcfg, cfg.sample_size, rel, exc, (cfg.monitor_k,), cfg.seed, run["threads"])[0]
        return row["recall"], row["ndcg"]

    result = tr.fit(data.ukg, cfg, monitor)
    rel, exc = data.relevant_and_excluded("test")
    rows = ev.evaluate_topk(result.params, data.ukg, mcfg, cfg.sample_size, rel, exc, run["k"], cfg.seed, run["threads"])
    final = _metric_rows(rows, result.best_epoch, "test")
    ev.write_jsonl(out / "history.jsonl", result.history + final)
    ev.write_jsonl(out / "metrics.jsonl", final)
    ev.write_metrics_csv(out / "summary.csv", final)
    extra = {"bundle": str(run["bundle"]), "n_nodes": data.ukg.n_nodes, "n_relation_types": data.ukg.n_relation_types}
    tr.save_checkpoint(out / "checkpoint.npz", result.params, cfg, result.optimizer, result.best_epoch, extra)
    for r in final:
        print(f"test K={r['K']} recall={r['recall']:.6f} ndcg={r['ndcg']:.6f}")
    return 0


def _load_for_inference(args):
    ck = tr.load_checkpoint(args.checkpoint)
    bundle = args.bundle or ck.meta["extra"].get("bundle")
    if not bundle:
        raise UsageError("checkpoint does not name its bundle; pass --bundle")
    data = Dataset(bundle, ck.config.seed)
    rows = np.asarray(ck.params["embeddings"]).shape[0]
    n_rel = np.asarray(ck.params["relations"]).shape[0]
    if rows != data.ukg.n_nodes or n_rel != data.ukg.n_relation_types:
        raise g.InputError(
            f"checkpoint was trained on {rows} nodes / {n_rel} relation types but the bundle "
            f"has {data.ukg.n_nodes} / {data.ukg.n_relation_types}"
        )
    return ck, data


def cmd_eval(args) -> int:
    ck, data = _load_for_inference(args)
    ks = _parse_k(args.k) if args.k else list(ev.DEFAULT_K)
    rel, exc = data.relevant_and_excluded(args.split)
    mcfg = ck.config.model_config()
    rows = ev.evaluate_topk(ck.params, data.ukg, mcfg, ck.config.sample_size, rel, exc, ks, ck.config.seed, args.threads)
    records = _metric_rows(rows, ck.epoch, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    ev.write_jsonl(out / "eval_metrics.jsonl", records)
    ev.write_metrics_csv(out / "eval_summary.csv", records)
    for r in records:
        print(f"{args.split} K={r['K']} recall={r['recall']:.6f} ndcg={r['ndcg']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    aggs = [args.aggregator] if args.aggregator else list(AGGREGATORS)
    depths = [args.depth] if args.depth is not None else [0, 1, 2]
    ukg = tr.gradcheck_fixture(args.seed)
    worst = 0.0
    for agg in aggs:
        for depth in depths:
            cfg = tr.TrainConfig(dim=args.dim or 4, depth=depth, aggregator=agg, sample_size=3, lam=1e-2,
                                 loss=args.loss or "bce", ablate=tuple(args.ablate or ()))
            rep = tr.loss_gradcheck(ukg, cfg, seed=args.seed)
            worst = max(worst, rep.max_error)
            per = " ".join(f"{k}={v:.3e}" for k, v in rep.per_param.items())
            flag = " (near a kink)" if rep.boundary else ""
            print(f"aggregator={agg} L={depth} {per} max={rep.max_error:.3e}{flag}")
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_degree_stats(args) -> int:
    kg, inter, alignment = load_bundle(args.bundle)
    hist = g.degree_histogram(g.build_ukg(kg, inter, alignment))
    out = Path(args.out) if args.out else Path(args.bundle) / "degree_histogram.csv"
    g.write_degree_csv(hist, out)
    print(f"wrote {len(hist)} degree buckets to {out}")
    return 0


def cmd_recommend(args) -> int:
    ck, data = _load_for_inference(args)
    if not 0 <= args.user < data.ukg.n_users:
        raise UsageError(f"unknown user {args.user}")
    seen = np.concatenate([data.train, data.eval])
    exclude = seen[seen[:, 0] == args.user, 1]
    ranked = ev.recommend(ck.params, data.ukg, ck.config.model_config(), ck.config.sample_size,
                          args.user, args.k, exclude, ck.config.seed)
    print("item\tscore")
    for entity, score in ranked:
        print(f"{data.ukg.item_id_of(entity)}\t{score:.6f}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-preset", choices=sorted(tr.PRESETS))
    p.add_argument("--ablate", action="append", choices=ABLATIONS, help="repeatable")
    p.add_argument("--aggregator", choices=AGGREGATORS)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--loss", choices=tr.LOSSES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lkgr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lkgr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate raw files and write a dataset bundle")
    p.add_argument("--kg", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--alignment")
    p.add_argument("--threshold", type=float, default=None, help="minimum rating of a positive (default: keep all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train on a bundle and write a run directory")
    _add_model_flags(p)
    p.add_argument("--bundle")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--k", help="comma-separated K list for the final test metrics")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Top-K metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle")
    p.add_argument("--k")
    p.add_argument("--split", choices=("test", "eval", "train"), default="test")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregator", choices=AGGREGATORS)
    p.add_argument("--depth", type=int, choices=(0, 1, 2))
    p.add_argument("--dim", type=int)
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--loss", choices=tr.LOSSES)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("degree-stats", help="degree histogram CSV of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_degree_stats)

    p = sub.add_parser("recommend", help="Top-K items for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)
    return parser


def _setup_logging():
    level = os.environ.get("LKGR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, g.InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
