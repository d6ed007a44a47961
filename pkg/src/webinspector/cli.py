"""Command-line entry point: featurize, gen-corpus, train, eval, score, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import corpus, evaluation, hashing, models, training
from .nncore import ModelFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DEFAULT_SEED = 0
VALIDATION_FRACTION = 0.1

log = logging.getLogger("webinspector")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_time(text: str) -> float:
    """Unix seconds, or an ISO date/datetime (UTC when no zone is given)."""
    try:
        return float(text)
    except ValueError:
        pass
    try:
        stamp = dt.datetime.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a timestamp or ISO date: {text!r}")
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return stamp.timestamp()


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _fpr(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("fpr must lie strictly between 0 and 1")
    return v


@contextmanager
def _pool(jobs: int):
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        yield pool
    finally:
        if pool is not None:
            pool.shutdown()


def _require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _require_out(path: Optional[Path]) -> Path:
    if path is None:
        raise UsageError("--out is required")
    parent = path.parent if path.suffix else path
    if parent.exists() and not parent.is_dir():
        raise DataError(f"output location is not a directory: {parent}")
    return path


def _labelled(records: Sequence[corpus.DocumentRecord], what: str):
    labels = [r.label is corpus.Label.MALICIOUS for r in records]
    if not any(labels) or all(labels):
        raise DataError(f"{what} holds a single class ({sum(labels)} malicious of {len(labels)}); "
                        "both malicious and benign documents are needed")


# --- featurize ----------------------------------------------------------------------

def _input_files(target: Path) -> List[Path]:
    if target.is_dir():
        return sorted(p for p in target.rglob("*") if p.is_file())
    if target.is_file():
        return [target]
    raise DataError(f"input not found: {target}")


def cmd_featurize(args) -> int:
    out = _require_out(args.out)
    files = _input_files(args.input)
    if not files:
        warnings.warn(f"no documents under {args.input}; writing an empty cache", stacklevel=1)
    docs, kept = [], []
    for p in files:
        try:
            docs.append(p.read_bytes())
            kept.append(p)
        except OSError as exc:
            print(f"skipping unreadable {p}: {exc}", file=sys.stderr)
    if files and not kept:
        raise DataError("no input could be read")
    with _pool(args.jobs) as pool:
        chunked, _, counts = hashing.featurize_sparse(docs, pool=pool)
    records = [(hashing.document_digest(d), chunked[i].toarray().reshape(hashing.N_CHUNKS, hashing.N_BINS))
               for i, d in enumerate(docs)]
    out.parent.mkdir(parents=True, exist_ok=True)
    hashing.write_feature_cache(out, records)
    for p, n in zip(kept, counts):
        print(f"{p}\t{n}")
    return EXIT_OK if len(kept) == len(files) else EXIT_DATA


# --- gen-corpus ---------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    out = _require_out(args.out)
    spec = corpus.SyntheticSpec.from_file(args.spec) if args.spec else corpus.SyntheticSpec()
    overrides = {"seed": args.seed, "n_documents": args.n_documents,
                 "snippet_tokens_min": args.snippet_min, "snippet_tokens_max": args.snippet_max}
    spec = corpus.SyntheticSpec(**{**spec.__dict__, **{k: v for k, v in overrides.items() if v is not None}})
    docs = corpus.generate_synthetic(spec)
    manifest = corpus.write_corpus(docs, out, spec)
    counts = {lab.value: sum(d.record.label is lab for d in docs) for lab in corpus.Label}
    print(f"wrote {len(docs)} documents to {manifest} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# --- train --------------------------------------------------------------------------

def _load_records(manifest: Path) -> List[corpus.DocumentRecord]:
    return corpus.load_manifest(_require_file(manifest, "--manifest"))


def split_train_validation(records: Sequence[corpus.DocumentRecord],
                           fraction: float = VALIDATION_FRACTION):
    """Hold out the most recent ``fraction`` of the training window for early stopping."""
    ordered = sorted(records, key=lambda r: (r.first_seen, r.sha256))
    n_val = max(1, int(round(fraction * len(ordered))))
    return ordered[:-n_val], ordered[-n_val:]


def cmd_train(args) -> int:
    out = _require_out(args.out)
    records = _load_records(args.manifest)
    if args.cutoff is None:
        raise UsageError("--cutoff is required")
    train_recs, _ = corpus.time_split(records, args.cutoff, args.horizon_days * corpus.DAY)
    _labelled(train_recs, "training window")
    fit_recs, val_recs = split_train_validation(train_recs, args.val_fraction)
    _labelled(fit_recs, "training split")
    _labelled(val_recs, "validation split")
    root = args.manifest.parent
    with _pool(args.jobs) as pool:
        fit_set = training.build_feature_set(fit_recs, root, pool)
        val_set = training.build_feature_set(val_recs, root, pool)
    arch = models.ArchConfig(hidden=args.hidden, master_hidden=args.hidden)
    cfg = training.TrainConfig(batch_size=args.batch, max_epochs=args.epochs, patience=args.patience,
                               seed=args.seed, dtype=args.dtype)
    extra = {"seed": args.seed, "cutoff": args.cutoff, "tags": list(corpus.DEFAULT_TAGS),
             "n_train": len(fit_recs), "n_val": len(val_recs)}
    history_path = out.with_name(out.name + ".history.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.variant == "lr_bot":
        grid = training.ElasticNetGrid()
        res = training.train_lr_bot(grid, fit_set, val_set, arch, max_iter=args.lr_iter)
        model = res.model
        extra.update(l1=res.l1, l2=res.l2)
        history = [{"l1": a, "l2": b, "val_auc": s} for (a, b), s in res.scores.items()]
        print(f"lr_bot chose l1={res.l1:g} l2={res.l2:g} val_auc={res.scores[(res.l1, res.l2)]:.5f}")
    else:
        model = models.build_model(args.variant, arch, seed=args.seed, dtype=np.dtype(args.dtype))
        res = training.train(model, fit_set, val_set, cfg)
        extra.update(best_epoch=res.best_epoch, val_auc=res.best_metric)
        # wall time is the one nondeterministic field; keep it out of the persisted history
        history = [{k: v for k, v in h.items() if k != "wall_time"} for h in res.history]
        print(f"{args.variant} best epoch {res.best_epoch} val_auc={res.best_metric:.5f}")
    models.save_model(model, out, extra)
    training.write_history(history_path, history)
    print(f"wrote {out} and {history_path}")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------

def _model(path: Optional[Path]) -> models.Detector:
    return models.load_model(_require_file(path, "--model"))


def cmd_eval(args) -> int:
    out = _require_out(args.out)
    model = _model(args.model)
    records = _load_records(args.manifest)
    if args.cutoff is not None:
        _, test = corpus.time_split(records, args.cutoff, args.horizon_days * corpus.DAY)
    else:
        test = [r for r in records if r.label is not corpus.Label.INDETERMINATE]
    _labelled(test, "test split")
    tags = model.metadata.get("tags", list(corpus.DEFAULT_TAGS))
    with _pool(args.jobs) as pool:
        data = training.build_feature_set(test, args.manifest.parent, pool, registry=tags)
    scores = training.predict(model, data, args.batch)[:, models.MALICIOUS_HEAD]
    curve = evaluation.roc(scores, data.labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", evaluation.ResolutionWarning)
        dr, threshold = evaluation.dr_at_fpr(scores, data.labels, args.fpr)
    report = evaluation.family_report(scores, data.labels, [r.tags for r in test], threshold,
                                      families=tags[:12], target_fpr=args.fpr)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_roc(out / "roc.txt", curve)
    n_neg = int((data.labels == 0).sum())
    evaluation.write_report(out / "report.json", {
        "variant": model.tag, "auc": curve.auc, "target_fpr": args.fpr,
        "detection_rate": dr, "threshold": threshold if np.isfinite(threshold) else None,
        "n_test": len(test), "n_malicious": int(data.labels.sum()), "n_benign": n_neg,
        "fpr_resolvable": n_neg >= 1.0 / args.fpr,
    })
    (out / "families.tsv").write_text(report.to_tsv())
    print(f"{model.tag} auc={curve.auc:.5f} {report.dr_column}={dr:.4f} (n={len(test)})")
    return EXIT_OK


# --- score --------------------------------------------------------------------------

def cmd_score(args) -> int:
    model = _model(args.model)
    if not args.paths:
        raise UsageError("score needs at least one document path")
    docs = []
    for p in args.paths:
        try:
            docs.append(p.read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}")
    tags = model.metadata.get("tags", list(corpus.DEFAULT_TAGS))
    need_flat = model.tag in models.FLAT_INPUT_VARIANTS
    lines = []
    with _pool(args.jobs) as pool:
        for start in range(0, len(docs), args.batch):
            chunk = docs[start:start + args.batch]
            chunked, flat = hashing.featurize_many(chunk, pool=pool, need_chunked=not need_flat,
                                                   need_flat=need_flat)
            x = models.prepare_inputs(model.tag, chunked=chunked, flat=flat).array
            probs = model.predict_proba(x)
            for path, p in zip(args.paths[start:start + args.batch], probs):
                order = np.argsort(-p[1:], kind="mergesort")[:args.top_k]
                top = " ".join(f"{tags[i]}={p[1 + i]:.4f}" for i in order)
                lines.append(f"{path}\t{p[models.MALICIOUS_HEAD]:.6f}\t{top}")
    print("\n".join(lines))
    return EXIT_OK


# --- bench --------------------------------------------------------------------------

def bench_pages(n_pages: int, page_bytes: int, seed: int) -> List[bytes]:
    """Synthetic pages of roughly ``page_bytes`` each, for throughput runs."""
    # about 6.5 bytes per token in generated markup
    tokens = max(64, page_bytes // 6.5)
    spec = corpus.SyntheticSpec(n_documents=n_pages, seed=seed, doc_tokens_median=tokens,
                                doc_tokens_sigma=0.05, doc_tokens_max=int(tokens * 2),
                                indeterminate_fraction=0.0)
    return [d.content for d in corpus.generate_synthetic(spec)]


def cmd_bench(args) -> int:
    model = _model(args.model)
    if args.corpus is not None:
        docs = [p.read_bytes() for p in _input_files(args.corpus)]
    else:
        docs = bench_pages(args.n_pages, args.page_kb * 1000, args.seed)
    if not docs:
        raise DataError("no documents to benchmark")
    report = evaluation.bench_throughput(model, docs, batch_size=args.batch, jobs=args.jobs,
                                         hardware=args.hardware)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


# --- wiring -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="webinspector", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, jobs=True, seed=False):
        if jobs:
            p.add_argument("--jobs", type=_positive_int, default=1, help="featurization workers")
        if seed:
            p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("featurize", help="write the chunk feature cache for documents")
    p.add_argument("input", type=Path, help="a document or a directory of documents")
    p.add_argument("--out", type=Path, help="feature cache path")
    common(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("gen-corpus", help="generate a synthetic needle-in-haystack corpus")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--spec", type=Path, help="generator config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--n-documents", type=_positive_int, default=None)
    p.add_argument("--snippet-min", type=int, default=None)
    p.add_argument("--snippet-max", type=int, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a variant on documents first seen before the cutoff")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--cutoff", type=parse_time, help="unix seconds or ISO date")
    p.add_argument("--horizon-days", type=float, default=corpus.DEFAULT_HORIZON / corpus.DAY)
    p.add_argument("--variant", choices=models.VARIANTS, default="proposed")
    p.add_argument("--out", type=Path, help="model file; history goes next to it")
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--patience", type=_positive_int, default=10)
    p.add_argument("--hidden", type=_positive_int, default=1024, help="layer width")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--val-fraction", type=float, default=VALIDATION_FRACTION)
    p.add_argument("--lr-iter", type=_positive_int, default=300,
                   help="proximal-gradient iterations per lr_bot grid point")
    common(p, seed=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ROC, detection rate at a target FPR, per-family report")
    p.add_argument("--model", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--cutoff", type=parse_time, default=None,
                   help="evaluate the horizon after this time; default is the whole manifest")
    p.add_argument("--horizon-days", type=float, default=corpus.DEFAULT_HORIZON / corpus.DAY)
    p.add_argument("--fpr", type=_fpr, default=1e-3)
    p.add_argument("--batch", type=_positive_int, default=256)
    p.add_argument("--out", type=Path, help="report directory")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="print malicious and tag probabilities per document")
    p.add_argument("paths", type=Path, nargs="*")
    p.add_argument("--model", type=Path)
    p.add_argument("--top-k", type=_positive_int, default=3)
    p.add_argument("--batch", type=_positive_int, default=64)
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="end-to-end throughput")
    p.add_argument("--model", type=Path)
    p.add_argument("--corpus", type=Path, help="directory of pages; default is synthetic pages")
    p.add_argument("--n-pages", type=_positive_int, default=1000)
    p.add_argument("--page-kb", type=_positive_int, default=50)
    p.add_argument("--batch", type=_positive_int, default=16)
    p.add_argument("--hardware", default=None, help="hardware descriptor recorded in the report")
    p.add_argument("--out", type=Path, help="also write the JSON report here")
    common(p, seed=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, corpus.ManifestError, hashing.CacheFormatError, ModelFormatError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - the contract maps anything else to 3
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
